"""Experiment orchestration: the full protocol from cohort to report.

Stages: generate -> label/split -> language model tuning -> representation
building -> predictor tuning -> held-out evaluation -> subsampling curves ->
report. Tuning fits on the train split and selects on the dev split, winners
retrain on train+dev with frozen settings, and the test split stays behind a
guarded store that refuses reads until the evaluation stage unlocks it.

Every stage draws from named substreams of the master seed, so reruns are
bitwise identical and any cell can be regenerated in isolation.
"""

import dataclasses
import hashlib
import json
import logging
import time
from datetime import date, timedelta
from pathlib import Path

import numpy as np
from scipy import sparse, stats

from clmbench import defaults
from clmbench.cohort_io import read_cohort, read_ontology, write_cohort, write_ontology
from clmbench.ehr import SplitBoundaries, build_vocabulary, encode_demographics, temporal_split
from clmbench.errors import ConfigurationError, DataError, LeakageError, ReproducibilityError
from clmbench.features import CountFeaturizer, codes_before, pool_code_embeddings
from clmbench.gbt import fit_gbt
from clmbench.labelers import TASKS, label_corpus
from clmbench.lm import (
    ClmbrHyperparams,
    TimelineDataset,
    evaluate_lm_loss,
    load_checkpoint,
    representations_for_examples,
    save_checkpoint,
    train_language_model,
    vocabulary_hash,
)
from clmbench.lsi import project_lsi, train_lsi
from clmbench.metrics import BOOTSTRAP_SAMPLES, auroc, bootstrap_paired_delta
from clmbench.predictors import LOGISTIC_C_GRID, fit_logistic, predict_scores
from clmbench.rng import substream
from clmbench.synth import CohortConfig, generate_cohort
from clmbench.word2vec import train_word2vec

log = logging.getLogger(__name__)

REPRESENTATION_FAMILIES = ("counts", "word2vec", "lsi", "clmbr")
MODEL_TYPES = ("logistic", "gbt")
COUNT_VARIANTS = ("plain", "bins", "onto", "bins+onto")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_date(text):
    return date.fromisoformat(text)


def _parse_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _parse_int_list(text):
    return tuple(int(s) for s in _parse_list(text))


def _parse_float_list(text):
    return tuple(float(s) for s in _parse_list(text))


_SCHEMA = {
    "seed": (int, 0),
    "out_root": (str, "runs"),
    "tasks": (_parse_list, TASKS),
    "representations": (_parse_list, ("counts", "clmbr")),
    "models": (_parse_list, MODEL_TYPES),
    "cohort.num_patients": (int, 20000),
    "cohort.codes_per_family": (int, 300),
    "cohort.branching": (int, 7),
    "cohort.depth": (int, 3),
    "cohort.modules": (int, 12),
    "cohort.visit_rate": (float, 1.3),
    "vocab.min_patients": (int, 25),
    "split.train_end": (_parse_date, date(2015, 12, 31)),
    "split.dev_start": (_parse_date, date(2016, 1, 1)),
    "split.dev_end": (_parse_date, date(2016, 7, 1)),
    "split.test_start": (_parse_date, date(2016, 8, 1)),
    "split.test_end": (_parse_date, date(2017, 8, 1)),
    "clmbr.embedding_grid": (_parse_int_list, defaults.CLMBR_EMBEDDING_GRID),
    "clmbr.hidden_grid": (_parse_int_list, defaults.CLMBR_HIDDEN_GRID),
    "clmbr.lr_grid": (_parse_float_list, defaults.CLMBR_LR_GRID),
    "clmbr.l2_grid": (_parse_float_list, defaults.CLMBR_L2_GRID),
    "clmbr.dropout_grid": (_parse_float_list, defaults.CLMBR_DROPOUT_GRID),
    "clmbr.epochs": (int, defaults.CLMBR_EPOCHS),
    "clmbr.batch_days": (int, defaults.CLMBR_BATCH_DAYS),
    "counts.variants": (_parse_list, ("plain",)),
    "word2vec.dim": (int, defaults.WORD2VEC_DIM),
    "word2vec.epochs": (int, 10),
    "word2vec.variants": (_parse_list, ("mean", "concat")),
    "lsi.rank_grid": (_parse_int_list, defaults.LSI_RANK_GRID),
    "logistic.c_grid": (_parse_float_list, LOGISTIC_C_GRID),
    "gbt.learning_rate_grid": (_parse_float_list, (0.02, 0.1, 0.5)),
    "gbt.num_leaves_grid": (_parse_int_list, (10, 25, 100)),
    "bootstrap.samples": (int, BOOTSTRAP_SAMPLES),
    "subsample.enabled": (lambda s: s.lower() == "true", True),
    "subsample.sizes": (_parse_int_list, defaults.SUBSAMPLE_SIZES),
    "subsample.repeats": (int, defaults.SUBSAMPLE_REPEATS),
    "subsample.models": (_parse_list, MODEL_TYPES),
    "full_eval.enabled": (lambda s: s.lower() == "true", True),
    "e2e.enabled": (lambda s: s.lower() == "true", False),
    "e2e.embedding_size": (int, 100),
    "e2e.gru_hidden": (int, 100),
    "e2e.lr": (float, 1e-2),
    "e2e.l2": (float, 0.01),
    "e2e.dropout": (float, 0.1),
    "e2e.epochs": (int, 8),
    "e2e.batch_days": (int, 2000),
}


class ExperimentConfig:
    """Resolved flat key=value configuration with a stable hash."""

    def __init__(self, values=None):
        values = dict(values or {})
        self.values = {}
        for key, (parser, default) in _SCHEMA.items():
            if key in values:
                raw = values.pop(key)
                self.values[key] = parser(raw) if isinstance(raw, str) else raw
            else:
                self.values[key] = default
        if values:
            raise ConfigurationError(f"unknown config keys: {sorted(values)}")
        for task in self["tasks"]:
            if task not in TASKS:
                raise ConfigurationError(f"unknown task {task!r}")
        for family in self["representations"]:
            if family not in REPRESENTATION_FAMILIES:
                raise ConfigurationError(f"unknown representation {family!r}")
        for variant in self["counts.variants"]:
            if variant not in COUNT_VARIANTS:
                raise ConfigurationError(f"unknown counts variant {variant!r}")
        for model in self["models"]:
            if model not in MODEL_TYPES:
                raise ConfigurationError(f"unknown model type {model!r}")

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_file(cls, path):
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        return cls(values)

    def canonical(self) -> str:
        def render(v):
            if isinstance(v, tuple):
                return ",".join(render(x) for x in v)
            if isinstance(v, date):
                return v.isoformat()
            return repr(v) if isinstance(v, float) else str(v)

        return "\n".join(f"{k}={render(self.values[k])}" for k in sorted(self.values))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def boundaries(self) -> SplitBoundaries:
        return SplitBoundaries(
            self["split.train_end"],
            self["split.dev_start"],
            self["split.dev_end"],
            self["split.test_start"],
            self["split.test_end"],
        )

    def cohort_config(self) -> CohortConfig:
        return CohortConfig(
            num_patients=self["cohort.num_patients"],
            seed=self["seed"],
            codes_per_family=self["cohort.codes_per_family"],
            ontology_branching=self["cohort.branching"],
            ontology_depth=self["cohort.depth"],
            num_disease_modules=self["cohort.modules"],
            visit_rate=self["cohort.visit_rate"],
        )


# ---------------------------------------------------------------------------
# leakage-guarded split store
# ---------------------------------------------------------------------------

class SplitStore:
    """Holds one task's example splits and counts every read.

    The test split refuses reads until `unlock_test()` runs at the evaluation
    stage; the read counters end up in the manifest as the leakage audit.
    """

    def __init__(self, task, splits):
        self.task = task
        self._splits = splits
        self.reads = {name: 0 for name in splits}
        self.test_locked = True
        self.test_reads_before_unlock = 0

    def examples(self, split):
        if split == "test" and self.test_locked:
            self.test_reads_before_unlock += 1
            raise LeakageError(f"test split of {self.task} read before evaluation stage")
        self.reads[split] += 1
        return self._splits[split]

    def size(self, split):
        # sizes are metadata, not example reads
        return len(self._splits[split])

    def unlock_test(self):
        self.test_locked = False

    def audit(self):
        return {
            "reads": dict(self.reads),
            "test_reads_before_unlock": self.test_reads_before_unlock,
        }


def labeled_splits(corpus, task, boundaries) -> SplitStore:
    """Label one task and split by prediction time.

    Examples whose patient has no timeline day at or before the prediction
    time are dropped up front (with a log note) so every representation sees
    the identical example sets.
    """
    first_day = {}
    for timeline in corpus:
        if timeline.days:
            first_day[timeline.patient_id] = timeline.days[0].date
    examples = label_corpus(task, corpus)
    usable = [
        ex for ex in examples
        if ex.patient_id in first_day and first_day[ex.patient_id] <= ex.prediction_time
    ]
    if len(usable) < len(examples):
        log.info("%s: dropped %d examples with no history", task, len(examples) - len(usable))
    return SplitStore(task, temporal_split(usable, boundaries))


# ---------------------------------------------------------------------------
# representation bank
# ---------------------------------------------------------------------------

class RepresentationBank:
    """Builds feature matrices per (family, variant) for example lists.

    Unsupervised artifacts (word2vec table, LSI model, the final language
    model) are fitted once on timelines truncated at the dev window's end, so
    nothing from the test window ever enters them.
    """

    def __init__(self, config, corpus, vocabulary, ontology, lm_params=None):
        self.config = config
        self.corpus_by_id = {t.patient_id: t for t in corpus}
        self.corpus = corpus
        self.vocabulary = vocabulary
        self.ontology = ontology
        self.lm_params = lm_params
        self._featurizers = {}
        self._w2v = {}
        self._lsi = {}
        self._truncated = None

    def _truncated_corpus(self):
        if self._truncated is None:
            cutoff = self.config["split.dev_end"] - timedelta(days=1)
            out = []
            for timeline in self.corpus:
                days = tuple(d for d in timeline.days if d.date <= cutoff)
                if days:
                    out.append(dataclasses.replace(timeline, days=days))
            self._truncated = out
        return self._truncated

    def count_featurizer(self, variant) -> CountFeaturizer:
        if variant not in self._featurizers:
            self._featurizers[variant] = CountFeaturizer(
                self.vocabulary,
                self.ontology,
                time_bins="bins" in variant,
                ontology_expansion="onto" in variant,
            )
        return self._featurizers[variant]

    def w2v_table(self, expansion):
        if expansion not in self._w2v:
            self._w2v[expansion] = train_word2vec(
                self._truncated_corpus(),
                dim=self.config["word2vec.dim"],
                rng=substream(self.config["seed"], "word2vec", expansion),
                vocabulary=self.vocabulary,
                ontology=self.ontology,
                ontology_expansion=expansion,
                epochs=self.config["word2vec.epochs"],
            )
        return self._w2v[expansion]

    def lsi_model(self, rank, expansion):
        key = (rank, expansion)
        if key not in self._lsi:
            self._lsi[key] = train_lsi(
                self._truncated_corpus(),
                rank=rank,
                rng=substream(self.config["seed"], "lsi", rank, expansion),
                vocabulary=self.vocabulary,
                ontology=self.ontology,
                ontology_expansion=expansion,
            )
        return self._lsi[key]

    def variants(self, family):
        if family == "counts":
            return tuple(self.config["counts.variants"])
        if family == "clmbr":
            return ("reps",)
        if family == "word2vec":
            return tuple(self.config["word2vec.variants"])
        if family == "lsi":
            return tuple(f"rank{r}" for r in self.config["lsi.rank_grid"])
        raise ConfigurationError(f"unknown family {family!r}")

    def features(self, family, variant, examples):
        if family == "counts":
            return self.count_featurizer(variant).matrix(self.corpus_by_id, examples)
        if family == "clmbr":
            if self.lm_params is None:
                raise ConfigurationError("clmbr requested but no language model trained")
            return representations_for_examples(self.corpus_by_id, examples, self.lm_params)
        if family == "word2vec":
            expansion = "onto" in variant
            mode = "concat_min_max_mean" if "concat" in variant else "mean"
            table = self.w2v_table(expansion)
            rows = []
            for ex in examples:
                counts = codes_before(self.corpus_by_id[ex.patient_id], ex.prediction_time)
                if expansion:
                    expanded = {}
                    from clmbench.ehr import expand_ancestors

                    for code, n in counts.items():
                        for node in expand_ancestors({code}, self.ontology, include_root=False):
                            expanded[node] = expanded.get(node, 0) + n
                    counts = expanded
                rows.append(pool_code_embeddings(counts, table, mode=mode))
            return np.array(rows) if rows else np.zeros((0, table.dimension))
        if family == "lsi":
            expansion = "onto" in variant
            rank = int(variant.replace("rank", "").replace("+onto", ""))
            model = self.lsi_model(rank, expansion)
            rows = [
                project_lsi(self.corpus_by_id[ex.patient_id], ex.prediction_time, model)
                for ex in examples
            ]
            return np.array(rows) if rows else np.zeros((0, model.rank))
        raise ConfigurationError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# two-stage grid search
# ---------------------------------------------------------------------------

def lm_grid(config):
    grid = []
    for emb in config["clmbr.embedding_grid"]:
        for hid in config["clmbr.hidden_grid"]:
            for lr in config["clmbr.lr_grid"]:
                for l2 in config["clmbr.l2_grid"]:
                    for drop in config["clmbr.dropout_grid"]:
                        grid.append(
                            ClmbrHyperparams(
                                embedding_size=emb,
                                gru_hidden=hid,
                                lr=lr,
                                l2=l2,
                                dropout=drop,
                                epochs=config["clmbr.epochs"],
                                batch_days=config["clmbr.batch_days"],
                            )
                        )
    return grid


def grid_search_language_model(config, corpus, vocabulary, ontology, objective="clmbr"):
    """Select on dev language-model loss, then retrain on train+dev.

    Returns (final params, info). The retrained model runs for exactly the
    dev-selected epoch count, with the schedule re-spanned.
    """
    grid = lm_grid(config)
    if not grid:
        raise ConfigurationError("empty language model grid")
    fit_through = config["split.train_end"]
    dev_window = (config["split.dev_start"], config["split.dev_end"])
    results = []
    for i, hp in enumerate(grid):
        rng = substream(config["seed"], "lm-tune", objective, i)
        params, trace = train_language_model(
            corpus, hp, objective, rng, vocabulary, ontology,
            fit_through=fit_through, dev_window=dev_window,
        )
        best_rows = [r for r in trace if "dev_loss" in r and "epoch" in r]
        dev_loss = min(r["dev_loss"] for r in best_rows)
        best_epoch = min(best_rows, key=lambda r: r["dev_loss"])["epoch"]
        results.append({"index": i, "dev_loss": dev_loss, "epochs": best_epoch + 1, "hp": hp})
        log.info("lm grid %d/%d: dev_loss=%.4f", i + 1, len(grid), dev_loss)
    winner = min(results, key=lambda r: (r["dev_loss"], r["index"]))
    final_hp = dataclasses.replace(winner["hp"], epochs=winner["epochs"])
    final_params, _ = train_language_model(
        corpus, final_hp, objective,
        substream(config["seed"], "lm-final", objective), vocabulary, ontology,
        fit_through=config["split.dev_end"] - timedelta(days=1),
    )
    info = {
        "objective": objective,
        "chosen": _hp_dict(final_hp),
        "dev_loss": winner["dev_loss"],
        "grid_size": len(grid),
    }
    return final_params, info


def _hp_dict(hp):
    return {f.name: getattr(hp, f.name) for f in dataclasses.fields(hp)}


def predictor_grid(config, models=None):
    """(model type, settings) cells of the predictor stage."""
    grid = []
    for model in models if models is not None else config["models"]:
        if model == "logistic":
            grid.extend(("logistic", {"C": c}) for c in config["logistic.c_grid"])
        elif model == "gbt":
            grid.extend(
                ("gbt", {"learning_rate": lr, "num_leaves": nl})
                for lr in config["gbt.learning_rate_grid"]
                for nl in config["gbt.num_leaves_grid"]
            )
        else:
            raise ConfigurationError(f"unknown model type {model!r}")
    return grid


def _fit_cell(model_type, settings, X_tr, y_tr, X_dv, y_dv):
    if model_type == "logistic":
        return fit_logistic(X_tr, y_tr, settings["C"])
    return fit_gbt(
        X_tr, y_tr, settings["learning_rate"], settings["num_leaves"], X_dv, y_dv
    )


def _refit_cell(model_type, settings, model, X, y):
    if model_type == "logistic":
        return fit_logistic(X, y, settings["C"])
    return fit_gbt(
        X, y, settings["learning_rate"], settings["num_leaves"],
        fixed_rounds=model.best_round,
    )


def _stack(a, b):
    if sparse.issparse(a) or sparse.issparse(b):
        return sparse.vstack([sparse.csr_matrix(a), sparse.csr_matrix(b)]).tocsr()
    return np.vstack([a, b])


def tune_predictor(config, family, variant_features, y_tr, y_dv, models=None):
    """Tune (variant x model grid) on dev AUROC; retrain winners on train+dev.

    `variant_features` maps variant name -> (X_train, X_dev). Returns
    per-model-type winners plus the overall best, each holding the retrained
    artifact and its feature recipe. No test data is touched; the retrained
    tree count / C come frozen from the tuning fits.
    """
    grid = predictor_grid(config, models)
    if not grid:
        raise ConfigurationError("empty predictor grid")
    best_by_model = {}
    for variant, (X_tr, X_dv) in variant_features.items():
        for model_type, settings in grid:
            model = _fit_cell(model_type, settings, X_tr, y_tr, X_dv, y_dv)
            try:
                dev_auroc = auroc(predict_scores(model, X_dv), y_dv)
            except DataError:
                dev_auroc = 0.5
            cell = {
                "family": family,
                "variant": variant,
                "model_type": model_type,
                "settings": dict(settings),
                "dev_auroc": dev_auroc,
                "_model": model,
                "_X": (X_tr, X_dv),
            }
            cur = best_by_model.get(model_type)
            if cur is None or dev_auroc > cur["dev_auroc"]:
                best_by_model[model_type] = cell
    y_both = np.concatenate([y_tr, y_dv])
    for cell in best_by_model.values():
        X_both = _stack(*cell.pop("_X"))
        cell["artifact"] = _refit_cell(
            cell["model_type"], cell["settings"], cell.pop("_model"), X_both, y_both
        )
        cell["retrain_size"] = int(y_both.size)
        if cell["model_type"] == "gbt":
            cell["settings"]["num_boost_round"] = cell["artifact"].best_round
    overall = max(best_by_model.values(), key=lambda c: c["dev_auroc"])
    return best_by_model, overall


def grid_search_predictor(config, bank, family, train_examples, dev_examples,
                          models=None, variants=None):
    """Featurize the splits and tune; see `tune_predictor`."""
    y_tr = np.array([ex.label for ex in train_examples])
    y_dv = np.array([ex.label for ex in dev_examples])
    variant_features = {
        variant: (
            bank.features(family, variant, train_examples),
            bank.features(family, variant, dev_examples),
        )
        for variant in (variants if variants is not None else bank.variants(family))
    }
    return tune_predictor(config, family, variant_features, y_tr, y_dv, models)


def grid_search(stage, config, **context):
    """Protocol dispatcher: LM stage selects on dev loss, predictor on dev AUROC."""
    if stage == "language_model":
        return grid_search_language_model(config, **context)
    if stage == "predictor":
        return grid_search_predictor(config, **context)
    raise ConfigurationError(f"unknown grid search stage {stage!r}")


# ---------------------------------------------------------------------------
# subsampling
# ---------------------------------------------------------------------------

def draw_subsample(store: SplitStore, size, rng):
    """Stratified index draw at exactly 10% positives, split 70/30 train/dev.

    The train part draws from the train split and the dev part from the dev
    split, both without replacement. Returns (train indices, dev indices)
    into the respective split example lists.
    """
    n_tr = round(defaults.SUBSAMPLE_TRAIN_FRACTION * size)
    n_dv = size - n_tr
    pos_total = round(defaults.SUBSAMPLE_POSITIVE_RATE * size)
    pos_tr = round(defaults.SUBSAMPLE_POSITIVE_RATE * n_tr)
    pos_dv = pos_total - pos_tr
    out = {}
    for split, n, n_pos in (("train", n_tr, pos_tr), ("dev", n_dv, pos_dv)):
        examples = store.examples(split)
        pos_idx = [i for i, ex in enumerate(examples) if ex.label == 1]
        neg_idx = [i for i, ex in enumerate(examples) if ex.label == 0]
        if len(pos_idx) < n_pos or len(neg_idx) < n - n_pos:
            raise DataError(
                f"{store.task}: not enough {split} examples for subsample size {size}"
            )
        take_pos = rng.choice(len(pos_idx), size=n_pos, replace=False)
        take_neg = rng.choice(len(neg_idx), size=n - n_pos, replace=False)
        out[split] = np.array(
            sorted([pos_idx[i] for i in take_pos] + [neg_idx[i] for i in take_neg]),
            dtype=np.int64,
        )
    return out["train"], out["dev"]


class SplitFeatureCache:
    """Per-(family, variant, split) feature matrices for one task's store."""

    def __init__(self, bank, store):
        self.bank = bank
        self.store = store
        self._cache = {}
        self._labels = {}

    def matrix(self, family, variant, split):
        key = (family, variant, split)
        if key not in self._cache:
            self._cache[key] = self.bank.features(
                family, variant, self.store.examples(split)
            )
        return self._cache[key]

    def labels(self, split):
        if split not in self._labels:
            self._labels[split] = np.array(
                [ex.label for ex in self.store.examples(split)]
            )
        return self._labels[split]


def subsample_experiment(config, bank, store, families=None, sizes=None,
                         repeats=None, models=None, cache=None):
    """Training-size curves: tune and fit on stratified subsamples, evaluate
    on the untouched full test split, aggregate with a 95% t interval.

    Draws are shared across representations within a repeat so comparisons
    stay paired; subsample features are row slices of the cached full-split
    matrices.
    """
    families = families if families is not None else config["representations"]
    sizes = sizes if sizes is not None else config["subsample.sizes"]
    repeats = repeats if repeats is not None else config["subsample.repeats"]
    models = models if models is not None else config["subsample.models"]
    cache = cache if cache is not None else SplitFeatureCache(bank, store)
    y_test = cache.labels("test")
    y_train_full = cache.labels("train")
    y_dev_full = cache.labels("dev")
    curves = {}
    for size in sizes:
        for repeat in range(repeats):
            rng = substream(config["seed"], "subsample", store.task, size, repeat)
            idx_tr, idx_dv = draw_subsample(store, size, rng)
            y_tr, y_dv = y_train_full[idx_tr], y_dev_full[idx_dv]
            for family in families:
                variant_features = {
                    variant: (
                        cache.matrix(family, variant, "train")[idx_tr],
                        cache.matrix(family, variant, "dev")[idx_dv],
                    )
                    for variant in bank.variants(family)
                }
                best_by_model, _ = tune_predictor(
                    config, family, variant_features, y_tr, y_dv, models
                )
                for model_type, cell in best_by_model.items():
                    scores = predict_scores(
                        cell["artifact"], cache.matrix(family, cell["variant"], "test")
                    )
                    value = auroc(scores, y_test)
                    curves.setdefault((family, model_type), {}).setdefault(size, []).append(value)
    out = {}
    for (family, model_type), by_size in sorted(curves.items()):
        series = {}
        for size, values in sorted(by_size.items()):
            series[size] = summarize_repeats(values)
        out[f"{family}|{model_type}"] = series
    return out


def summarize_repeats(values):
    """Mean with a 95% t-distribution interval half-width over repeats."""
    values = list(map(float, values))
    n = len(values)
    mean = float(np.mean(values))
    if n < 2:
        return {"mean": mean, "ci_halfwidth": None, "n": n, "values": values}
    half = float(stats.t.ppf(0.975, n - 1) * np.std(values, ddof=1) / np.sqrt(n))
    return {"mean": mean, "ci_halfwidth": half, "n": n, "values": values}


def sign_test_pvalue(margins):
    """One-sided sign test that paired margins favor the first method."""
    margins = [m for m in margins if m != 0.0]
    if not margins:
        return 1.0
    wins = sum(1 for m in margins if m > 0)
    return float(stats.binom.sf(wins - 1, len(margins), 0.5))


# ---------------------------------------------------------------------------
# benchmark pipeline
# ---------------------------------------------------------------------------

class BenchmarkRun:
    """One run directory: artifacts, manifest, and the metric report."""

    def __init__(self, config: ExperimentConfig, out_root=None, resume=False):
        self.config = config
        root = Path(out_root if out_root is not None else config["out_root"])
        self.dir = root / f"run-{config.hash()}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        self.report_path = self.dir / "metric_report.json"
        if resume and self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as fh:
                manifest = json.load(fh)
            if manifest["config_hash"] != config.hash():
                raise ReproducibilityError(
                    f"manifest config hash {manifest['config_hash']} does not match "
                    f"{config.hash()}"
                )
            self.manifest = manifest
        else:
            self.manifest = {
                "config_hash": config.hash(),
                "config": config.canonical(),
                "stages": {},
                "seeds": {"master": config["seed"]},
                "artifacts": {},
            }

    def stage_done(self, name):
        return name in self.manifest["stages"]

    def record_stage(self, name, **info):
        self.manifest["stages"][name] = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), **info}
        self._flush()

    def _flush(self):
        with open(self.manifest_path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)


def run_benchmark(config: ExperimentConfig, out_root=None, resume=False):
    """Execute the full protocol; returns (report dict, manifest dict).

    All stages are deterministic functions of the config; rerunning with the
    same config produces a byte-identical metric report.
    """
    run = BenchmarkRun(config, out_root=out_root, resume=resume)
    corpus_path = run.dir / "cohort.jsonl"
    ontology_path = run.dir / "ontology.tsv"

    if run.stage_done("generate") and corpus_path.exists():
        corpus_raw = read_cohort(corpus_path)
        ontology = read_ontology(ontology_path)
    else:
        corpus_raw, ontology = generate_cohort(config.cohort_config())
        write_cohort(corpus_path, corpus_raw)
        write_ontology(ontology_path, ontology)
        run.manifest["artifacts"]["cohort"] = str(corpus_path)
        run.manifest["artifacts"]["ontology"] = str(ontology_path)
        run.record_stage(
            "generate",
            corpus_hash=hashlib.sha256(corpus_path.read_bytes()).hexdigest(),
        )

    corpus = [encode_demographics(t) for t in corpus_raw]
    vocabulary = build_vocabulary(corpus, min_patients=config["vocab.min_patients"])
    boundaries = config.boundaries()
    stores = {task: labeled_splits(corpus, task, boundaries) for task in config["tasks"]}

    lm_params = None
    if "clmbr" in config["representations"]:
        ckpt = run.dir / "clmbr.ckpt"
        if run.stage_done("language_model") and ckpt.exists():
            lm_params = load_checkpoint(ckpt)
            if lm_params.vocab_hash != vocabulary_hash(vocabulary):
                raise ReproducibilityError(
                    "resumed language model was trained on a different vocabulary"
                )
        else:
            lm_params, lm_info = grid_search_language_model(
                config, corpus, vocabulary, ontology, objective="clmbr"
            )
            save_checkpoint(ckpt, lm_params)
            run.manifest["artifacts"]["clmbr_checkpoint"] = str(ckpt)
            run.record_stage("language_model", **lm_info)

    bank = RepresentationBank(config, corpus, vocabulary, ontology, lm_params=lm_params)

    report = {
        "config_hash": config.hash(),
        "tasks": list(config["tasks"]),
        "representations": list(config["representations"]),
        "full_eval": {},
        "subsampling": {},
        "sizes": list(config["subsample.sizes"]),
    }

    caches = {task: SplitFeatureCache(bank, stores[task]) for task in config["tasks"]}

    if config["full_eval.enabled"]:
        tuned = {}
        for task in config["tasks"]:
            cache = caches[task]
            y_tr, y_dv = cache.labels("train"), cache.labels("dev")
            tuned[task] = {}
            for family in config["representations"]:
                variant_features = {
                    variant: (
                        cache.matrix(family, variant, "train"),
                        cache.matrix(family, variant, "dev"),
                    )
                    for variant in bank.variants(family)
                }
                by_model, overall = tune_predictor(
                    config, family, variant_features, y_tr, y_dv
                )
                tuned[task][family] = {"by_model": by_model, "overall": overall}
        # evaluation stage: unlock the guarded test split and score everything
        for task in config["tasks"]:
            store = stores[task]
            cache = caches[task]
            store.unlock_test()
            y_test = cache.labels("test")
            task_report = {}
            baseline_scores = None
            for family in config["representations"]:
                entry = {}
                for model_type, cell in sorted(tuned[task][family]["by_model"].items()):
                    X_test = cache.matrix(family, cell["variant"], "test")
                    scores = predict_scores(cell["artifact"], X_test)
                    entry[model_type] = {
                        "auroc": auroc(scores, y_test),
                        "variant": cell["variant"],
                        "settings": cell["settings"],
                        "dev_auroc": cell["dev_auroc"],
                        "retrain_size": cell["retrain_size"],
                        "scores": scores,
                    }
                best_model = max(entry, key=lambda m: entry[m]["dev_auroc"])
                entry["best"] = {
                    "model_type": best_model,
                    "auroc": entry[best_model]["auroc"],
                    "variant": entry[best_model]["variant"],
                }
                task_report[family] = entry
                if family == "counts":
                    baseline_scores = entry[best_model]["scores"]
            if config["e2e.enabled"]:
                task_report["gru_e2e"] = _evaluate_e2e(
                    config, bank, stores[task], task, y_test
                )
            for family in list(task_report):
                entry = task_report[family]
                best_scores = entry[entry["best"]["model_type"]]["scores"]
                if family != "counts" and baseline_scores is not None:
                    mean, std = bootstrap_paired_delta(
                        baseline_scores,
                        best_scores,
                        y_test,
                        substream(config["seed"], "bootstrap", task, family),
                        n_boot=config["bootstrap.samples"],
                    )
                    entry["best"]["delta_vs_counts"] = {"mean": mean, "std": std}
                for model_type in entry:
                    if isinstance(entry[model_type], dict):
                        entry[model_type].pop("scores", None)
            report["full_eval"][task] = task_report
        run.record_stage("full_eval")

    if config["subsample.enabled"]:
        for task in config["tasks"]:
            store = stores[task]
            store.unlock_test()
            report["subsampling"][task] = subsample_experiment(
                config, bank, store, cache=caches[task]
            )
        run.record_stage("subsampling")

    report["leakage_guard"] = {
        task: store.audit() for task, store in sorted(stores.items())
    }
    report["leakage_guard"]["passed"] = all(
        store.test_reads_before_unlock == 0 for store in stores.values()
    )

    payload = json.dumps(report, indent=1, sort_keys=True, default=_json_default)
    run.report_path.write_text(payload, encoding="utf-8")
    run.manifest["artifacts"]["metric_report"] = str(run.report_path)
    run.record_stage("report")
    return report, run.manifest


def _evaluate_e2e(config, bank, store, task, y_test):
    """Tune the end-to-end sequence classifier on dev AUROC, retrain on
    train+dev with the dev-selected epoch count, and score the test split."""
    from clmbench.gru_classifier import E2EHyperparams, fit_end_to_end_gru

    hp = E2EHyperparams(
        embedding_size=config["e2e.embedding_size"],
        gru_hidden=config["e2e.gru_hidden"],
        lr=config["e2e.lr"],
        l2=config["e2e.l2"],
        dropout=config["e2e.dropout"],
        epochs=config["e2e.epochs"],
        batch_days=config["e2e.batch_days"],
    )
    train_ex = store.examples("train")
    dev_ex = store.examples("dev")
    tuned = fit_end_to_end_gru(
        bank.corpus_by_id, train_ex, dev_ex, hp,
        substream(config["seed"], "e2e-tune", task),
        bank.vocabulary, bank.ontology, task=task,
    )
    dev_rows = [row for row in tuned.trace if "dev_auroc" in row]
    best_row = max(dev_rows, key=lambda r: r["dev_auroc"])
    final_hp = dataclasses.replace(hp, epochs=best_row["epoch"] + 1)
    final = fit_end_to_end_gru(
        bank.corpus_by_id, train_ex + dev_ex, [], final_hp,
        substream(config["seed"], "e2e-final", task),
        bank.vocabulary, bank.ontology, task=task,
    )
    test_ex = store.examples("test")
    scores = final.score_examples(bank.corpus_by_id, test_ex)
    model_auroc = auroc(scores, y_test)
    entry = {
        "gru": {
            "auroc": model_auroc,
            "variant": "sequence",
            "settings": {**_hp_dict(hp), "epochs": final_hp.epochs},
            "dev_auroc": best_row["dev_auroc"],
            "retrain_size": len(train_ex) + len(dev_ex),
            "scores": scores,
        }
    }
    entry["best"] = {"model_type": "gru", "auroc": model_auroc, "variant": "sequence"}
    return entry


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value)!r}")


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def emit_report(report, out_dir, formats=("table", "csv")):
    """Render the metric report: a text table of the full-size evaluation and
    CSV series for the subsampling curves. Missing cells stay as explicit
    blank fields rather than dropped rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    families = [f for f in report.get("representations", []) if f != "counts"]
    if any("gru_e2e" in v for v in report.get("full_eval", {}).values()):
        families.append("gru_e2e")
    if "table" in formats:
        lines = []
        header = ["task", "counts"] + [f"{f} (delta vs counts)" for f in families]
        lines.append(" | ".join(h.ljust(28) for h in header))
        lines.append("-" * (31 * len(header)))
        for task in report.get("tasks", []):
            task_eval = report.get("full_eval", {}).get(task, {})
            counts = task_eval.get("counts", {}).get("best", {})
            row = [task.ljust(28), _fmt(counts.get("auroc")).ljust(28)]
            for family in families:
                best = task_eval.get(family, {}).get("best", {})
                delta = best.get("delta_vs_counts")
                if delta is None:
                    row.append("".ljust(28))
                else:
                    row.append(f"{delta['mean']:+.4f} +- {delta['std']:.4f}".ljust(28))
            lines.append(" | ".join(row))
        path = out_dir / "report.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        sub_path = out_dir / "subsampling.csv"
        rows = ["task,representation,size,mean_auroc,ci_halfwidth"]
        model_rows = ["task,representation,model_type,size,mean_auroc,ci_halfwidth"]
        all_families = report.get("representations", [])
        for task in report.get("tasks", []):
            series_by_key = report.get("subsampling", {}).get(task, {})
            per_family = {}
            for key, series in series_by_key.items():
                family, model_type = key.split("|")
                for size_str, cell in series.items():
                    model_rows.append(
                        f"{task},{family},{model_type},{size_str},"
                        f"{_fmt(cell.get('mean'))},{_fmt(cell.get('ci_halfwidth'))}"
                    )
                    size = int(size_str)
                    slot = per_family.setdefault(family, {}).setdefault(size, {"mean": None})
                    if slot["mean"] is None or cell["mean"] > slot["mean"]:
                        per_family[family][size] = cell
            for family in all_families:
                for size in report.get("sizes", []):
                    cell = per_family.get(family, {}).get(int(size), {})
                    rows.append(
                        f"{task},{family},{size},"
                        f"{_fmt(cell.get('mean'))},{_fmt(cell.get('ci_halfwidth'))}"
                    )
        sub_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        model_path = out_dir / "model_type_comparison.csv"
        model_path.write_text("\n".join(model_rows) + "\n", encoding="utf-8")
        written.extend([sub_path, model_path])
    return written


def _fmt(value):
    return "" if value is None else f"{value:.4f}"
