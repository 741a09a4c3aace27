"""End-to-end GRU classifier: the language model backbone with the GRU output
fed directly into a scalar logistic head, trained per outcome on binary
cross-entropy with the same recipe (Adam, decoupled L2, linear warmup/decay
schedule, dropout at the two usual sites)."""

import logging
from dataclasses import dataclass

import numpy as np

from clmbench.errors import ConfigurationError, DataError, TrainingDivergedError
from clmbench.gru import GATE_NAMES, gru_backward, gru_forward, init_gru_params
from clmbench.hierarchy import CodeHierarchy
from clmbench.lm import (
    NUM_AUX,
    WARMUP_EPOCHS,
    TimelineDataset,
    _BatchLayout,
    _embed_days,
    _backprop_bags,
    assemble_batches,
)
from clmbench.metrics import auroc
from clmbench.numerics import AdamState, adam_update, lr_schedule, sigmoid, xavier_init
from clmbench.rng import substream

log = logging.getLogger(__name__)

E2E_EMBEDDING_GRID = (100, 200, 400)
E2E_HIDDEN_GRID = (100, 200, 400)
E2E_LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5)
E2E_L2_GRID = (0.1, 0.01, 0.001)
E2E_DROPOUT_GRID = (0.0, 0.1, 0.2)


@dataclass(frozen=True)
class E2EHyperparams:
    embedding_size: int = 100
    gru_hidden: int = 100
    lr: float = 1e-3
    l2: float = 0.01
    dropout: float = 0.1
    epochs: int = 10
    batch_days: int = 2000

    def __post_init__(self):
        if self.embedding_size <= 0 or self.gru_hidden <= 0 or self.batch_days <= 0:
            raise ConfigurationError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


@dataclass
class EndToEndGruModel:
    """Backbone weights plus a scalar logistic output head."""

    hyperparams: E2EHyperparams
    hierarchy: CodeHierarchy
    weights: dict
    aux_mean: np.ndarray
    aux_std: np.ndarray
    task: str = ""

    @property
    def embedding_size(self):
        return self.weights["W"].shape[1]

    def _forward(self, dataset, layout, dropout_rng=None):
        x = _embed_days(self, dataset, layout.day_rows)
        keep = 1.0 - self.hyperparams.dropout
        ctx = {"x": x}
        if dropout_rng is not None and self.hyperparams.dropout > 0:
            mask_in = (dropout_rng.random(x.shape) < keep) / keep
            x = x * mask_in
            ctx.update(x=x, mask_in=mask_in)
        h, cache = gru_forward(self.weights, x, layout.batch)
        last_rows = layout.batch.offsets + layout.batch.lengths - 1
        h_last = h[last_rows]
        if dropout_rng is not None and self.hyperparams.dropout > 0:
            mask_mid = (dropout_rng.random(h_last.shape) < keep) / keep
            h_last = h_last * mask_mid
            ctx["mask_mid"] = mask_mid
        logits = h_last @ self.weights["w_head"] + self.weights["b_head"][0]
        ctx.update(cache=cache, h_last=h_last, last_rows=last_rows)
        return logits, ctx

    def score_examples(self, corpus_by_id, examples, batch_days=4000) -> np.ndarray:
        """Probabilities for (patient, prediction time) examples, dropout off."""
        keys = sorted({(ex.patient_id, ex.prediction_time) for ex in examples})
        dataset = TimelineDataset(
            [corpus_by_id[pid] for pid in sorted({k[0] for k in keys})], self.hierarchy
        )
        lengths = []
        for pid, when in keys:
            p = dataset.patient_index[pid]
            n = dataset.day_count(p, when.toordinal())
            if n == 0:
                raise DataError(f"patient {pid} has no history at {when}")
            lengths.append((p, n))
        scores_by_key = {}
        idx = list(range(len(keys)))
        for chunk in assemble_batches([lengths[i][1] for i in idx], batch_days):
            members = [idx[i] for i in chunk]
            layout = _BatchLayout(
                dataset, [lengths[i][0] for i in members], [lengths[i][1] for i in members]
            )
            logits, _ = self._forward(dataset, layout)
            # layout sorts by length; map scores back through its ordering
            ordered = sorted(
                range(len(members)),
                key=lambda j: (-lengths[members[j]][1], lengths[members[j]][0]),
            )
            for slot, j in enumerate(ordered):
                scores_by_key[keys[members[j]]] = sigmoid(logits[slot])
        return np.array([scores_by_key[(ex.patient_id, ex.prediction_time)] for ex in examples])

    def predict_proba(self, inputs) -> np.ndarray:
        corpus_by_id, examples = inputs
        return self.score_examples(corpus_by_id, examples)


def init_e2e_model(vocabulary, ontology, hp: E2EHyperparams, rng, task="") -> EndToEndGruModel:
    hierarchy = CodeHierarchy(vocabulary, ontology)
    weights = {"W": xavier_init((len(hierarchy), hp.embedding_size), rng)}
    weights.update(init_gru_params(hp.embedding_size + NUM_AUX, hp.gru_hidden, rng))
    bound = 1.0 / np.sqrt(hp.gru_hidden)
    weights["w_head"] = rng.uniform(-bound, bound, size=hp.gru_hidden)
    weights["b_head"] = rng.uniform(-bound, bound, size=1)
    return EndToEndGruModel(
        hyperparams=hp,
        hierarchy=hierarchy,
        weights=weights,
        aux_mean=np.zeros(NUM_AUX),
        aux_std=np.ones(NUM_AUX),
        task=task,
    )


def _example_units(dataset, examples):
    units = []
    for ex in examples:
        p = dataset.patient_index.get(ex.patient_id)
        if p is None:
            raise DataError(f"patient {ex.patient_id} missing from the corpus")
        n = dataset.day_count(p, ex.prediction_time.toordinal())
        if n == 0:
            raise DataError(f"patient {ex.patient_id} has no history at {ex.prediction_time}")
        units.append((p, n, float(ex.label)))
    return units


def fit_end_to_end_gru(corpus_by_id, train_examples, dev_examples, hp, rng,
                       vocabulary, ontology, task="") -> EndToEndGruModel:
    """Train on binary cross-entropy; select the epoch by dev AUROC.

    Each example is one sequence: the patient's days up to its prediction
    time. Batches pack examples greedily by total day count.
    """
    if not train_examples:
        raise DataError("no training examples")
    model = init_e2e_model(vocabulary, ontology, hp, rng, task=task)
    pids = sorted({ex.patient_id for ex in list(train_examples) + list(dev_examples)})
    dataset = TimelineDataset([corpus_by_id[pid] for pid in pids], model.hierarchy)
    units = _example_units(dataset, train_examples)
    all_rows = np.concatenate([dataset.day_rows(p, n) for p, n, _ in units])
    model.aux_mean, model.aux_std = dataset.aux_stats(np.unique(all_rows))

    steps_per_epoch = max(len(assemble_batches([u[1] for u in units], hp.batch_days)), 1)
    total_steps = hp.epochs * steps_per_epoch
    warmup = min(WARMUP_EPOCHS * steps_per_epoch, max(total_steps - 1, 0))
    state = AdamState(weight_decay=hp.l2)
    best = {"auroc": -np.inf, "weights": None, "epoch": None}
    snapshot = {k: v.copy() for k, v in model.weights.items()}
    step = 0
    trace = []
    for epoch in range(hp.epochs):
        order = rng.permutation(len(units))
        epoch_loss, n_seen = 0.0, 0
        for chunk in assemble_batches([units[i][1] for i in order], hp.batch_days):
            members = [units[order[i]] for i in chunk]
            layout = _BatchLayout(dataset, [m[0] for m in members], [m[1] for m in members])
            # align labels with the layout's length-descending order
            by_slot = sorted(range(len(members)), key=lambda j: (-members[j][1], members[j][0]))
            y = np.array([members[j][2] for j in by_slot])
            logits, ctx = model._forward(dataset, layout, dropout_rng=rng)
            loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
            if not np.isfinite(loss):
                model.weights = snapshot
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", snapshot)
            dz = (sigmoid(logits) - y) / y.size
            grads = {name: np.zeros_like(w) for name, w in model.weights.items()}
            grads["w_head"] += ctx["h_last"].T @ dz
            grads["b_head"][0] += dz.sum()
            dh_last = np.outer(dz, model.weights["w_head"])
            if "mask_mid" in ctx:
                dh_last = dh_last * ctx["mask_mid"]
            dh_flat = np.zeros_like(ctx["cache"]["z"])
            dh_flat[ctx["last_rows"]] = dh_last
            dx, gru_grads = gru_backward(
                model.weights, ctx["x"], layout.batch, ctx["cache"], dh_flat
            )
            for name in GATE_NAMES:
                grads[name] += gru_grads[name]
            if "mask_in" in ctx:
                dx = dx * ctx["mask_in"]
            _backprop_bags(dataset, layout.day_rows, dx[:, : model.embedding_size], grads["W"])
            lr = lr_schedule(min(step, total_steps), total_steps, warmup, hp.lr)
            adam_update(model.weights, grads, state, lr)
            epoch_loss += loss * y.size
            n_seen += y.size
            step += 1
        snapshot = {k: v.copy() for k, v in model.weights.items()}
        row = {"epoch": epoch, "train_loss": epoch_loss / max(n_seen, 1)}
        if dev_examples:
            dev_scores = model.score_examples(corpus_by_id, dev_examples)
            dev_labels = [ex.label for ex in dev_examples]
            try:
                row["dev_auroc"] = auroc(dev_scores, dev_labels)
            except DataError:
                row["dev_auroc"] = 0.5
            if row["dev_auroc"] > best["auroc"]:
                best = {"auroc": row["dev_auroc"], "weights": snapshot, "epoch": epoch}
        trace.append(row)
        log.info("e2e gru epoch %d: %s", epoch, row)
    if dev_examples and best["weights"] is not None:
        model.weights = best["weights"]
    model.trace = trace
    return model
