"""Clinical language model over day sequences and its extracted representations.

Architecture per day: mean code embedding plus five standardized time
features, a single-layer GRU, then GELU and a linear bottleneck back to the
embedding width. The bottleneck output is the patient representation; it also
scores every hierarchy node through the tied embedding matrix to predict the
next day's code set (binary relevance), or a flat softmax over a reduced
class space for the simplified objective.

Everything trains in float64 with hand-derived backward passes; training is
single threaded and bit-deterministic for a given seed.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from datetime import timedelta

import numpy as np

from clmbench.ehr import CodeId, CodeVocabulary, Ontology
from clmbench.errors import ConfigurationError, DataError, TrainingDivergedError
from clmbench.gru import GATE_NAMES, RaggedBatch, gru_backward, gru_forward, init_gru_params
from clmbench.hierarchy import CodeHierarchy, binary_relevance_loss, hierarchical_code_prob
from clmbench.numerics import (
    AdamState,
    adam_update,
    gelu,
    gelu_grad,
    lr_schedule,
    xavier_init,
)

log = logging.getLogger(__name__)

NUM_AUX = 5
WARMUP_EPOCHS = 2


@dataclass(frozen=True)
class ClmbrHyperparams:
    embedding_size: int = 400
    gru_hidden: int = 800
    lr: float = 1e-3
    l2: float = 0.01
    dropout: float = 0.1
    epochs: int = 50
    batch_days: int = 2000

    def __post_init__(self):
        if self.embedding_size <= 0 or self.gru_hidden <= 0:
            raise ConfigurationError("model sizes must be positive")
        if self.batch_days <= 0:
            raise ConfigurationError("batch_days must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class DayInput:
    """One day's observed codes plus the raw five time features:
    age, ln(1+age), delta from the previous day, ln(1+delta), first-day flag."""

    codes: frozenset
    aux: tuple

    def __post_init__(self):
        if len(self.aux) != NUM_AUX:
            raise ConfigurationError(f"aux must have {NUM_AUX} entries")


@dataclass
class LanguageModelParams:
    """Trained weights plus everything needed to rebuild inputs.

    `weights["W"]` is the tied embedding matrix with one row per hierarchy
    node, used both for input-bag means and for hierarchy node scores.
    """

    hyperparams: ClmbrHyperparams
    objective: str
    hierarchy: CodeHierarchy
    weights: dict
    aux_mean: np.ndarray
    aux_std: np.ndarray
    class_positions: np.ndarray | None = None  # reduced softmax rows, doctorai only
    vocab_hash: str = ""

    def __post_init__(self):
        if self.weights["W"].shape[0] != len(self.hierarchy):
            raise ConfigurationError("embedding rows must equal hierarchy node count")
        if np.any(self.aux_std <= 0):
            raise ConfigurationError("aux normalization stds must be positive")

    @property
    def embedding_size(self):
        return self.weights["W"].shape[1]


def vocabulary_hash(vocabulary: CodeVocabulary) -> str:
    payload = "\n".join(str(c) for c in vocabulary.codes).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def day_aux(date_ordinal, birth_ordinal, prev_ordinal) -> tuple:
    age = float(date_ordinal - birth_ordinal)
    if prev_ordinal is None:
        delta, first = 0.0, 1.0
    else:
        delta, first = float(date_ordinal - prev_ordinal), 0.0
    return (age, float(np.log1p(age)), delta, float(np.log1p(delta)), first)


class TimelineDataset:
    """Array form of an encoded corpus, shared by training and extraction.

    Day order within a patient is the timeline order; a date cutoff is a
    per-patient prefix, so truncated views never break the recurrence.
    """

    def __init__(self, corpus, hierarchy: CodeHierarchy):
        self.hierarchy = hierarchy
        bag_chunks, bag_offsets = [], [0]
        target_chunks, target_offsets = [], [0]
        dates, aux = [], []
        patient_slices = []
        patient_ids = []
        empty_bags = 0
        for timeline in corpus:
            start = len(dates)
            birth = timeline.birth_date.toordinal()
            prev = None
            for day in timeline.days:
                ordinal = day.date.toordinal()
                bag = hierarchy.bag_positions(day.codes)
                if bag.size == 0:
                    empty_bags += 1
                bag_chunks.append(bag)
                bag_offsets.append(bag_offsets[-1] + bag.size)
                cols = hierarchy.day_target_columns(day.codes)
                target_chunks.append(cols)
                target_offsets.append(target_offsets[-1] + cols.size)
                aux.append(day_aux(ordinal, birth, prev))
                dates.append(ordinal)
                prev = ordinal
            patient_slices.append((start, len(dates)))
            patient_ids.append(timeline.patient_id)
        self.bag_flat = np.concatenate(bag_chunks) if bag_chunks else np.empty(0, dtype=np.int64)
        self.bag_offsets = np.array(bag_offsets, dtype=np.int64)
        self.target_flat = (
            np.concatenate(target_chunks) if target_chunks else np.empty(0, dtype=np.int64)
        )
        self.target_offsets = np.array(target_offsets, dtype=np.int64)
        self.dates = np.array(dates, dtype=np.int64)
        self.aux_raw = np.array(aux, dtype=np.float64).reshape(len(dates), NUM_AUX)
        self.patient_slices = np.array(patient_slices, dtype=np.int64)
        self.patient_ids = tuple(patient_ids)
        self.patient_index = {pid: i for i, pid in enumerate(patient_ids)}
        if empty_bags:
            log.warning("dataset: %d days with no in-vocabulary codes get zero embeddings", empty_bags)

    def __len__(self):
        return len(self.patient_ids)

    def day_count(self, patient, cutoff_ordinal=None) -> int:
        start, end = self.patient_slices[patient]
        if cutoff_ordinal is None:
            return int(end - start)
        return int(np.searchsorted(self.dates[start:end], cutoff_ordinal, side="right"))

    def day_rows(self, patient, length):
        start, _ = self.patient_slices[patient]
        return np.arange(start, start + length)

    def targets_of(self, day_row) -> np.ndarray:
        return self.target_flat[self.target_offsets[day_row] : self.target_offsets[day_row + 1]]

    def aux_stats(self, day_rows):
        sample = self.aux_raw[day_rows]
        mean = sample.mean(axis=0)
        std = sample.std(axis=0)
        std[std <= 1e-12] = 1.0
        return mean, std


def assemble_batches(day_counts, batch_days):
    """Greedy packing: keep adding whole patients while the day total fits.

    A single patient longer than `batch_days` still forms its own batch.
    """
    batches, current, used = [], [], 0
    for idx, count in enumerate(day_counts):
        if current and used + count > batch_days:
            batches.append(current)
            current, used = [], 0
        current.append(idx)
        used += count
    if current:
        batches.append(current)
    return batches


def _embed_days(params, dataset, day_rows):
    """Mean of tied embedding rows per day plus standardized time features."""
    W = params.weights["W"]
    embed_size = W.shape[1]
    x = np.zeros((day_rows.size, embed_size + NUM_AUX))
    starts = dataset.bag_offsets[day_rows]
    ends = dataset.bag_offsets[day_rows + 1]
    lens = ends - starts
    nz = lens > 0
    if np.any(nz):
        flat = np.concatenate([dataset.bag_flat[s:e] for s, e in zip(starts[nz], ends[nz])])
        sums = np.add.reduceat(W[flat], np.concatenate([[0], np.cumsum(lens[nz])[:-1]]), axis=0)
        x[nz, :embed_size] = sums / lens[nz, None]
    x[:, embed_size:] = (dataset.aux_raw[day_rows] - params.aux_mean) / params.aux_std
    return x


def _backprop_bags(dataset, day_rows, d_embed, W_grad):
    starts = dataset.bag_offsets[day_rows]
    ends = dataset.bag_offsets[day_rows + 1]
    lens = ends - starts
    nz = np.nonzero(lens > 0)[0]
    if nz.size == 0:
        return
    flat = np.concatenate([dataset.bag_flat[starts[i] : ends[i]] for i in nz])
    rows = np.repeat(nz, lens[nz])
    np.add.at(W_grad, flat, d_embed[rows] / lens[rows][:, None])


class _BatchLayout:
    """Length-descending contiguous view of some patients' day prefixes."""

    def __init__(self, dataset, patients, lengths):
        order = sorted(range(len(patients)), key=lambda i: (-lengths[i], patients[i]))
        self.patients = [patients[i] for i in order]
        self.lengths = np.array([lengths[i] for i in order], dtype=np.int64)
        self.batch = RaggedBatch(self.lengths)
        self.day_rows = np.concatenate(
            [dataset.day_rows(p, l) for p, l in zip(self.patients, self.lengths)]
        )


def _forward_batch(params, dataset, layout, dropout_rng=None):
    """Embed, run the GRU, and produce per-day representations.

    Returns (reps, ctx) where ctx carries every intermediate the backward
    pass needs. Dropout is active only when a generator is supplied.
    """
    hp = params.hyperparams
    x = _embed_days(params, dataset, layout.day_rows)
    keep = 1.0 - hp.dropout
    ctx = {"x": x}
    if dropout_rng is not None and hp.dropout > 0:
        mask_in = (dropout_rng.random(x.shape) < keep) / keep
        x = x * mask_in
        ctx["mask_in"] = mask_in
        ctx["x"] = x
    h, cache = gru_forward(params.weights, x, layout.batch)
    g = gelu(h)
    if dropout_rng is not None and hp.dropout > 0:
        mask_mid = (dropout_rng.random(g.shape) < keep) / keep
        gd = g * mask_mid
        ctx["mask_mid"] = mask_mid
    else:
        gd = g
    reps = gd @ params.weights["W_proj"].T + params.weights["b_proj"]
    ctx.update(h=h, g=g, gd=gd, cache=cache)
    return reps, ctx


def _backward_batch(params, dataset, layout, ctx, d_reps):
    """Gradients of all weights given dLoss/dRep at every day row."""
    weights = params.weights
    grads = {name: np.zeros_like(w) for name, w in weights.items()}
    grads["W_proj"] += d_reps.T @ ctx["gd"]
    grads["b_proj"] += d_reps.sum(axis=0)
    dgd = d_reps @ weights["W_proj"]
    if "mask_mid" in ctx:
        dgd = dgd * ctx["mask_mid"]
    dh = dgd * gelu_grad(ctx["h"])
    dx, gru_grads = gru_backward(weights, ctx["x"], layout.batch, ctx["cache"], dh)
    for name in GATE_NAMES:
        grads[name] += gru_grads[name]
    if "mask_in" in ctx:
        dx = dx * ctx["mask_in"]
    embed_size = weights["W"].shape[1]
    _backprop_bags(dataset, layout.day_rows, dx[:, :embed_size], grads["W"])
    return grads


def _prediction_pairs(layout, dataset, window=None):
    """(rep row, target day row) pairs: day i-1's representation predicts day i.

    `window` is a half-open [lo, hi) ordinal pair restricting which target
    days are scored.
    """
    rep_rows, target_rows = [], []
    pos = 0
    for length in layout.lengths:
        rows = np.arange(pos, pos + length)
        rep_rows.append(rows[:-1])
        target_rows.append(rows[1:])
        pos += length
    rep_rows = np.concatenate(rep_rows)
    target_rows = np.concatenate(target_rows)
    day_rows = layout.day_rows[target_rows]
    if window is not None:
        lo, hi = window
        dates = dataset.dates[day_rows]
        keep = (dates >= lo) & (dates < hi)
        rep_rows, target_rows, day_rows = rep_rows[keep], target_rows[keep], day_rows[keep]
    return rep_rows, day_rows


def _doctorai_targets(dataset, day_rows, code_to_class_col):
    """Per-day class column arrays; days mapping to no class return empty."""
    out = []
    for row in day_rows:
        bag = dataset.bag_flat[dataset.bag_offsets[row] : dataset.bag_offsets[row + 1]]
        cols = sorted({code_to_class_col[b] for b in bag if b in code_to_class_col})
        out.append(np.array(cols, dtype=np.int64))
    return out


def doctorai_reduced_map(vocabulary, ontology: Ontology, coarse_depth=2) -> dict:
    """Map each vocabulary code to its reduced prediction class.

    Diagnoses map to their ancestor at `coarse_depth` levels below the family
    root (the 3-character level in ICD10-shaped trees); medications map to
    themselves when they are ontology leaves. Other families are dropped.
    """
    mapping = {}
    for code in vocabulary.codes:
        if code.family == "diagnosis":
            if code not in ontology.nodes:
                continue
            path = ontology.path_to_root(code)  # code .. root
            if len(path) - 1 <= coarse_depth:
                mapping[code] = code
            else:
                mapping[code] = path[len(path) - 1 - coarse_depth]
        elif code.family == "medication":
            if code in ontology.nodes and not ontology.children(code):
                mapping[code] = code
    return mapping


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def doctorai_loss(reps, weights, class_positions, class_columns,
                  multilabel="sum", with_grads=True):
    """Flat softmax over the reduced class space, scored against next-day classes.

    Multi-class days score as the sum of per-present-class cross-entropies
    under one softmax ("sum"), or as the multi-hot average ("average").
    """
    if multilabel not in ("sum", "average"):
        raise ConfigurationError(f"unknown multilabel mode {multilabel!r}")
    scored = [d for d, cols in enumerate(class_columns) if cols.size]
    if not scored:
        raise DataError("no target days map to any reduced class")
    reps_s = reps[scored]
    w_class = weights["W"][class_positions]
    logits = reps_s @ w_class.T
    probs = _softmax_rows(logits)
    n = len(scored)
    loss = 0.0
    dlogits = np.zeros_like(logits) if with_grads else None
    for i, d in enumerate(scored):
        cols = class_columns[d]
        m = cols.size
        logp = np.log(np.clip(probs[i, cols], 1e-300, None))
        scale = 1.0 if multilabel == "sum" else 1.0 / m
        loss += -logp.sum() * scale
        if with_grads:
            dlogits[i] = probs[i] * (m * scale)
            dlogits[i, cols] -= scale
    loss /= n
    if not with_grads:
        return loss, None, None, scored
    dlogits /= n
    d_reps_scored = dlogits @ w_class
    d_wclass = dlogits.T @ reps_s
    return loss, d_reps_scored, d_wclass, scored


def init_params(vocabulary, ontology, hp: ClmbrHyperparams, objective, rng,
                aux_mean=None, aux_std=None) -> LanguageModelParams:
    hierarchy = CodeHierarchy(vocabulary, ontology)
    weights = {"W": xavier_init((len(hierarchy), hp.embedding_size), rng)}
    weights.update(init_gru_params(hp.embedding_size + NUM_AUX, hp.gru_hidden, rng))
    bound = 1.0 / np.sqrt(hp.gru_hidden)
    weights["W_proj"] = rng.uniform(-bound, bound, size=(hp.embedding_size, hp.gru_hidden))
    weights["b_proj"] = rng.uniform(-bound, bound, size=hp.embedding_size)
    class_positions = None
    if objective == "doctorai":
        mapping = doctorai_reduced_map(vocabulary, ontology)
        classes = sorted(set(mapping.values()))
        class_positions = np.array([hierarchy.node_pos[c] for c in classes], dtype=np.int64)
    elif objective != "clmbr":
        raise ConfigurationError(f"unknown objective {objective!r}")
    return LanguageModelParams(
        hyperparams=hp,
        objective=objective,
        hierarchy=hierarchy,
        weights=weights,
        aux_mean=np.zeros(NUM_AUX) if aux_mean is None else aux_mean,
        aux_std=np.ones(NUM_AUX) if aux_std is None else aux_std,
        class_positions=class_positions,
        vocab_hash=vocabulary_hash(vocabulary),
    )


def _batch_loss_and_grads(params, dataset, layout, window, dropout_rng, code_class_map):
    reps, ctx = _forward_batch(params, dataset, layout, dropout_rng)
    rep_rows, day_rows = _prediction_pairs(layout, dataset, window)
    if rep_rows.size == 0:
        return None
    reps_sel = reps[rep_rows]
    if params.objective == "clmbr":
        positives = [dataset.targets_of(r) for r in day_rows]
        loss, d_sel, d_w = binary_relevance_loss(
            reps_sel, params.weights["W"], params.hierarchy, positives
        )
        n_scored = len(day_rows)
        d_reps = np.zeros_like(reps)
        np.add.at(d_reps, rep_rows, d_sel)
        grads = _backward_batch(params, dataset, layout, ctx, d_reps)
        grads["W"] += d_w
    else:
        class_cols = _doctorai_targets(dataset, day_rows, code_class_map)
        loss, d_sel_scored, d_wclass, scored = doctorai_loss(
            reps_sel, params.weights, params.class_positions, class_cols
        )
        n_scored = len(scored)
        d_reps = np.zeros_like(reps)
        np.add.at(d_reps, rep_rows[scored], d_sel_scored)
        grads = _backward_batch(params, dataset, layout, ctx, d_reps)
        np.add.at(grads["W"], params.class_positions, d_wclass)
    return loss, n_scored, grads


def _batch_loss_only(params, dataset, layout, window, code_class_map):
    reps, _ = _forward_batch(params, dataset, layout, dropout_rng=None)
    rep_rows, day_rows = _prediction_pairs(layout, dataset, window)
    if rep_rows.size == 0:
        return None
    reps_sel = reps[rep_rows]
    if params.objective == "clmbr":
        positives = [dataset.targets_of(r) for r in day_rows]
        loss, _, _ = binary_relevance_loss(
            reps_sel, params.weights["W"], params.hierarchy, positives, with_grads=False
        )
        return loss, len(day_rows)
    class_cols = _doctorai_targets(dataset, day_rows, code_class_map)
    loss, _, _, scored = doctorai_loss(
        reps_sel, params.weights, params.class_positions, class_cols, with_grads=False
    )
    return loss, len(scored)


def evaluate_lm_loss(params, dataset, patients=None, cutoff=None, window=None):
    """Mean per-target-day loss with dropout off.

    `cutoff` truncates timelines (inclusive); `window` is a half-open
    [start, end) date pair restricting which target days are scored.
    """
    code_class_map = _class_map(params)
    cutoff_ord = cutoff.toordinal() if cutoff is not None else None
    win = (window[0].toordinal(), window[1].toordinal()) if window is not None else None
    if patients is None:
        patients = range(len(dataset))
    lengths = {p: dataset.day_count(p, cutoff_ord) for p in patients}
    usable = [p for p, n in lengths.items() if n >= 2]
    total, count = 0.0, 0
    for chunk in assemble_batches([lengths[p] for p in usable], params.hyperparams.batch_days):
        members = [usable[i] for i in chunk]
        layout = _BatchLayout(dataset, members, [lengths[p] for p in members])
        out = _batch_loss_only(params, dataset, layout, win, code_class_map)
        if out is not None:
            loss, n = out
            total += loss * n
            count += n
    if count == 0:
        raise DataError("no target days to evaluate")
    return total / count


def _class_map(params):
    """Input-bag node -> reduced class column. Classes must be hierarchy
    ancestors-or-self of the codes they cover; codes reaching no class drop
    out of the target space."""
    if params.objective != "doctorai":
        return None
    pos_set = {int(p): i for i, p in enumerate(params.class_positions)}
    mapping = {}
    hierarchy = params.hierarchy
    for code in hierarchy.vocabulary.codes:
        node = hierarchy.node_pos[code]
        cur = node
        while cur >= 0:
            if cur in pos_set:
                mapping[node] = pos_set[cur]
                break
            cur = int(hierarchy.parent_pos[cur])
    return mapping


def train_language_model(corpus, hp: ClmbrHyperparams, objective, rng,
                         vocabulary, ontology, dataset=None,
                         fit_through=None, dev_window=None):
    """Fit the language model; returns (params, per-epoch loss trace).

    `fit_through` truncates every timeline at a date, inclusive (the recipe
    trains through one window and evaluates dev loss on the next);
    `dev_window` is a half-open [start, end) date pair scored with dropout
    off. The returned params are from the best dev-loss epoch when a dev
    window is given, else from the final epoch.
    """
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty corpus")
    params = init_params(vocabulary, ontology, hp, objective, rng)
    if dataset is None:
        dataset = TimelineDataset(corpus, params.hierarchy)
    cutoff_ord = fit_through.toordinal() if fit_through is not None else None
    lengths = np.array([dataset.day_count(p, cutoff_ord) for p in range(len(dataset))])
    trainable = np.nonzero(lengths >= 2)[0]
    if trainable.size == 0:
        raise DataError("no patient has two or more days to fit")
    row_chunks = [dataset.day_rows(p, lengths[p]) for p in trainable]
    params.aux_mean, params.aux_std = dataset.aux_stats(np.concatenate(row_chunks))

    steps_per_epoch = max(len(assemble_batches(lengths[trainable], hp.batch_days)), 1)
    total_steps = hp.epochs * steps_per_epoch
    warmup = WARMUP_EPOCHS * steps_per_epoch
    if warmup >= total_steps:
        warmup = max(total_steps - 1, 0)
    state = AdamState(weight_decay=hp.l2)
    code_class_map = _class_map(params)

    trace = []
    best = {"dev_loss": np.inf, "weights": None, "epoch": None}
    snapshot = {k: v.copy() for k, v in params.weights.items()}
    step = 0
    for epoch in range(hp.epochs):
        order = trainable[rng.permutation(trainable.size)]
        epoch_loss, epoch_count = 0.0, 0
        for chunk in assemble_batches(lengths[order], hp.batch_days):
            members = [int(order[i]) for i in chunk]
            layout = _BatchLayout(dataset, members, [int(lengths[p]) for p in members])
            # truncation already limits target days to the fit window
            out = _batch_loss_and_grads(
                params, dataset, layout, None, rng, code_class_map
            )
            if out is None:
                continue
            loss, n_scored, grads = out
            if not np.isfinite(loss):
                params.weights = snapshot
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}", snapshot
                )
            lr = lr_schedule(min(step, total_steps), total_steps, warmup, hp.lr)
            adam_update(params.weights, grads, state, lr)
            epoch_loss += loss * n_scored
            epoch_count += n_scored
            step += 1
        snapshot = {k: v.copy() for k, v in params.weights.items()}
        row = {"epoch": epoch, "train_loss": epoch_loss / max(epoch_count, 1)}
        if dev_window is not None:
            row["dev_loss"] = evaluate_lm_loss(
                params,
                dataset,
                cutoff=dev_window[1] - timedelta(days=1),
                window=dev_window,
            )
            if row["dev_loss"] < best["dev_loss"]:
                best = {"dev_loss": row["dev_loss"], "weights": snapshot, "epoch": epoch}
        trace.append(row)
        log.info("lm epoch %d: %s", epoch, row)
    if dev_window is not None and best["weights"] is not None:
        params.weights = best["weights"]
        trace.append({"selected_epoch": best["epoch"], "dev_loss": best["dev_loss"]})
    return params, trace


def marginal_baseline_dev_loss(dataset, params_or_hierarchy, fit_through, dev_window,
                               smoothing=0.5):
    """Dev loss of per-code base rates estimated on the training window.

    The baseline predicts each code's training-window day frequency
    regardless of history; it is the floor any sequence model must beat.
    `dev_window` is half-open [start, end).
    """
    hierarchy = getattr(params_or_hierarchy, "hierarchy", params_or_hierarchy)
    cutoff = fit_through.toordinal()
    lo, hi = dev_window[0].toordinal(), dev_window[1].toordinal()
    n_pred = hierarchy.num_predictable
    counts = np.zeros(n_pred)
    n_train_days = 0
    dev_rows = []
    for p in range(len(dataset)):
        start, end = dataset.patient_slices[p]
        for row in range(start, end):
            date = dataset.dates[row]
            is_first = row == start
            if date <= cutoff:
                # first days are input-only in the objective, match that here
                if not is_first:
                    counts[dataset.targets_of(row)] += 1
                    n_train_days += 1
            elif lo <= date < hi and not is_first:
                dev_rows.append(row)
    if n_train_days == 0 or not dev_rows:
        raise DataError("not enough days to fit the marginal baseline")
    p = (counts + smoothing) / (n_train_days + 2.0 * smoothing)
    log_p = np.log(p)
    log_1mp = np.log1p(-p)
    base = -log_1mp.sum()
    total = 0.0
    for row in dev_rows:
        cols = dataset.targets_of(row)
        total += base + (-log_p[cols] + log_1mp[cols]).sum()
    return total / len(dev_rows)


def embed_day(day: DayInput, params: LanguageModelParams) -> np.ndarray:
    """Mean embedding of the day's codes, concatenated with standardized aux."""
    W = params.weights["W"]
    positions = [
        params.hierarchy.node_pos[c] for c in sorted(day.codes)
        if c in params.hierarchy.node_pos
    ]
    embed = W[positions].mean(axis=0) if positions else np.zeros(params.embedding_size)
    if not positions:
        log.debug("embed_day: no in-vocabulary codes, zero embedding")
    aux = (np.asarray(day.aux, dtype=np.float64) - params.aux_mean) / params.aux_std
    return np.concatenate([embed, aux])


def _timeline_layout(params, timeline, through=None):
    hierarchy = params.hierarchy
    dataset = TimelineDataset([timeline], hierarchy)
    cutoff = through.toordinal() if through is not None else None
    length = dataset.day_count(0, cutoff)
    if length == 0:
        raise DataError(
            f"patient {timeline.patient_id} has no days at or before the prediction time"
        )
    return dataset, _BatchLayout(dataset, [0], [length])


def forward_timeline(timeline, params: LanguageModelParams) -> np.ndarray:
    """Per-day representations, dropout off; row i depends only on days <= i."""
    dataset, layout = _timeline_layout(params, timeline)
    reps, _ = _forward_batch(params, dataset, layout, dropout_rng=None)
    return reps


def extract_representation(timeline, prediction_time, params) -> np.ndarray:
    """Representation of the last day at or before the prediction time."""
    dataset, layout = _timeline_layout(params, timeline, through=prediction_time)
    reps, _ = _forward_batch(params, dataset, layout, dropout_rng=None)
    return reps[-1]


def representations_for_examples(corpus_by_id, examples, params,
                                 batch_days=4000) -> np.ndarray:
    """Matrix of representations, one row per example, grouped by patient."""
    needed = {}
    for ex in examples:
        when = ex.prediction_time.toordinal()
        needed[ex.patient_id] = max(needed.get(ex.patient_id, 0), when)
    pids = sorted(needed)
    dataset = TimelineDataset([corpus_by_id[pid] for pid in pids], params.hierarchy)
    lengths = {}
    for i, pid in enumerate(pids):
        lengths[i] = dataset.day_count(i, needed[pid])
        if lengths[i] == 0:
            raise DataError(f"patient {pid} has no history before its first example")
    reps_by_patient = {}
    idxs = list(range(len(pids)))
    for chunk in assemble_batches([lengths[i] for i in idxs], batch_days):
        members = [idxs[i] for i in chunk]
        layout = _BatchLayout(dataset, members, [lengths[p] for p in members])
        reps, _ = _forward_batch(params, dataset, layout, dropout_rng=None)
        pos = 0
        for p, length in zip(layout.patients, layout.lengths):
            reps_by_patient[pids[p]] = (
                reps[pos : pos + length],
                dataset.dates[dataset.day_rows(p, length)],
            )
            pos += length
    out = np.zeros((len(examples), params.embedding_size))
    for i, ex in enumerate(examples):
        reps, dates = reps_by_patient[ex.patient_id]
        k = int(np.searchsorted(dates, ex.prediction_time.toordinal(), side="right")) - 1
        if k < 0:
            raise DataError(f"patient {ex.patient_id}: no day at or before {ex.prediction_time}")
        out[i] = reps[k]
    return out


def lm_loss_binary_relevance(timelines, params) -> float:
    """Mean next-day binary-relevance loss over a batch of timelines."""
    dataset = TimelineDataset(list(timelines), params.hierarchy)
    return evaluate_lm_loss(params, dataset)


def lm_loss_doctorai(timelines, params, reduced_map=None) -> float:
    """Mean next-day reduced-softmax loss over a batch of timelines.

    `reduced_map` (code -> coarse class code) overrides the class space the
    params were trained with; by default the trained one is used.
    """
    if params.objective != "doctorai":
        raise ConfigurationError("params were not trained with the doctorai objective")
    if reduced_map is not None:
        classes = sorted(set(reduced_map.values()))
        missing = [c for c in classes if c not in params.hierarchy.node_pos]
        if missing:
            raise ConfigurationError(f"classes not in the hierarchy: {missing[:3]}")
        params = LanguageModelParams(
            hyperparams=params.hyperparams,
            objective="doctorai",
            hierarchy=params.hierarchy,
            weights=params.weights,
            aux_mean=params.aux_mean,
            aux_std=params.aux_std,
            class_positions=np.array(
                [params.hierarchy.node_pos[c] for c in classes], dtype=np.int64
            ),
            vocab_hash=params.vocab_hash,
        )
    dataset = TimelineDataset(list(timelines), params.hierarchy)
    return evaluate_lm_loss(params, dataset)


def code_probability(rep, code, params) -> float:
    """Probability of one code under the hierarchical sigmoid."""
    return hierarchical_code_prob(rep, code, params.weights["W"], params.hierarchy)


_MAGIC = b"CLMB"
_VERSION = 1
_TENSOR_ORDER = ("W", *GATE_NAMES, "W_proj", "b_proj")


def save_checkpoint(path, params: LanguageModelParams) -> None:
    """Versioned binary blob: JSON header, then tensors in declared order."""
    header = {
        "version": _VERSION,
        "hyperparams": {
            "embedding_size": params.hyperparams.embedding_size,
            "gru_hidden": params.hyperparams.gru_hidden,
            "lr": params.hyperparams.lr,
            "l2": params.hyperparams.l2,
            "dropout": params.hyperparams.dropout,
            "epochs": params.hyperparams.epochs,
            "batch_days": params.hyperparams.batch_days,
        },
        "objective": params.objective,
        "vocab_hash": params.vocab_hash,
        "nodes": [str(n) for n in params.hierarchy.nodes],
        "parent_pos": params.hierarchy.parent_pos.tolist(),
        "vocab": [str(c) for c in params.hierarchy.vocabulary.codes],
        "aux_mean": params.aux_mean.tolist(),
        "aux_std": params.aux_std.tolist(),
        "class_positions": (
            params.class_positions.tolist() if params.class_positions is not None else None
        ),
        "tensors": [[name, list(params.weights[name].shape)] for name in _TENSOR_ORDER],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in _TENSOR_ORDER:
            fh.write(np.ascontiguousarray(params.weights[name], dtype=np.float64).tobytes())


def load_checkpoint(path) -> LanguageModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a language model checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size).decode("utf-8"))
        if header["version"] != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header['version']}")
        weights = {}
        for name, shape in header["tensors"]:
            n = int(np.prod(shape))
            weights[name] = np.frombuffer(fh.read(8 * n), dtype=np.float64).reshape(shape).copy()
    vocabulary = CodeVocabulary([CodeId.parse(c) for c in header["vocab"]])
    hierarchy = CodeHierarchy.from_arrays(
        [CodeId.parse(n) for n in header["nodes"]],
        np.array(header["parent_pos"], dtype=np.int64),
        vocabulary,
    )
    class_positions = header["class_positions"]
    return LanguageModelParams(
        hyperparams=ClmbrHyperparams(**header["hyperparams"]),
        objective=header["objective"],
        hierarchy=hierarchy,
        weights=weights,
        aux_mean=np.array(header["aux_mean"]),
        aux_std=np.array(header["aux_std"]),
        class_positions=(
            np.array(class_positions, dtype=np.int64) if class_positions is not None else None
        ),
        vocab_hash=header["vocab_hash"],
    )
