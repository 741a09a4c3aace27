"""Gradient boosted trees on logistic loss with leaf-wise histogram growth.

Boosting is plain Newton boosting: per round, fit one regression tree to the
gradient/hessian of the logistic loss, always splitting the current leaf with
the best gain until the leaf cap. Candidate thresholds come from per-feature
equal-frequency bins (at most 255 cuts); histograms are built over binned
values, with the sibling obtained by subtraction, and sparse inputs
accumulate over stored entries only with a closed-form zero-bin correction.

No randomness anywhere: fits are bit-deterministic, and split ties resolve to
the lowest feature index, then the lowest bin.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from clmbench.errors import ConfigurationError, DataError
from clmbench.numerics import sigmoid

log = logging.getLogger(__name__)

GBT_LEARNING_RATE_GRID = (0.02, 0.1, 0.5)
GBT_NUM_LEAVES_GRID = (10, 25, 100)
MAX_TREES = 500
EARLY_STOP_PATIENCE = 10
MAX_BINS = 255
_MIN_SAMPLES_LEAF = 20
_MIN_CHILD_HESS = 1e-3
_LAMBDA = 1e-3
_MIN_GAIN = 1e-12


@dataclass
class Tree:
    """Flattened binary tree; leaves have feature == -1."""

    feature: np.ndarray
    threshold: np.ndarray  # raw-value threshold: go left when value <= threshold
    bin_threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def num_leaves(self):
        return int(np.sum(self.feature < 0))


@dataclass
class BoostedTreesModel:
    base_score: float
    learning_rate: float
    num_leaves: int
    trees: list = field(default_factory=list)
    best_round: int = 0

    def __post_init__(self):
        if len(self.trees) > MAX_TREES:
            raise ConfigurationError(f"tree count exceeds the {MAX_TREES} cap")
        for tree in self.trees:
            if tree.num_leaves() > self.num_leaves:
                raise ConfigurationError("a tree exceeds its leaf cap")

    def decision_function(self, X) -> np.ndarray:
        cols = _ColumnAccess(X)
        margin = np.full(cols.n_rows, self.base_score)
        for tree in self.trees:
            margin += self.learning_rate * _tree_predict(tree, cols)
        return margin

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))


class _ColumnAccess:
    """Uniform dense column extraction for ndarray or CSR input."""

    def __init__(self, X):
        if sparse.issparse(X):
            self.csc = sparse.csc_matrix(X)
            self.dense = None
            self.n_rows = X.shape[0]
        else:
            self.dense = np.asarray(X, dtype=np.float64)
            self.csc = None
            self.n_rows = self.dense.shape[0]

    def column(self, f) -> np.ndarray:
        if self.dense is not None:
            return self.dense[:, f]
        out = np.zeros(self.n_rows)
        sl = slice(self.csc.indptr[f], self.csc.indptr[f + 1])
        out[self.csc.indices[sl]] = self.csc.data[sl]
        return out


def _tree_predict(tree, cols: _ColumnAccess) -> np.ndarray:
    out = np.zeros(cols.n_rows)
    stack = [(0, np.arange(cols.n_rows))]
    while stack:
        node, rows = stack.pop()
        if tree.feature[node] < 0:
            out[rows] = tree.value[node]
            continue
        values = cols.column(tree.feature[node])[rows]
        go_left = values <= tree.threshold[node]
        stack.append((tree.left[node], rows[go_left]))
        stack.append((tree.right[node], rows[~go_left]))
    return out


class _Binned:
    """Equal-frequency binning plus histogram construction.

    Sparse inputs must be nonnegative: implicit zeros share bin 0 with an
    explicit cut at 0 so they never mix with stored values.
    """

    def __init__(self, X, max_bins=MAX_BINS):
        self.is_sparse = sparse.issparse(X)
        self.n_rows, self.n_features = X.shape
        self.cuts = []
        if self.is_sparse:
            csr = sparse.csr_matrix(X)
            if csr.nnz and csr.data.min() < 0:
                raise ConfigurationError("sparse features must be nonnegative for binning")
            csc = sparse.csc_matrix(csr)
            for f in range(self.n_features):
                data = csc.data[csc.indptr[f] : csc.indptr[f + 1]]
                self.cuts.append(_make_cuts(data, max_bins, include_zero=True))
            self.max_bin = max((len(c) for c in self.cuts), default=0)
            csc_bins = np.zeros(csc.nnz, dtype=np.int32)
            for f in range(self.n_features):
                sl = slice(csc.indptr[f], csc.indptr[f + 1])
                csc_bins[sl] = np.searchsorted(self.cuts[f], csc.data[sl], side="left")
            # carry bins back into CSR entry order: convert a position matrix
            # through the same CSR -> CSC permutation
            pos_csc = sparse.csr_matrix(
                (np.arange(csr.nnz, dtype=np.int64), csr.indices, csr.indptr), shape=csr.shape
            ).tocsc()
            bin_data = np.zeros(csr.nnz, dtype=np.int32)
            bin_data[pos_csc.data] = csc_bins
            self.indptr = csr.indptr.astype(np.int64)
            self.indices = csr.indices.astype(np.int64)
            self.bins = bin_data
        else:
            dense = np.asarray(X, dtype=np.float64)
            for f in range(self.n_features):
                col = dense[:, f]
                # nonnegative columns with exact zeros bin like sparse input,
                # so the two storage layouts grow identical trees
                if col.size and col.min() >= 0 and np.any(col == 0):
                    self.cuts.append(_make_cuts(col[col > 0], max_bins, include_zero=True))
                else:
                    self.cuts.append(_make_cuts(col, max_bins, include_zero=False))
            self.max_bin = max((len(c) for c in self.cuts), default=0)
            self.dense_bins = np.empty((self.n_rows, self.n_features), dtype=np.int32)
            for f in range(self.n_features):
                self.dense_bins[:, f] = np.searchsorted(self.cuts[f], dense[:, f], side="left")
        self.n_bins = self.max_bin + 1

    def node_entries(self, rows):
        """Flat (entry row, column, bin) arrays for the rows of one node."""
        starts = self.indptr[rows]
        lens = (self.indptr[rows + 1] - starts).astype(np.int64)
        total = int(lens.sum())
        if total == 0:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty, empty
        shift = np.repeat(np.cumsum(lens) - lens, lens)
        pos = np.repeat(starts, lens) + (np.arange(total) - shift)
        return np.repeat(rows, lens), self.indices[pos], self.bins[pos]

    def histogram_from_entries(self, rows, entries, g, h):
        """Stacked (3, features, bins) grad/hess/count histograms."""
        F, B = self.n_features, self.n_bins
        e_rows, e_cols, e_bins = entries
        keys = e_cols * B + e_bins
        hist = np.empty((3, F, B))
        hist[0] = np.bincount(keys, weights=g[e_rows], minlength=F * B).reshape(F, B)
        hist[1] = np.bincount(keys, weights=h[e_rows], minlength=F * B).reshape(F, B)
        hist[2] = np.bincount(keys, minlength=F * B).reshape(F, B)
        # implicit zeros: whatever mass is missing per feature sits in bin 0
        hist[0, :, 0] += g[rows].sum() - hist[0].sum(axis=1)
        hist[1, :, 0] += h[rows].sum() - hist[1].sum(axis=1)
        hist[2, :, 0] += rows.size - hist[2].sum(axis=1)
        return hist

    def histogram(self, rows, g, h):
        """Stacked (3, features, bins) grad/hess/count histograms."""
        F, B = self.n_features, self.n_bins
        if self.is_sparse:
            return self.histogram_from_entries(rows, self.node_entries(rows), g, h)
        bins = self.dense_bins[rows]
        g_rows, h_rows = g[rows], h[rows]
        hist = np.empty((3, F, B))
        for f in range(F):
            bf = bins[:, f]
            hist[0, f] = np.bincount(bf, weights=g_rows, minlength=B)
            hist[1, f] = np.bincount(bf, weights=h_rows, minlength=B)
            hist[2, f] = np.bincount(bf, minlength=B)
        return hist

    def feature_bins_from_entries(self, rows, entries, f):
        """Bin of feature f per row, using the node's entry arrays."""
        if not self.is_sparse:
            return self.dense_bins[rows, f]
        out = np.zeros(rows.size, dtype=np.int32)
        e_rows, e_cols, e_bins = entries
        mask = e_cols == f
        if np.any(mask):
            out[np.searchsorted(rows, e_rows[mask])] = e_bins[mask]
        return out

    def feature_bins(self, rows, f):
        """Bin of feature f for each given row; rows must be ascending."""
        if not self.is_sparse:
            return self.dense_bins[rows, f]
        return self.feature_bins_from_entries(rows, self.node_entries(rows), f)


def _make_cuts(values, max_bins, include_zero):
    # equal-frequency cuts at actual data values (lower order statistics);
    # interpolated quantiles would invent useless in-between thresholds.
    # a cut at or above the max splits nothing, so only keep cuts below it
    values = np.asarray(values, dtype=np.float64)
    cuts = {0.0} if include_zero else set()
    if values.size:
        qs = np.quantile(values, np.linspace(0, 1, max_bins)[1:-1], method="lower")
        vmax = float(values.max())
        cuts.update(float(q) for q in qs if q < vmax)
        cuts = {c for c in cuts if c < vmax} or {0.0}
    out = np.array(sorted(cuts))
    return out[:max_bins]


class _LeafCandidate:
    __slots__ = ("node", "rows", "entries", "hists", "gain", "feature", "bin")

    def __init__(self, node, rows, entries, hists, gain, feature, bin_):
        self.node = node
        self.rows = rows
        self.entries = entries  # sparse path only: (rows, cols, bins) flat arrays
        self.hists = hists
        self.gain = gain
        self.feature = feature
        self.bin = bin_


def _best_split(hist):
    """Max-gain (feature, bin) under leaf-size and hessian floors."""
    cum = np.cumsum(hist, axis=2)
    gl, hl, cl = cum[0, :, :-1], cum[1, :, :-1], cum[2, :, :-1]
    g_tot = cum[0, :, -1:]
    h_tot = cum[1, :, -1:]
    c_tot = cum[2, :, -1:]
    gr, hr, cr = g_tot - gl, h_tot - hl, c_tot - cl
    gain = (
        gl**2 / (hl + _LAMBDA)
        + gr**2 / (hr + _LAMBDA)
        - g_tot**2 / (h_tot + _LAMBDA)
    ) * 0.5
    ok = (
        (cl >= _MIN_SAMPLES_LEAF)
        & (cr >= _MIN_SAMPLES_LEAF)
        & (hl >= _MIN_CHILD_HESS)
        & (hr >= _MIN_CHILD_HESS)
    )
    gain = np.where(ok, gain, -np.inf)
    flat = int(np.argmax(gain))  # first max: lowest feature, then lowest bin
    f, b = divmod(flat, gain.shape[1])
    return float(gain[f, b]), f, b


def _fit_tree(binned, rows, g, h, num_leaves):
    """Grow one tree leaf-wise. Returns (Tree, margin updates per train row)."""
    feature, threshold, bin_thr = [], [], []
    left, right, value = [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        bin_thr.append(0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    root_entries = binned.node_entries(rows) if binned.is_sparse else None
    if binned.is_sparse:
        hists = binned.histogram_from_entries(rows, root_entries, g, h)
    else:
        hists = binned.histogram(rows, g, h)
    gain, f, b = _best_split(hists)
    candidates = [_LeafCandidate(root, rows, root_entries, hists, gain, f, b)]
    n_leaves = 1
    leaf_rows = {root: rows}
    while n_leaves < num_leaves and candidates:
        best = max(candidates, key=lambda c: (c.gain, -c.node))
        if best.gain <= _MIN_GAIN or not np.isfinite(best.gain):
            break
        candidates.remove(best)
        f, b = best.feature, best.bin
        if binned.is_sparse:
            bins_f = binned.feature_bins_from_entries(best.rows, best.entries, f)
        else:
            bins_f = binned.feature_bins(best.rows, f)
        go_left = bins_f <= b
        rows_l, rows_r = best.rows[go_left], best.rows[~go_left]
        node_l, node_r = new_node(), new_node()
        feature[best.node] = f
        bin_thr[best.node] = b
        threshold[best.node] = float(binned.cuts[f][b])
        left[best.node], right[best.node] = node_l, node_r
        leaf_rows.pop(best.node, None)
        # split the parent's entry arrays once, build the smaller child's
        # histogram, and subtract for the larger
        if binned.is_sparse:
            side = np.zeros(binned.n_rows, dtype=bool)
            side[rows_l] = True
            e_left = side[best.entries[0]]
            entries_l = tuple(arr[e_left] for arr in best.entries)
            entries_r = tuple(arr[~e_left] for arr in best.entries)
        else:
            entries_l = entries_r = None
        if rows_l.size <= rows_r.size:
            small = (node_l, rows_l, entries_l)
            big = (node_r, rows_r, entries_r)
        else:
            small = (node_r, rows_r, entries_r)
            big = (node_l, rows_l, entries_l)
        if binned.is_sparse:
            hist_small = binned.histogram_from_entries(small[1], small[2], g, h)
        else:
            hist_small = binned.histogram(small[1], g, h)
        hist_big = best.hists - hist_small
        for (node, node_rows, node_entries), hists in ((small, hist_small), (big, hist_big)):
            leaf_rows[node] = node_rows
            gain, ff, bb = _best_split(hists)
            candidates.append(
                _LeafCandidate(node, node_rows, node_entries, hists, gain, ff, bb)
            )
        n_leaves += 1

    margin_update = np.zeros(binned.n_rows)
    for node, node_rows in leaf_rows.items():
        g_sum = g[node_rows].sum()
        h_sum = h[node_rows].sum()
        value[node] = float(-g_sum / (h_sum + _LAMBDA))
        margin_update[node_rows] = value[node]
    return (
        Tree(
            feature=np.array(feature, dtype=np.int64),
            threshold=np.array(threshold),
            bin_threshold=np.array(bin_thr, dtype=np.int64),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            value=np.array(value),
        ),
        margin_update,
    )


def _logloss(y, margin):
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def fit_gbt(X, y, learning_rate, num_leaves, X_dev=None, y_dev=None,
            max_trees=MAX_TREES, patience=EARLY_STOP_PATIENCE,
            fixed_rounds=None) -> BoostedTreesModel:
    """Newton boosting with dev-loss early stopping.

    Stops when the dev loss has not improved for `patience` rounds or at the
    tree cap, then keeps the prefix of trees that minimized dev loss. With
    `fixed_rounds` set (the retraining path, where the round count was chosen
    on an earlier dev set) no dev set is needed and exactly that many rounds
    are grown. With no usable split at all, returns the intercept-only model
    with a warning.
    """
    if learning_rate <= 0:
        raise ConfigurationError("learning_rate must be positive")
    if num_leaves < 2:
        raise ConfigurationError("num_leaves must be at least 2")
    y = np.asarray(y, dtype=np.float64)
    if fixed_rounds is None:
        if X_dev is None or y_dev is None or np.asarray(y_dev).size == 0:
            raise DataError("dev set must be non-empty for early stopping")
        y_dev = np.asarray(y_dev, dtype=np.float64)
        dev_cols = _ColumnAccess(X_dev)
        rounds_cap = max_trees
    else:
        if not 0 <= fixed_rounds <= MAX_TREES:
            raise ConfigurationError(f"fixed_rounds must be in [0, {MAX_TREES}]")
        dev_cols = None
        rounds_cap = fixed_rounds
    classes = np.unique(y)
    if classes.size < 2 or not set(classes) <= {0.0, 1.0}:
        raise DataError("labels must be binary with both classes present")
    binned = _Binned(X)
    mean = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = float(np.log(mean / (1.0 - mean)))
    model = BoostedTreesModel(base_score=base, learning_rate=learning_rate, num_leaves=num_leaves)
    margin = np.full(y.size, base)
    dev_margin = np.full(len(y_dev), base) if dev_cols is not None else None
    rows = np.arange(y.size)
    best_loss, best_round, since_best = np.inf, 0, 0
    train_curve = []
    for round_idx in range(rounds_cap):
        p = sigmoid(margin)
        g = p - y
        h = np.maximum(p * (1.0 - p), 1e-12)
        tree, update = _fit_tree(binned, rows, g, h, num_leaves)
        if tree.num_leaves() < 2:
            if round_idx == 0:
                log.warning("fit_gbt: no usable split, returning intercept-only model")
            break
        model.trees.append(tree)
        margin += learning_rate * update
        train_curve.append(_logloss(y, margin))
        if dev_cols is None:
            best_round = round_idx + 1
            continue
        dev_margin += learning_rate * _tree_predict(tree, dev_cols)
        dev_loss = _logloss(y_dev, dev_margin)
        if dev_loss < best_loss - 1e-12:
            best_loss, best_round, since_best = dev_loss, round_idx + 1, 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    model.trees = model.trees[:best_round]
    model.best_round = best_round
    model.train_curve = train_curve[:best_round]
    return model
