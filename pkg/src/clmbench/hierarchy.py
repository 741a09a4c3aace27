"""Hierarchical sigmoid over the code ontology.

A code's probability given a patient representation is the product of
per-node sigmoid factors sigma(rep . W_node) along the unique tree path from
just below the family root down to the code. Family roots never contribute a
factor, so a depth-1 ontology degenerates to the flat per-code sigmoid
exactly.

Targets follow activation semantics: a node is active on a day when any of
the day's observed codes is a descendant-or-self of it, which is what makes
the path product a coherent chain of conditionals.

The loss over the whole vocabulary is computed with two linear passes over
the tree: path log-probabilities accumulate root-to-leaf, and the gradients
of all per-code terms aggregate back leaf-to-root.
"""

import logging

import numpy as np

from clmbench.ehr import CodeId, CodeVocabulary, Ontology
from clmbench.errors import ConfigurationError, DataError
from clmbench.numerics import log_sigmoid, sigmoid

log = logging.getLogger(__name__)

_CLAMP = 1e-12
_LOG_CLAMP = np.log(_CLAMP)  # lower bound on a path log-probability
_LOG1M_CLAMP = np.log1p(-_CLAMP)  # upper bound, keeps 1-p away from 0


class CodeHierarchy:
    """Array form of the ontology restricted to the vocabulary's root paths.

    Nodes are ordered parents-before-children. Vocabulary codes missing from
    the ontology are attached directly under their family root, which gives
    them flat (single-factor) probabilities.
    """

    def __init__(self, vocabulary: CodeVocabulary, ontology: Ontology):
        parent_of = {}
        roots = {}
        missing = 0
        for family, root in ontology.roots.items():
            roots[family] = root
        for code in vocabulary.codes:
            if ontology.is_root(code):
                raise DataError(f"vocabulary code {code} is an ontology family root")
            if code in ontology.nodes:
                node = code
                while node in ontology.parent:
                    parent_of[node] = ontology.parent[node]
                    node = ontology.parent[node]
            else:
                missing += 1
                root = roots.setdefault(code.family, CodeId(code.family, "~root"))
                parent_of[code] = root
        if missing:
            log.info("hierarchy: %d vocabulary codes attached directly under family roots", missing)

        nodes = set(parent_of) | set(parent_of.values())
        depth = {}

        def depth_of(node):
            if node not in depth:
                depth[node] = 0 if node not in parent_of else depth_of(parent_of[node]) + 1
            return depth[node]

        ordered = sorted(nodes, key=lambda n: (depth_of(n), n))
        parent_pos_list = []
        pos = {n: i for i, n in enumerate(ordered)}
        for n in ordered:
            parent_pos_list.append(pos[parent_of[n]] if n in parent_of else -1)
        self._finalize(tuple(ordered), np.array(parent_pos_list, dtype=np.int64), vocabulary)

    @classmethod
    def from_arrays(cls, nodes, parent_pos, vocabulary) -> "CodeHierarchy":
        """Rebuild from serialized node order and parent positions."""
        self = cls.__new__(cls)
        self._finalize(tuple(nodes), np.asarray(parent_pos, dtype=np.int64), vocabulary)
        return self

    def _finalize(self, nodes, parent_pos, vocabulary):
        if np.any(parent_pos >= np.arange(len(nodes))):
            raise DataError("hierarchy nodes must be ordered parents before children")
        self.nodes = nodes
        self.node_pos = {n: i for i, n in enumerate(nodes)}
        self.parent_pos = parent_pos
        self.vocabulary = vocabulary
        self.pred_pos = np.array([self.node_pos[c] for c in vocabulary.codes], dtype=np.int64)
        # for every vocabulary code: the positions, on the prediction axis, of
        # the vocabulary codes that are its ancestors-or-self (activation targets)
        pred_axis = {int(p): i for i, p in enumerate(self.pred_pos)}
        self._target_axis = {}
        self._path_cache = {}
        for code in vocabulary.codes:
            path = self.path_positions(code)
            self._target_axis[self.node_pos[code]] = np.array(
                sorted(pred_axis[p] for p in path if p in pred_axis), dtype=np.int64
            )

    def __len__(self):
        return len(self.nodes)

    @property
    def num_predictable(self):
        return len(self.pred_pos)

    def path_positions(self, code) -> np.ndarray:
        """Node positions from just below the family root down to the code."""
        pos = self.node_pos.get(code)
        if pos is None:
            raise DataError(f"code {code} is not in the hierarchy")
        cached = self._path_cache.get(pos)
        if cached is not None:
            return cached
        path = []
        node = pos
        while node >= 0 and self.parent_pos[node] >= 0:
            path.append(node)
            node = self.parent_pos[node]
        out = np.array(path[::-1], dtype=np.int64)
        self._path_cache[pos] = out
        return out

    def day_target_columns(self, day_codes) -> np.ndarray:
        """Prediction-axis indices active for a day's observed code set."""
        chunks = [
            self._target_axis[self.node_pos[c]]
            for c in day_codes
            if self.node_pos.get(c) is not None and self.node_pos[c] in self._target_axis
        ]
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(chunks))

    def bag_positions(self, day_codes) -> np.ndarray:
        """Node positions of a day's in-vocabulary codes (the input bag)."""
        out = sorted(
            self.node_pos[c]
            for c in day_codes
            if c in self.node_pos and self.node_pos[c] in self._target_axis
        )
        return np.array(out, dtype=np.int64)


def hierarchical_code_prob(rep, code, weights, hierarchy: CodeHierarchy) -> float:
    """Probability of one code: the product of path sigmoid factors.

    Clamped to [1e-12, 1 - 1e-12] so saturation cannot round to exactly 0/1.
    """
    path = hierarchy.path_positions(code)
    scores = weights[path] @ np.asarray(rep, dtype=np.float64)
    p = float(np.exp(log_sigmoid(scores).sum()))
    return min(max(p, _CLAMP), 1.0 - _CLAMP)


def path_log_probs(reps, weights, hierarchy: CodeHierarchy):
    """Per-node scores and cumulative path log-probabilities.

    Returns (scores, logsig, L) each shaped (num_nodes, num_days); rows of
    root nodes are zero in L and unused in the loss.
    """
    scores = weights @ reps.T
    logsig = log_sigmoid(scores)
    L = np.zeros_like(scores)
    parent = hierarchy.parent_pos
    for j in range(len(hierarchy)):
        p = parent[j]
        if p >= 0:
            L[j] = L[p] + logsig[j]
    return scores, logsig, L


def _log1m_exp(L):
    """log(1 - exp(L)) for L < 0, stable across the whole range."""
    out = np.empty_like(L)
    small = L < -0.6931471805599453  # log(1/2)
    out[small] = np.log1p(-np.exp(L[small]))
    with np.errstate(divide="ignore"):
        out[~small] = np.log(-np.expm1(L[~small]))
    return out


def binary_relevance_loss(reps, weights, hierarchy, positive_columns, with_grads=True):
    """Mean per-day sum over the vocabulary of per-code cross-entropies.

    `positive_columns[d]` holds the prediction-axis indices active on target
    day d. Returns (loss, d_reps, d_weights); the backward pass aggregates
    the per-code gradients up the tree so each node is touched once. With
    `with_grads=False` the gradients are returned as None.
    """
    n_days = reps.shape[0]
    if n_days == 0:
        raise DataError("no target days")
    scores, logsig, L = path_log_probs(reps, weights, hierarchy)
    Lp = L[hierarchy.pred_pos]
    saturated = (Lp > _LOG1M_CLAMP) | (Lp < _LOG_CLAMP)
    if np.any(saturated):
        log.warning(
            "binary_relevance_loss: clamped %d saturated probabilities",
            int(saturated.sum()),
        )
    Lp = np.clip(Lp, _LOG_CLAMP, _LOG1M_CLAMP)

    neg_terms = -_log1m_exp(Lp)  # loss if the code were absent
    total = neg_terms.sum()
    pos_rows = np.concatenate([cols for cols in positive_columns]) if positive_columns else np.empty(0, dtype=np.int64)
    pos_days = np.concatenate(
        [np.full(len(cols), d, dtype=np.int64) for d, cols in enumerate(positive_columns)]
    ) if positive_columns else np.empty(0, dtype=np.int64)
    total += (-Lp[pos_rows, pos_days] - neg_terms[pos_rows, pos_days]).sum()
    loss = total / n_days
    if not with_grads:
        return loss, None, None

    # dL of each per-code term: absent -> p/(1-p), present -> -1; the loss is
    # constant inside the clamp region so its gradient there is zero
    p = np.exp(Lp)
    gL = p / (1.0 - p)
    gL[pos_rows, pos_days] = -1.0
    gL[saturated] = 0.0
    G = np.zeros_like(L)
    G[hierarchy.pred_pos] = gL
    parent = hierarchy.parent_pos
    for j in range(len(hierarchy) - 1, -1, -1):
        pj = parent[j]
        if pj >= 0:
            G[pj] += G[j]
    dS = G * (1.0 - sigmoid(scores)) / n_days
    roots = parent < 0
    dS[roots] = 0.0
    d_weights = dS @ reps
    d_reps = dS.T @ weights
    return loss, d_reps, d_weights
