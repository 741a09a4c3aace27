"""Rank-based AUROC and the paired bootstrap over a shared test set."""

import numpy as np

from clmbench.errors import ConfigurationError, DataError

BOOTSTRAP_SAMPLES = 1001
_MAX_REDRAWS = 10000


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties half.

    Computed from average ranks (Mann-Whitney), which matches the O(n^2)
    pairwise count exactly, ties included.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ConfigurationError("scores and labels must align")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("both classes must be present to compute AUROC")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    boundaries = np.concatenate(
        [[0], np.nonzero(np.diff(sorted_scores))[0] + 1, [scores.size]]
    )
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + hi + 1)  # average 1-based rank of the tie run
    rank_sum = ranks[np.asarray(labels) == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def bootstrap_paired_delta(scores_a, scores_b, labels, rng,
                           n_boot: int = BOOTSTRAP_SAMPLES):
    """Mean and std of AUROC(b) - AUROC(a) over bootstrap resamples.

    Both score vectors must be aligned to the same test examples. Resamples
    that lack one of the classes are redrawn so exactly `n_boot` valid
    resamples contribute.
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if not (scores_a.shape == scores_b.shape == labels.shape):
        raise ConfigurationError("scores and labels must have identical shapes")
    if n_boot < 2:
        raise ConfigurationError("n_boot must be at least 2")
    n = labels.size
    deltas = np.empty(n_boot)
    for i in range(n_boot):
        for attempt in range(_MAX_REDRAWS):
            idx = rng.integers(0, n, size=n)
            picked = labels[idx]
            if picked.min() != picked.max():
                break
        else:
            raise DataError("could not draw a two-class bootstrap resample")
        deltas[i] = auroc(scores_b[idx], picked) - auroc(scores_a[idx], picked)
    return float(deltas.mean()), float(deltas.std(ddof=1))
