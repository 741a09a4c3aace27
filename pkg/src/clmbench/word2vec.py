"""Skip-gram code embeddings with negative sampling.

Each patient becomes one token sequence: the codes of each day are shuffled
(days have no internal order), optionally ancestor-expanded first, then
concatenated across days in date order. Training is plain SGNS with a
dynamic window, vectorized over chunks of (center, context) pairs;
within-chunk gradient collisions are summed, which keeps the trainer
deterministic for a given seed.
"""

import logging

import numpy as np

from clmbench.ehr import CodeVocabulary, expand_ancestors
from clmbench.errors import ConfigurationError, DataError
from clmbench.numerics import sigmoid

log = logging.getLogger(__name__)

WINDOW = 5
NEGATIVES = 5
EPOCHS = 10
LR_START = 0.02
LR_END = 1e-4
_CHUNK = 384  # small chunks bound duplicate-pair gradient pileups
_SCORE_CLIP = 8.0


class CodeEmbeddingTable:
    """One embedding row per vocabulary code."""

    def __init__(self, vocabulary: CodeVocabulary, matrix: np.ndarray):
        if matrix.shape[0] != len(vocabulary):
            raise ConfigurationError("embedding row count must match vocabulary size")
        if not np.all(np.isfinite(matrix)):
            raise DataError("embedding table contains non-finite values")
        self.vocabulary = vocabulary
        self.matrix = matrix
        self.dimension = matrix.shape[1]

    def row(self, code):
        idx = self.vocabulary.index.get(code)
        return None if idx is None else self.matrix[idx]


def build_sequences(corpus, vocabulary, rng, ontology=None, ontology_expansion=False):
    """Token-index sequences, one per patient, day codes shuffled by `rng`."""
    sequences = []
    for timeline in corpus:
        seq = []
        for day in timeline.days:
            codes = day.codes
            if ontology_expansion:
                codes = {
                    c
                    for c in expand_ancestors(codes, ontology, include_root=False)
                    if c in vocabulary
                }
            else:
                codes = {c for c in codes if c in vocabulary}
            if not codes:
                continue
            day_tokens = sorted(vocabulary.index[c] for c in codes)
            order = rng.permutation(len(day_tokens))
            seq.extend(day_tokens[i] for i in order)
        if seq:
            sequences.append(np.array(seq, dtype=np.int64))
    return sequences


def train_word2vec(corpus, dim, rng, vocabulary=None, ontology=None,
                   ontology_expansion=False, epochs=EPOCHS, window=WINDOW,
                   negatives=NEGATIVES) -> CodeEmbeddingTable:
    """Skip-gram with negative sampling over shuffled-day patient sequences."""
    if dim < 2:
        raise ConfigurationError("embedding size must be >= 2")
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty corpus")
    if vocabulary is None:
        from clmbench.ehr import build_vocabulary

        vocabulary = build_vocabulary(corpus, min_patients=1)
    if ontology_expansion:
        from clmbench.features import extended_vocabulary

        vocabulary = extended_vocabulary(vocabulary, ontology)
    sequences = build_sequences(
        corpus, vocabulary, rng, ontology=ontology, ontology_expansion=ontology_expansion
    )
    if not sequences:
        raise DataError("no in-vocabulary tokens in the corpus")

    n_codes = len(vocabulary)
    tokens = np.concatenate(sequences)
    seq_ids = np.concatenate(
        [np.full(len(s), i, dtype=np.int64) for i, s in enumerate(sequences)]
    )
    counts = np.bincount(tokens, minlength=n_codes).astype(np.float64)
    noise = counts**0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    w_in = (rng.random((n_codes, dim)) - 0.5) / dim
    w_out = np.zeros((n_codes, dim))

    for epoch in range(epochs):
        half = rng.integers(1, window + 1, size=len(tokens))
        centers_all, contexts_all = [], []
        for d in range(1, window + 1):
            left = np.arange(len(tokens) - d)
            ok = seq_ids[left] == seq_ids[left + d]
            fwd = left[ok & (half[left] >= d)]
            centers_all.append(tokens[fwd])
            contexts_all.append(tokens[fwd + d])
            bwd = left[ok & (half[left + d] >= d)]
            centers_all.append(tokens[bwd + d])
            contexts_all.append(tokens[bwd])
        centers = np.concatenate(centers_all)
        contexts = np.concatenate(contexts_all)
        order = rng.permutation(len(centers))
        centers, contexts = centers[order], contexts[order]

        for start in range(0, len(centers), _CHUNK):
            frac = (epoch + start / max(len(centers), 1)) / epochs
            lr = LR_START + (LR_END - LR_START) * frac
            c = centers[start : start + _CHUNK]
            o = contexts[start : start + _CHUNK]
            neg = np.searchsorted(noise_cdf, rng.random((len(c), negatives)))
            vin = w_in[c]
            vout = w_out[o]
            vneg = w_out[neg]
            score_pos = np.clip((vin * vout).sum(axis=1), -_SCORE_CLIP, _SCORE_CLIP)
            score_neg = np.clip(np.einsum("bd,bkd->bk", vin, vneg), -_SCORE_CLIP, _SCORE_CLIP)
            g_pos = sigmoid(score_pos) - 1.0
            g_neg = sigmoid(score_neg)
            grad_in = g_pos[:, None] * vout + np.einsum("bk,bkd->bd", g_neg, vneg)
            np.add.at(w_in, c, -lr * grad_in)
            np.add.at(w_out, o, -lr * g_pos[:, None] * vin)
            np.add.at(
                w_out,
                neg.ravel(),
                (-lr * g_neg[:, :, None] * vin[:, None, :]).reshape(-1, dim),
            )
        log.debug("word2vec epoch %d/%d: %d pairs", epoch + 1, epochs, len(centers))
    return CodeEmbeddingTable(vocabulary, w_in)
