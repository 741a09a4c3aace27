"""Latent semantic indexing over patient histories.

Each patient contributes one document: the code multiset up to a single
randomly sampled cut point in their record. Documents get TF-IDF weights,
and a rank-r truncated SVD supplies the projection. The right singular
vectors are computed from an eigendecomposition of the (small, dense)
term-term Gram matrix, which is deterministic and avoids materializing a
dense document matrix.
"""

import logging

import numpy as np
from scipy import sparse

from clmbench.errors import ConfigurationError, DataError
from clmbench.features import codes_before, extended_vocabulary

log = logging.getLogger(__name__)


class LsiModel:
    """IDF weights plus an orthonormal |V| x r projection."""

    def __init__(self, vocabulary, idf, projection, tf_mode="log"):
        if projection.shape[0] != len(vocabulary) or idf.shape[0] != len(vocabulary):
            raise ConfigurationError("projection and idf must match the vocabulary")
        self.vocabulary = vocabulary
        self.idf = idf
        self.projection = projection
        self.tf_mode = tf_mode
        self.rank = projection.shape[1]

    def weigh(self, counts: dict) -> np.ndarray:
        """TF-IDF vector for a code multiset."""
        x = np.zeros(len(self.vocabulary))
        for code, count in counts.items():
            idx = self.vocabulary.index.get(code)
            if idx is not None:
                tf = float(count) if self.tf_mode == "raw" else np.log1p(count)
                x[idx] = tf * self.idf[idx]
        return x

    def project_counts(self, counts: dict) -> np.ndarray:
        return self.weigh(counts) @ self.projection


def _document_counts(timeline, rng, vocabulary, ontology, ontology_expansion):
    """Code multiset up to one uniformly sampled cut over the record's days."""
    n_days = len(timeline.days)
    if n_days == 0:
        return None
    cut = int(rng.integers(1, n_days + 1))
    counts = {}
    for day in timeline.days[:cut]:
        codes = day.codes
        if ontology_expansion:
            from clmbench.ehr import expand_ancestors

            codes = expand_ancestors(codes, ontology, include_root=False)
        for code in codes:
            if code in vocabulary:
                counts[code] = counts.get(code, 0) + 1
    return counts or None


def train_lsi(corpus, rank, rng, vocabulary=None, ontology=None,
              ontology_expansion=False, tf_mode="log") -> LsiModel:
    """Fit TF-IDF + rank-r truncated SVD on one random cut per patient."""
    if rank < 1:
        raise ConfigurationError("rank must be >= 1")
    if tf_mode not in ("log", "raw"):
        raise ConfigurationError(f"unknown tf_mode {tf_mode!r}")
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty corpus")
    if vocabulary is None:
        from clmbench.ehr import build_vocabulary

        vocabulary = build_vocabulary(corpus, min_patients=1)
    if ontology_expansion:
        vocabulary = extended_vocabulary(vocabulary, ontology)

    docs = []
    for timeline in corpus:
        counts = _document_counts(timeline, rng, vocabulary, ontology, ontology_expansion)
        if counts is not None:
            docs.append(counts)
    if not docs:
        raise DataError("no non-empty documents")

    n_docs = len(docs)
    df = np.zeros(len(vocabulary))
    for counts in docs:
        for code in counts:
            df[vocabulary.index[code]] += 1
    idf = np.zeros(len(vocabulary))
    seen = df > 0
    idf[seen] = np.log(n_docs / df[seen])

    model = LsiModel(vocabulary, idf, np.zeros((len(vocabulary), 0)), tf_mode=tf_mode)
    indptr = [0]
    indices, values = [], []
    for counts in docs:
        x = model.weigh(counts)
        nz = np.nonzero(x)[0]
        indices.append(nz)
        values.append(x[nz])
        indptr.append(indptr[-1] + nz.size)
    X = sparse.csr_matrix(
        (np.concatenate(values), np.concatenate(indices), np.array(indptr)),
        shape=(n_docs, len(vocabulary)),
    )

    projection = truncated_projection(X, rank)
    return LsiModel(vocabulary, idf, projection, tf_mode=tf_mode)


def truncated_projection(X, rank) -> np.ndarray:
    """Top-`rank` right singular vectors of X, columns sign-fixed.

    Uses the eigendecomposition of the term-term Gram matrix; reduces the
    rank with a warning when the matrix cannot support it.
    """
    gram = np.asarray((X.T @ X).todense()) if sparse.issparse(X) else np.asarray(X).T @ X
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    tol = max(X.shape) * np.finfo(np.float64).eps * max(eigvals[0], 0.0)
    numerical_rank = int(np.sum(eigvals > max(tol, 0.0)))
    effective = min(rank, numerical_rank, min(X.shape))
    if effective < rank:
        log.warning("lsi: requested rank %d exceeds matrix rank, reduced to %d", rank, effective)
    projection = eigvecs[:, :effective].copy()
    # fix each column's sign so the decomposition is reproducible verbatim
    for j in range(effective):
        pivot = np.argmax(np.abs(projection[:, j]))
        if projection[pivot, j] < 0:
            projection[:, j] = -projection[:, j]
    return projection


def project_lsi(timeline, reference_time, model: LsiModel) -> np.ndarray:
    """Project the pre-reference-time code multiset into the LSI space."""
    return model.project_counts(codes_before(timeline, reference_time))
