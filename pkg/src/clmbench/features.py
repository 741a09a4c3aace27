"""Count-based features, embedding pooling, and the sparse matrix format.

Count features live at full vocabulary dimensionality and are sparse by
construction; everything here returns sorted-index sparse vectors or scipy
CSR matrices.
"""

import json
import logging
import struct

import numpy as np
from scipy import sparse

from clmbench.ehr import CodeVocabulary, expand_ancestors
from clmbench.errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

# half-open day buckets counted back from the reference time
TIME_BIN_EDGES = (30, 180, 365)
NUM_TIME_BINS = 4


class SparseFeatureVector:
    """Fixed-dimension vector stored as sorted (index, value) pairs."""

    def __init__(self, dimension: int, indices, values):
        self.dimension = int(dimension)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.indices.size:
            if not np.all(np.diff(self.indices) > 0):
                raise DataError("sparse indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dimension:
                raise DataError("sparse index out of range")
        if not np.all(np.isfinite(self.values)):
            raise DataError("sparse values must be finite")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.values
        return out

    def sum(self) -> float:
        return float(self.values.sum())


def extended_vocabulary(vocabulary: CodeVocabulary, ontology) -> CodeVocabulary:
    """Vocabulary plus every ancestor reachable from it, family roots excluded.

    Root columns would increment on every occurrence of anything in the
    family, carrying no signal.
    """
    codes = set(vocabulary.codes)
    for code in vocabulary.codes:
        for node in expand_ancestors({code}, ontology, include_root=False):
            codes.add(node)
    return CodeVocabulary(codes)


class CountFeaturizer:
    """Counts of each code strictly before a reference time.

    Options mirror the two enhancements: per-occurrence ancestor expansion
    and four time-bucket column blocks.
    """

    def __init__(self, vocabulary, ontology=None, time_bins=False, ontology_expansion=False):
        if ontology_expansion and ontology is None:
            raise ConfigurationError("ontology_expansion requires an ontology")
        self.base_vocabulary = vocabulary
        self.time_bins = bool(time_bins)
        self.ontology_expansion = bool(ontology_expansion)
        if ontology_expansion:
            self.vocabulary = extended_vocabulary(vocabulary, ontology)
            self._expanded = {}
            for code in vocabulary.codes:
                targets = expand_ancestors({code}, ontology, include_root=False)
                self._expanded[vocabulary.index[code]] = np.array(
                    sorted(self.vocabulary.index[t] for t in targets if t in self.vocabulary.index),
                    dtype=np.int64,
                )
        else:
            self.vocabulary = vocabulary
            self._expanded = None
        self.dimension = len(self.vocabulary) * (NUM_TIME_BINS if self.time_bins else 1)

    def column_names(self):
        names = [str(c) for c in self.vocabulary.codes]
        if not self.time_bins:
            return names
        out = []
        for b in range(NUM_TIME_BINS):
            lo = (0, *TIME_BIN_EDGES)[b]
            hi = (*TIME_BIN_EDGES, "inf")[b]
            out.extend(f"{name}|days[{lo},{hi})" for name in names)
        return out

    def _occurrences(self, timeline, reference_time):
        """Flat (extended index, day-offset) arrays for days before the reference."""
        idx_chunks, age_chunks = [], []
        base_index = self.base_vocabulary.index
        ref = reference_time.toordinal()
        for day in timeline.days:
            if day.date >= reference_time:
                break
            cols = [base_index[c] for c in day.codes if c in base_index]
            if not cols:
                continue
            if self._expanded is not None:
                arr = np.concatenate([self._expanded[c] for c in cols])
            else:
                arr = np.array(cols, dtype=np.int64)
            idx_chunks.append(arr)
            age_chunks.append(np.full(arr.size, ref - day.date.toordinal(), dtype=np.int64))
        if not idx_chunks:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        return np.concatenate(idx_chunks), np.concatenate(age_chunks)

    def featurize(self, timeline, reference_time) -> SparseFeatureVector:
        cols, ages = self._occurrences(timeline, reference_time)
        if self.time_bins and cols.size:
            bucket = np.searchsorted(TIME_BIN_EDGES, ages, side="right")
            cols = bucket * len(self.vocabulary) + cols
        if not cols.size:
            return SparseFeatureVector(self.dimension, [], [])
        uniq, counts = np.unique(cols, return_counts=True)
        return SparseFeatureVector(self.dimension, uniq, counts.astype(np.float64))

    def matrix(self, corpus_by_id, examples) -> sparse.csr_matrix:
        """CSR matrix with one row per example, rows in example order."""
        indptr = [0]
        indices, values = [], []
        for ex in examples:
            vec = self.featurize(corpus_by_id[ex.patient_id], ex.prediction_time)
            indices.append(vec.indices)
            values.append(vec.values)
            indptr.append(indptr[-1] + vec.indices.size)
        if not examples:
            return sparse.csr_matrix((0, self.dimension))
        return sparse.csr_matrix(
            (np.concatenate(values), np.concatenate(indices), np.array(indptr)),
            shape=(len(examples), self.dimension),
        )


def featurize_counts(timeline, reference_time, vocabulary, ontology=None,
                     time_bins=False, ontology_expansion=False) -> SparseFeatureVector:
    """One-shot convenience wrapper over CountFeaturizer."""
    feat = CountFeaturizer(
        vocabulary, ontology, time_bins=time_bins, ontology_expansion=ontology_expansion
    )
    return feat.featurize(timeline, reference_time)


def pool_code_embeddings(code_counts, table, mode="mean") -> np.ndarray:
    """Combine code vectors observed before a reference time.

    `code_counts` is a multiset given as {code: count}. Mean is weighted by
    occurrence count; min and max are over distinct observed codes. Codes the
    table does not cover are skipped; with no known codes the result is a
    zero vector of the proper width, flagged in the log.
    """
    if mode not in ("mean", "concat_min_max_mean"):
        raise ConfigurationError(f"unknown pooling mode {mode!r}")
    k = table.dimension
    width = 3 * k if mode == "concat_min_max_mean" else k
    rows, weights = [], []
    for code, count in code_counts.items():
        row = table.row(code)
        if row is not None:
            rows.append(row)
            weights.append(count)
    if not rows:
        log.debug("pool_code_embeddings: no known codes, returning zeros")
        return np.zeros(width)
    stacked = np.stack(rows)
    w = np.asarray(weights, dtype=np.float64)
    mean = (stacked * w[:, None]).sum(axis=0) / w.sum()
    if mode == "mean":
        return mean
    return np.concatenate([stacked.min(axis=0), stacked.max(axis=0), mean])


def codes_before(timeline, reference_time) -> dict:
    """Multiset of codes strictly before the reference time."""
    counts = {}
    for day in timeline.days:
        if day.date >= reference_time:
            break
        for code in day.codes:
            counts[code] = counts.get(code, 0) + 1
    return counts


_MAGIC = b"CFM1"


def write_feature_matrix(path, matrix, column_names) -> None:
    """Binary sparse format: header (dims, nnz), then indptr/index/value arrays.

    A JSON sidecar at <path>.json names the columns.
    """
    csr = sparse.csr_matrix(matrix)
    csr.sort_indices()
    if len(column_names) != csr.shape[1]:
        raise ConfigurationError("column_names length must match matrix width")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQ", csr.shape[0], csr.shape[1], csr.nnz))
        fh.write(csr.indptr.astype(np.int64).tobytes())
        fh.write(csr.indices.astype(np.int64).tobytes())
        fh.write(csr.data.astype(np.float64).tobytes())
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump({"columns": list(column_names)}, fh)


def read_feature_matrix(path):
    """Returns (csr_matrix, column_names)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a feature matrix file")
        rows, cols, nnz = struct.unpack("<QQQ", fh.read(24))
        indptr = np.frombuffer(fh.read(8 * (rows + 1)), dtype=np.int64)
        indices = np.frombuffer(fh.read(8 * nnz), dtype=np.int64)
        data = np.frombuffer(fh.read(8 * nnz), dtype=np.float64)
    with open(f"{path}.json", encoding="utf-8") as fh:
        columns = json.load(fh)["columns"]
    return sparse.csr_matrix((data, indices, indptr), shape=(rows, cols)), columns
