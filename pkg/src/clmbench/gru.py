"""Single-layer GRU with hand-derived backward pass, vectorized over ragged
batches.

Gate equations (update gate z keeps the past, reset applied to the previous
state before the candidate projection):

    z_t = sigmoid(x_t Wz^T + h_{t-1} Uz^T + bz)
    r_t = sigmoid(x_t Wr^T + h_{t-1} Ur^T + br)
    n_t = tanh(x_t Wn^T + (r_t * h_{t-1}) Un^T + bn)
    h_t = z_t * h_{t-1} + (1 - z_t) * n_t

Batches hold sequences sorted by length descending and stored contiguously
(sequence p occupies rows offsets[p] .. offsets[p]+lengths[p]). At step t only
the first k_t sequences are active, so every matmul runs on a dense prefix
with no padding waste.
"""

import numpy as np

from clmbench.errors import ConfigurationError
from clmbench.numerics import sigmoid

GATE_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n")


def init_gru_params(input_size, hidden_size, rng) -> dict:
    """Uniform +-1/sqrt(hidden) for every gate weight and bias."""
    bound = 1.0 / np.sqrt(hidden_size)
    params = {}
    for gate in ("z", "r", "n"):
        params[f"W_{gate}"] = rng.uniform(-bound, bound, size=(hidden_size, input_size))
        params[f"U_{gate}"] = rng.uniform(-bound, bound, size=(hidden_size, hidden_size))
        params[f"b_{gate}"] = rng.uniform(-bound, bound, size=hidden_size)
    return params


class RaggedBatch:
    """Length-descending contiguous layout of variable-length sequences."""

    def __init__(self, lengths):
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.size and np.any(np.diff(lengths) > 0):
            raise ConfigurationError("sequence lengths must be sorted descending")
        if np.any(lengths <= 0):
            raise ConfigurationError("sequences must be non-empty")
        self.lengths = lengths
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]) if lengths.size else np.zeros(0, dtype=np.int64)
        self.total = int(lengths.sum())
        self.max_len = int(lengths[0]) if lengths.size else 0
        # active sequence count at each step
        self.active = np.array(
            [int(np.sum(lengths > t)) for t in range(self.max_len)], dtype=np.int64
        )

    def rows(self, t):
        k = self.active[t]
        return self.offsets[:k] + t


def gru_forward(params, x_flat, batch: RaggedBatch):
    """Returns (h_flat, cache). h_flat[row] is the hidden state after that day."""
    hidden = params["b_z"].shape[0]
    total = batch.total
    h_flat = np.zeros((total, hidden))
    cache = {
        "z": np.zeros((total, hidden)),
        "r": np.zeros((total, hidden)),
        "n": np.zeros((total, hidden)),
        "h_prev": np.zeros((total, hidden)),
    }
    h = np.zeros((len(batch.lengths), hidden))
    for t in range(batch.max_len):
        rows = batch.rows(t)
        k = rows.size
        x_t = x_flat[rows]
        h_prev = h[:k]
        z = sigmoid(x_t @ params["W_z"].T + h_prev @ params["U_z"].T + params["b_z"])
        r = sigmoid(x_t @ params["W_r"].T + h_prev @ params["U_r"].T + params["b_r"])
        n = np.tanh(x_t @ params["W_n"].T + (r * h_prev) @ params["U_n"].T + params["b_n"])
        h_t = z * h_prev + (1.0 - z) * n
        cache["z"][rows] = z
        cache["r"][rows] = r
        cache["n"][rows] = n
        cache["h_prev"][rows] = h_prev
        h_flat[rows] = h_t
        h[:k] = h_t
    return h_flat, cache


def gru_backward(params, x_flat, batch: RaggedBatch, cache, dh_flat):
    """Backpropagate dL/dh at every step. Returns (dx_flat, grads)."""
    grads = {name: np.zeros_like(params[name]) for name in GATE_NAMES}
    dx_flat = np.zeros_like(x_flat)
    carry = np.zeros((len(batch.lengths), params["b_z"].shape[0]))
    for t in range(batch.max_len - 1, -1, -1):
        rows = batch.rows(t)
        k = rows.size
        dh = dh_flat[rows] + carry[:k]
        z = cache["z"][rows]
        r = cache["r"][rows]
        n = cache["n"][rows]
        h_prev = cache["h_prev"][rows]
        x_t = x_flat[rows]

        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z

        da_n = dn * (1.0 - n * n)
        grads["W_n"] += da_n.T @ x_t
        grads["U_n"] += da_n.T @ (r * h_prev)
        grads["b_n"] += da_n.sum(axis=0)
        drh = da_n @ params["U_n"]
        dr = drh * h_prev
        dh_prev += drh * r

        da_r = dr * r * (1.0 - r)
        grads["W_r"] += da_r.T @ x_t
        grads["U_r"] += da_r.T @ h_prev
        grads["b_r"] += da_r.sum(axis=0)
        dh_prev += da_r @ params["U_r"]

        da_z = dz * z * (1.0 - z)
        grads["W_z"] += da_z.T @ x_t
        grads["U_z"] += da_z.T @ h_prev
        grads["b_z"] += da_z.sum(axis=0)
        dh_prev += da_z @ params["U_z"]

        dx_flat[rows] = da_n @ params["W_n"] + da_r @ params["W_r"] + da_z @ params["W_z"]
        carry[:k] = dh_prev
    return dx_flat, grads
