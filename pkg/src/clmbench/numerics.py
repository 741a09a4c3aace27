"""Dense float64 numerics shared by every learned model.

Parameters live in plain dicts of name -> float64 ndarray. All training math
runs in 64-bit so the finite-difference gradient checks have a single ground
truth; there is no mixed precision anywhere.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from clmbench.errors import ConfigurationError, GradientCheckError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Elementwise x * Phi(x) with the exact erf form of the normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    """d/dx of gelu: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


@dataclass
class AdamState:
    """Moment accumulators for one parameter set.

    `m` and `v` mirror the parameter dict shapes; `step` counts completed
    updates and increases by exactly one per call.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    decoupled_weight_decay: bool = True
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _ensure(self, params):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            elif self.m[name].shape != p.shape:
                raise ConfigurationError(
                    f"adam state shape mismatch for '{name}': "
                    f"{self.m[name].shape} vs {p.shape}"
                )


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Adam with bias correction, updating `params` and `state` in place.

    Weight decay defaults to the decoupled form: params are shrunk by
    lr * wd * params before the moment-based step, so the decay never enters
    the accumulators. Set ``state.decoupled_weight_decay = False`` to fold
    wd * param into the gradient instead.
    """
    if lr < 0:
        raise ConfigurationError(f"negative learning rate {lr}")
    state._ensure(params)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(
                f"gradient shape mismatch for '{name}': {g.shape} vs {p.shape}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay != 0.0:
            if state.decoupled_weight_decay:
                p -= lr * state.weight_decay * p
            else:
                g = g + state.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then linear decay to 0.

    Continuous at the junction: lr(warmup_steps) == base_lr. With
    warmup_steps == 0 the schedule starts at base_lr.
    """
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ConfigurationError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out)) for a 2-D shape."""
    if len(shape) != 2:
        raise ConfigurationError(f"xavier_init needs a 2-D shape, got {tuple(shape)}")
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float64)


def gradient_check(loss_fn, params: dict, perturbation: float = 1e-5) -> float:
    """Central-difference check of an analytic gradient.

    `loss_fn(params) -> (loss, grads)` must be pure and deterministic.
    Returns the max over all parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= perturbation <= 1e-3:
        raise ConfigurationError(f"perturbation {perturbation} outside [1e-7, 1e-3]")
    base_loss, grads = loss_fn(params)
    if not np.isfinite(base_loss):
        raise GradientCheckError(f"non-finite loss {base_loss} at the base point")
    worst = 0.0
    for name, p in params.items():
        analytic = grads[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            plus, _ = loss_fn(params)
            flat[i] = orig - perturbation
            minus, _ = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradientCheckError(f"non-finite loss while perturbing '{name}'")
            numeric = (plus - minus) / (2.0 * perturbation)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
