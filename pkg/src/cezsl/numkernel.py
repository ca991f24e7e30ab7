"""Dense float64 numerics shared by every model: activations, losses with
analytic gradients, Adam, and a central-difference gradient oracle."""

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array (vectors become a single row)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1)
    elif x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    logits = as_matrix(logits)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    n, n_classes = logits.shape
    if n < 1 or targets.shape[0] != n:
        raise ValueError("need one target per logit row and at least one row")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ValueError(f"targets must lie in [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, targets]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, targets] -= 1.0
    return loss, grad / n


def mse_sum(pred, ref):
    """Sum of squared row errors; gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=DTYPE)
    ref = np.asarray(ref, dtype=DTYPE)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    diff = pred - ref
    return float(np.sum(diff * diff)), 2.0 * diff


@dataclass
class AdamState:
    """Per-parameter Adam moments. ``first``/``second`` are keyed like the
    parameter dict they optimise."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.learning_rate, self.beta1, self.beta2, self.epsilon, self.step,
            {k: v.copy() for k, v in self.first.items()},
            {k: v.copy() for k, v in self.second.items()},
        )


def _adam_step(param, grad, m, v, state: AdamState, t: int):
    # moments are updated in place; they belong to ``state``
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * (grad * grad)
    denom = v / (1.0 - state.beta2 ** t)
    np.sqrt(denom, out=denom)
    denom += state.epsilon
    step = m / (1.0 - state.beta1 ** t)
    step /= denom
    step *= state.learning_rate
    return param - step, m, v


def adam_update(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam step over every entry of ``params``.

    Returns the new parameter dict; ``state`` is advanced in place. Keys
    missing from ``grads`` get a zero gradient.
    """
    if state.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        out[name], state.first[name], state.second[name] = _adam_step(p, g, m, v, state, t)
    return out


def finite_difference_grad(loss_fn, at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(at, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn(x)
        flat[i] = orig - h
        f_minus = loss_fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """Elementwise max of |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))
