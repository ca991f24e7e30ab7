"""Conditional VAE whose posterior is pulled towards N(prototype, I).

Encoder: x -> ReLU(affine, hidden) -> (mu, logvar) heads of width k.
Decoder: z -> ReLU(affine, hidden) -> affine back to d.
Labels never enter the network; conditioning lives entirely in the prior mean.
"""

from dataclasses import dataclass

import numpy as np

from .datamodel import fork_rng
from .numkernel import DTYPE, AdamState, adam_update, as_matrix, glorot_uniform, mse_sum, relu

PARAM_NAMES = ("enc.W", "enc.b", "mu.W", "mu.b", "logvar.W", "logvar.b",
               "dec.W1", "dec.b1", "dec.W2", "dec.b2")


@dataclass
class CvaeModel:
    params: dict

    @classmethod
    def init(cls, d: int, k: int, hidden: int = 512, seed: int = 0) -> "CvaeModel":
        rng = fork_rng(seed, "cvae-init")
        p = {
            "enc.W": glorot_uniform(rng, hidden, d), "enc.b": np.zeros((1, hidden)),
            "mu.W": glorot_uniform(rng, k, hidden), "mu.b": np.zeros((1, k)),
            "logvar.W": glorot_uniform(rng, k, hidden), "logvar.b": np.zeros((1, k)),
            "dec.W1": glorot_uniform(rng, hidden, k), "dec.b1": np.zeros((1, hidden)),
            "dec.W2": glorot_uniform(rng, d, hidden), "dec.b2": np.zeros((1, d)),
        }
        return cls(p)

    @classmethod
    def from_params(cls, params: dict) -> "CvaeModel":
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"not a CVAE checkpoint; missing {sorted(missing)}")
        m = cls({name: np.asarray(params[name], dtype=DTYPE) for name in PARAM_NAMES})
        if m.params["mu.W"].shape != m.params["logvar.W"].shape:
            raise ValueError("mu and logvar heads must have the same shape")
        if m.params["dec.W2"].shape[0] != m.visual_dim:
            raise ValueError("decoder output width must equal the visual dimension")
        return m

    def copy(self) -> "CvaeModel":
        return CvaeModel({k: v.copy() for k, v in self.params.items()})

    @property
    def visual_dim(self) -> int:
        return self.params["enc.W"].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.params["mu.W"].shape[0]


def kl_to_prior(mu, logvar, a) -> np.ndarray:
    """Per-row KL(N(mu, diag exp(logvar)) || N(a, I))."""
    return 0.5 * np.sum(np.exp(logvar) + (mu - a) ** 2 - 1.0 - logvar, axis=1)


def reparameterize(mu, logvar, noise):
    return mu + np.exp(0.5 * logvar) * noise


def _encode(p, x):
    zh = x @ p["enc.W"].T + p["enc.b"]
    h = relu(zh)
    mu = h @ p["mu.W"].T + p["mu.b"]
    logvar = h @ p["logvar.W"].T + p["logvar.b"]
    return mu, logvar, h, zh


def cvae_loss(m: CvaeModel, x, a_of_label, noise):
    """Squared reconstruction error plus KL to N(a, I), summed over rows.

    ``noise`` is the standard-normal draw used for the reparameterised
    sample, passed in so the loss is a deterministic function of its inputs.
    """
    p = m.params
    x = as_matrix(x)
    a = as_matrix(a_of_label)
    noise = as_matrix(noise)
    n, k = x.shape[0], m.latent_dim
    if x.shape[1] != m.visual_dim or a.shape != (n, k) or noise.shape != (n, k):
        raise ValueError(f"shape mismatch: x {x.shape}, a {a.shape}, noise {noise.shape}")
    mu, logvar, h, zh = _encode(p, x)
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    zg = z @ p["dec.W1"].T + p["dec.b1"]
    g = relu(zg)
    x_rec = g @ p["dec.W2"].T + p["dec.b2"]
    recon, g_rec = mse_sum(x_rec, x)
    kl = float(np.sum(kl_to_prior(mu, logvar, a)))

    grads = {"dec.W2": g_rec.T @ g, "dec.b2": g_rec.sum(axis=0, keepdims=True)}
    g_zg = (g_rec @ p["dec.W2"]) * (zg > 0)
    grads["dec.W1"] = g_zg.T @ z
    grads["dec.b1"] = g_zg.sum(axis=0, keepdims=True)
    g_z = g_zg @ p["dec.W1"]
    g_mu = g_z + (mu - a)
    g_lv = g_z * noise * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0)
    grads["mu.W"] = g_mu.T @ h
    grads["mu.b"] = g_mu.sum(axis=0, keepdims=True)
    grads["logvar.W"] = g_lv.T @ h
    grads["logvar.b"] = g_lv.sum(axis=0, keepdims=True)
    g_zh = (g_mu @ p["mu.W"] + g_lv @ p["logvar.W"]) * (zh > 0)
    grads["enc.W"] = g_zh.T @ x
    grads["enc.b"] = g_zh.sum(axis=0, keepdims=True)
    return recon + kl, grads


@dataclass
class CvaeConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def fit_cvae(m: CvaeModel, x, a_of_label, cfg: CvaeConfig):
    """Adam over shuffled mini-batches; returns (model, per-epoch mean loss)."""
    x = as_matrix(x)
    a = as_matrix(a_of_label)
    if x.shape[0] == 0:
        raise ValueError("no training rows")
    m = m.copy()
    state = AdamState(cfg.learning_rate)
    rng = fork_rng(cfg.seed, "noise")
    history = []
    n = x.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            noise = rng.standard_normal((len(rows), m.latent_dim))
            loss, grads = cvae_loss(m, x[rows], a[rows], noise)
            m.params = adam_update(m.params, grads, state)
            total += loss / len(rows)
            steps += 1
        history.append(total / steps)
    return m, history


def train_cvae(m: CvaeModel, ds, cfg: CvaeConfig):
    """Fit on the seen-train split, each row paired with its class prototype."""
    rows = ds.seen_train
    return fit_cvae(m, ds.visual[rows], ds.prototypes[ds.labels[rows]], cfg)


def synthesize_semantic(m: CvaeModel, x, sample: bool = False, rng=None) -> np.ndarray:
    """Posterior mean for every row (a reparameterised draw when ``sample``)."""
    x = as_matrix(x)
    if x.shape[1] != m.visual_dim:
        raise ValueError(f"x has {x.shape[1]} columns, CVAE expects {m.visual_dim}")
    mu, logvar, _, _ = _encode(m.params, x)
    if not sample:
        return mu
    rng = rng if rng is not None else np.random.default_rng()
    return reparameterize(mu, logvar, rng.standard_normal(mu.shape))
