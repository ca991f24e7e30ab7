"""Shallow visual/semantic embedding network with a tied visual decoder and a
latent-space classifier.

Shapes: ``x`` is n x d, prototypes/semantics are n x k, latents are n x l.
Every loss returns ``(value, grads)`` where ``grads`` maps parameter names to
arrays shaped like the parameters; parameters a loss does not touch are
absent from its dict.
"""

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .datamodel import fork_rng
from .numkernel import (DTYPE, AdamState, adam_update, as_matrix, glorot_uniform,
                        mse_sum, relu, softmax_cross_entropy)

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W_v", "b_v", "b_dec", "W_s1", "b_s1", "W_s2", "b_s2", "W_c", "b_c")
TERMS = ("ce", "le", "sa", "clfr", "reg")


@dataclass
class EmbedModel:
    params: dict

    @classmethod
    def init(cls, d: int, k: int, n_classes: int, latent_dim: int = 1000,
             semantic_hidden: int = 750, seed: int = 0) -> "EmbedModel":
        rng = fork_rng(seed, "init")
        # classifier drawn last so its width never perturbs the other weights
        p = {
            "W_v": glorot_uniform(rng, latent_dim, d),
            "W_s1": glorot_uniform(rng, semantic_hidden, k),
            "W_s2": glorot_uniform(rng, latent_dim, semantic_hidden),
            "W_c": glorot_uniform(rng, n_classes, latent_dim),
        }
        p["b_v"] = np.zeros((1, latent_dim))
        p["b_dec"] = np.zeros((1, d))
        p["b_s1"] = np.zeros((1, semantic_hidden))
        p["b_s2"] = np.zeros((1, latent_dim))
        p["b_c"] = np.zeros((1, n_classes))
        return cls({name: p[name] for name in PARAM_NAMES})

    @classmethod
    def from_params(cls, params: dict) -> "EmbedModel":
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"not an embedding checkpoint; missing {sorted(missing)}")
        m = cls({name: np.asarray(params[name], dtype=DTYPE) for name in PARAM_NAMES})
        m.check()
        return m

    def check(self) -> None:
        p = self.params
        l, d = p["W_v"].shape
        h, k = p["W_s1"].shape
        expected = {"b_v": (1, l), "b_dec": (1, d), "b_s1": (1, h), "W_s2": (l, h),
                    "b_s2": (1, l), "b_c": (1, p["W_c"].shape[0])}
        for name, shape in expected.items():
            if p[name].shape != shape:
                raise ValueError(f"{name} has shape {p[name].shape}, expected {shape}")
        if p["W_c"].shape[1] != l:
            raise ValueError("classifier input width must equal the latent dimension")

    def copy(self) -> "EmbedModel":
        return EmbedModel({k: v.copy() for k, v in self.params.items()})

    @property
    def visual_dim(self) -> int:
        return self.params["W_v"].shape[1]

    @property
    def semantic_dim(self) -> int:
        return self.params["W_s1"].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.params["W_v"].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.params["W_c"].shape[0]


def _check_cols(x, cols, what):
    x = as_matrix(x)
    if x.shape[1] != cols:
        raise ValueError(f"{what} has {x.shape[1]} columns, model expects {cols}")
    return x


# ---------------------------------------------------------------- forward

def _visual_forward(p, x):
    z = x @ p["W_v"].T + p["b_v"]
    return relu(z), z


def _decode_forward(p, h):
    z = h @ p["W_v"] + p["b_dec"]
    return relu(z), z


def _semantic_forward(p, a):
    z1 = a @ p["W_s1"].T + p["b_s1"]
    h1 = relu(z1)
    z2 = h1 @ p["W_s2"].T + p["b_s2"]
    return relu(z2), (z1, h1, z2)


def encode_visual(m: EmbedModel, x) -> np.ndarray:
    return _visual_forward(m.params, _check_cols(x, m.visual_dim, "x"))[0]


def decode_visual(m: EmbedModel, h) -> np.ndarray:
    return _decode_forward(m.params, _check_cols(h, m.latent_dim, "h"))[0]


def encode_semantic(m: EmbedModel, a) -> np.ndarray:
    return _semantic_forward(m.params, _check_cols(a, m.semantic_dim, "a"))[0]


def classifier_logits(m: EmbedModel, x) -> np.ndarray:
    h = encode_visual(m, x)
    return h @ m.params["W_c"].T + m.params["b_c"]


# ---------------------------------------------------------------- backward

def _add(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def _visual_backward(x, z, g_h, grads):
    g_z = g_h * (z > 0)
    _add(grads, "W_v", g_z.T @ x)
    _add(grads, "b_v", g_z.sum(axis=0, keepdims=True))


def _semantic_backward(p, a, cache, g_s, grads):
    z1, h1, z2 = cache
    g_z2 = g_s * (z2 > 0)
    _add(grads, "W_s2", g_z2.T @ h1)
    _add(grads, "b_s2", g_z2.sum(axis=0, keepdims=True))
    g_z1 = (g_z2 @ p["W_s2"]) * (z1 > 0)
    _add(grads, "W_s1", g_z1.T @ a)
    _add(grads, "b_s1", g_z1.sum(axis=0, keepdims=True))


# ---------------------------------------------------------------- losses

def loss_class_encoder(m: EmbedModel, x, x_partner):
    """Reconstruct each partner from its own-class input through the tied
    decoder. Self-pairs give the plain autoencoder loss."""
    p = m.params
    x = _check_cols(x, m.visual_dim, "x")
    x_partner = _check_cols(x_partner, m.visual_dim, "x_partner")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    h, z = _visual_forward(p, x)
    x_hat, z_dec = _decode_forward(p, h)
    loss, g_xhat = mse_sum(x_hat, x_partner)
    g_zdec = g_xhat * (z_dec > 0)
    grads = {"W_v": h.T @ g_zdec, "b_dec": g_zdec.sum(axis=0, keepdims=True)}
    _visual_backward(x, z, g_zdec @ p["W_v"].T, grads)
    return loss, grads


def loss_autoencoder(m: EmbedModel, x):
    return loss_class_encoder(m, x, x)


def loss_latent_align(m: EmbedModel, x, a_of_label):
    """Sum over rows of ||f_v(x_i) - f_s(a_i)||^2."""
    p = m.params
    x = _check_cols(x, m.visual_dim, "x")
    a = _check_cols(a_of_label, m.semantic_dim, "a_of_label")
    if x.shape[0] != a.shape[0]:
        raise ValueError(f"{x.shape[0]} visual rows vs {a.shape[0]} semantic rows")
    h, z = _visual_forward(p, x)
    s, cache = _semantic_forward(p, a)
    loss, g = mse_sum(h, s)
    grads = {}
    _visual_backward(x, z, g, grads)
    _semantic_backward(p, a, cache, -g, grads)
    return loss, grads


def loss_structure_align(m: EmbedModel, class_visual_means, prototypes):
    """Encoded visual class means against encoded prototypes.

    Means are taken in visual space before encoding; the mean of encoded
    samples is a different quantity under ReLU.
    """
    return loss_latent_align(m, class_visual_means, prototypes)


def loss_classifier(m: EmbedModel, x, targets):
    """Mean softmax cross-entropy of the latent classifier; the gradient also
    flows back into the visual encoder."""
    p = m.params
    x = _check_cols(x, m.visual_dim, "x")
    h, z = _visual_forward(p, x)
    logits = h @ p["W_c"].T + p["b_c"]
    loss, g_logits = softmax_cross_entropy(logits, targets)
    grads = {"W_c": g_logits.T @ h, "b_c": g_logits.sum(axis=0, keepdims=True)}
    _visual_backward(x, z, g_logits @ p["W_c"], grads)
    return loss, grads


def loss_l2(m: EmbedModel):
    loss = sum(float(np.sum(v * v)) for v in m.params.values())
    return loss, {k: 2.0 * v for k, v in m.params.items()}


@dataclass
class LossWeights:
    alpha1: float = 1.0   # class-encoder reconstruction
    alpha2: float = 1.0   # latent alignment
    alpha3: float = 1.0   # structure alignment
    alpha4: float = 1.0   # latent classifier
    beta: float = 1e-4    # L2 on all parameters

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def by_term(self) -> dict:
        return {"ce": self.alpha1, "le": self.alpha2, "sa": self.alpha3,
                "clfr": self.alpha4, "reg": self.beta}


@dataclass
class Batch:
    """One optimisation step's inputs.

    ``x_partner`` are the reconstruction targets (own-class partners for
    labelled rows, the rows themselves for unlabelled ones). ``semantics`` is
    row-aligned with ``x``; ``means``/``mean_semantics`` carry one row per
    class taking part in structure alignment.
    """

    x: np.ndarray
    x_partner: np.ndarray
    targets: np.ndarray
    semantics: np.ndarray
    means: np.ndarray
    mean_semantics: np.ndarray


def total_loss_terms(m: EmbedModel, batch: Batch, weights: LossWeights):
    """Weighted objective plus the unweighted value of every term."""
    w = weights.by_term()
    grads = {k: np.zeros_like(v) for k, v in m.params.items()}
    terms = dict.fromkeys(TERMS, 0.0)
    parts = {
        "ce": lambda: loss_class_encoder(m, batch.x, batch.x_partner),
        "le": lambda: loss_latent_align(m, batch.x, batch.semantics),
        "sa": lambda: loss_structure_align(m, batch.means, batch.mean_semantics),
        "clfr": lambda: loss_classifier(m, batch.x, batch.targets),
        "reg": lambda: loss_l2(m),
    }
    total = 0.0
    for term, fn in parts.items():
        if w[term] == 0.0:
            continue
        if term == "sa" and len(batch.means) == 0:
            continue
        value, g = fn()
        terms[term] = value
        total += w[term] * value
        for name, gv in g.items():
            grads[name] += w[term] * gv
    return total, grads, terms


def total_loss(m: EmbedModel, batch: Batch, weights: LossWeights):
    total, grads, _ = total_loss_terms(m, batch, weights)
    return total, grads


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "inductive"
    latent_dim: int = 1000
    semantic_hidden: int = 750
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    relabel_gate: float = 0.95

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.relabel_gate <= 1.0:
            raise ValueError("relabel_gate must lie in [0, 1]")
        if self.mode not in ("inductive", "transductive"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def adam(self) -> AdamState:
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.epsilon)


class PartnerSampler:
    """Draws a uniformly random same-class partner (self included) per row."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        self.order = np.argsort(labels, kind="stable")
        classes, self.starts, self.counts = np.unique(
            labels[self.order], return_index=True, return_counts=True)
        self.slot = np.searchsorted(classes, labels)

    def draw(self, rows, rng):
        c = self.slot[rows]
        offs = np.floor(rng.random(len(rows)) * self.counts[c]).astype(np.int64)
        return self.order[self.starts[c] + offs]


@dataclass
class UnseenPool:
    """Unlabelled rows taking part in training: visual features, one
    synthesised semantic vector per row and current pseudo-labels (slots)."""

    x: np.ndarray
    semantics: np.ndarray
    labels: np.ndarray


def _class_targets(x_seen, slot_seen, proto_seen, pool):
    s = proto_seen.shape[0]
    means = [x_seen[slot_seen == c].mean(axis=0) for c in range(s)]
    sems = list(proto_seen)
    if pool is not None and len(pool.x):
        for c in np.unique(pool.labels):
            members = pool.labels == c
            means.append(pool.x[members].mean(axis=0))
            sems.append(pool.semantics[members].mean(axis=0))
    return np.asarray(means), np.asarray(sems)


def fit_embedding(m: EmbedModel, x_seen, slot_seen, proto_seen, cfg: TrainConfig,
                  pool: UnseenPool | None = None, after_epoch=None):
    """Mini-batch Adam on the weighted objective.

    ``slot_seen`` holds classifier slots 0..s-1 indexing rows of
    ``proto_seen``. When ``pool`` is non-empty each step mixes half seen and
    half unseen rows; the unseen half reconstructs itself, aligns with its
    synthesised semantics and is classified by its pseudo-label.
    ``after_epoch(model, record)`` may update ``pool.labels`` and annotate the
    epoch record. Returns the trained model and one record per epoch.
    """
    x_seen = as_matrix(x_seen)
    slot_seen = np.asarray(slot_seen, dtype=np.int64)
    proto_seen = as_matrix(proto_seen)
    if x_seen.shape[0] == 0:
        raise ValueError("no seen training rows")
    if np.setdiff1d(np.arange(proto_seen.shape[0]), slot_seen).size:
        raise ValueError("every seen class needs at least one training row")
    m = m.copy()
    state = cfg.adam()
    rng = fork_rng(cfg.seed, "pairs")
    rng_unseen = fork_rng(cfg.seed, "unseen")
    sampler = PartnerSampler(slot_seen)
    use_pool = pool is not None and len(pool.x) > 0
    seen_bs = cfg.batch_size // 2 if use_pool else cfg.batch_size
    unseen_bs = cfg.batch_size - seen_bs
    n_seen = x_seen.shape[0]
    unseen_perm, unseen_pos = np.empty(0, dtype=np.int64), 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        means, mean_sems = _class_targets(x_seen, slot_seen, proto_seen, pool if use_pool else None)
        sums = dict.fromkeys(("total",) + TERMS, 0.0)
        steps = 0
        perm = rng.permutation(n_seen)
        for start in range(0, n_seen, seen_bs):
            rows = perm[start:start + seen_bs]
            partners = sampler.draw(rows, rng)
            x = x_seen[rows]
            xp = x_seen[partners]
            targets = slot_seen[rows]
            sems = proto_seen[targets]
            if use_pool:
                take = []
                while len(take) < unseen_bs:
                    if unseen_pos >= len(unseen_perm):
                        unseen_perm, unseen_pos = rng_unseen.permutation(len(pool.x)), 0
                    n_more = min(unseen_bs - len(take), len(unseen_perm) - unseen_pos)
                    take.extend(unseen_perm[unseen_pos:unseen_pos + n_more])
                    unseen_pos += n_more
                take = np.asarray(take, dtype=np.int64)
                x = np.vstack([x, pool.x[take]])
                xp = np.vstack([xp, pool.x[take]])
                targets = np.concatenate([targets, pool.labels[take]])
                sems = np.vstack([sems, pool.semantics[take]])
            batch = Batch(x, xp, targets, sems, means, mean_sems)
            total, grads, terms = total_loss_terms(m, batch, cfg.loss_weights)
            m.params = adam_update(m.params, grads, state)
            sums["total"] += total
            for t in TERMS:
                sums[t] += terms[t]
            steps += 1
        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if after_epoch is not None:
            after_epoch(m, record)
        history.append(record)
        logger.debug("epoch %d total %.6g", epoch, record["total"])
    return m, history


def seen_training_arrays(ds):
    """(x, slot, prototypes) for the seen-train split; slot i is seen_classes[i]."""
    slot_of = {int(c): i for i, c in enumerate(ds.seen_classes)}
    x = ds.visual[ds.seen_train]
    slots = np.array([slot_of[int(c)] for c in ds.labels[ds.seen_train]], dtype=np.int64)
    return x, slots, ds.prototypes[ds.seen_classes]


def train_inductive(m: EmbedModel, ds, cfg: TrainConfig, after_epoch=None):
    """Train on the seen-train split only. Returns (model, history)."""
    if cfg.mode != "inductive":
        raise ValueError("train_inductive needs cfg.mode == 'inductive'")
    if m.n_outputs != ds.s:
        raise ValueError(f"classifier has {m.n_outputs} outputs; inductive mode needs {ds.s}")
    x, slots, protos = seen_training_arrays(ds)
    return fit_embedding(m, x, slots, protos, cfg, after_epoch=after_epoch)
