"""Transductive training: k-means pseudo-labels for the unlabelled unseen pool,
joint seen + unseen optimisation, and per-epoch relabelling by the latent
classifier."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cvae import CvaeModel, synthesize_semantic
from .datamodel import fork_rng
from .embednet import (EmbedModel, TrainConfig, UnseenPool, classifier_logits,
                       fit_embedding, seen_training_arrays)
from .numkernel import as_matrix

logger = logging.getLogger(__name__)


@dataclass
class KmeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)


def _sq_dists(x, centers):
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, n_clusters, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.asarray(centers))[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.asarray(centers)


def kmeans(x, n_clusters: int, seed: int = 0, max_iter: int = 300) -> KmeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops at an assignment fixpoint or after ``max_iter`` iterations. A
    cluster left empty is re-seeded with the point farthest from its current
    center.
    """
    x = as_matrix(x)
    n = x.shape[0]
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n < n_clusters:
        raise ValueError(f"{n} points cannot fill {n_clusters} clusters")
    rng = fork_rng(seed, "kmeans")
    centers = _kmeans_pp(x, n_clusters, rng)
    dist = _sq_dists(x, centers)
    assign = np.argmin(dist, axis=1)
    history = [float(dist[np.arange(n), assign].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(n), assign]))
                centers[c] = x[far]
                assign[far] = c
        dist = _sq_dists(x, centers)
        new_assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    # exact inertia against the final centers (the expansion above can round)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return KmeansResult(centers, assign, inertia, n_iter, history)


def matched_accuracy(pred, truth) -> float:
    """Fraction correct under the best one-to-one relabelling of ``pred``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.size == 0:
        return 0.0
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((p_vals.size, t_vals.size))
    np.add.at(table, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / pred.size)


@dataclass
class PseudoState:
    labels: np.ndarray            # classifier slots s..s+u-1, one per unseen row
    semantics: np.ndarray         # synthesised k-dim features, row-aligned
    n_seen: int
    n_unseen: int
    revision: int = 0

    def __post_init__(self):
        self.check()

    def check(self):
        lo, hi = self.n_seen, self.n_seen + self.n_unseen
        if len(self.labels) and (self.labels.min() < lo or self.labels.max() >= hi):
            raise AssertionError("pseudo-label outside the unseen slot range")
        if len(self.labels) != len(self.semantics):
            raise AssertionError("pseudo-labels and synthesised semantics are misaligned")


def cluster_pool(x_unseen, n_seen: int, n_unseen: int, cvae: CvaeModel, seed: int = 0,
                 max_iter: int = 300, sample_semantics: bool = False) -> PseudoState:
    """Cluster unlabelled rows into ``n_unseen`` groups; cluster j becomes slot n_seen + j."""
    x = as_matrix(x_unseen)
    result = kmeans(x, n_unseen, seed=seed, max_iter=max_iter)
    sems = synthesize_semantic(cvae, x, sample=sample_semantics,
                               rng=fork_rng(seed, "synth") if sample_semantics else None)
    return PseudoState(n_seen + result.assignments.astype(np.int64), sems, n_seen, n_unseen)


def init_pseudo_labels(ds, cvae: CvaeModel, seed: int = 0, max_iter: int = 300,
                       sample_semantics: bool = False) -> PseudoState:
    return cluster_pool(ds.visual[ds.unseen_test], ds.s, ds.u, cvae, seed, max_iter,
                        sample_semantics)


def relabel(m: EmbedModel, x, n_seen: int) -> np.ndarray:
    """Argmax over the unseen output slots only; ties go to the lowest slot."""
    logits = classifier_logits(m, x)
    return n_seen + np.argmax(logits[:, n_seen:], axis=1)


def prune_pseudo_labels(m: EmbedModel, ds, state: PseudoState) -> PseudoState:
    if m.n_outputs != ds.s + ds.u:
        raise ValueError(f"classifier has {m.n_outputs} outputs; need {ds.s + ds.u}")
    labels = relabel(m, ds.visual[ds.unseen_test], ds.s)
    return PseudoState(labels, state.semantics, state.n_seen, state.n_unseen, state.revision + 1)


def fit_transductive(m: EmbedModel, x_seen, slot_seen, proto_seen, x_unseen,
                     state: PseudoState, cfg: TrainConfig, log_file=None, after_epoch=None):
    """Joint training on labelled seen rows and a pseudo-labelled unseen pool.

    After each epoch the classifier re-assigns the pseudo-labels, provided it
    agrees with the current ones on at least ``cfg.relabel_gate`` of the pool
    (0 relabels unconditionally). Returns (model, final PseudoState, history);
    each history record also carries ``agreement`` and ``churn`` (rows whose
    pseudo-label changed). ``log_file`` (an open text stream) receives one
    JSON line per epoch.
    """
    if cfg.mode != "transductive":
        raise ValueError("transductive training needs cfg.mode == 'transductive'")
    n_seen, n_unseen = state.n_seen, state.n_unseen
    if m.n_outputs != n_seen + n_unseen:
        raise ValueError(f"classifier has {m.n_outputs} outputs; need {n_seen + n_unseen}")
    x_unseen = as_matrix(x_unseen)
    if len(x_unseen) != len(state.labels):
        raise ValueError("pseudo-labels do not match the unseen pool")
    pool = UnseenPool(x_unseen, state.semantics, state.labels.copy())
    box = {"state": state}

    def relabel_pool(model, record):
        current = box["state"]
        proposed = relabel(model, x_unseen, n_seen)
        record["agreement"] = float(np.mean(proposed == current.labels))
        # an undertrained classifier would collapse the pool onto one slot,
        # so labels are only handed over once it reproduces the current ones
        if record["agreement"] >= cfg.relabel_gate:
            new = PseudoState(proposed, current.semantics, n_seen, n_unseen, current.revision + 1)
            record["churn"] = int(np.sum(new.labels != current.labels))
            box["state"] = new
            pool.labels = new.labels.copy()
        else:
            record["churn"] = 0
        if after_epoch is not None:
            after_epoch(model, record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    empty = len(x_unseen) == 0
    model, history = fit_embedding(m, x_seen, slot_seen, proto_seen, cfg,
                                   pool=None if empty else pool,
                                   after_epoch=after_epoch if empty else relabel_pool)
    return model, box["state"], history


def train_transductive(m: EmbedModel, ds, cvae: CvaeModel, cfg: TrainConfig,
                       state: PseudoState | None = None, log_file=None, after_epoch=None):
    """Transductive run on a Dataset: the seen-train split plus the unseen-test
    pool. The CVAE is used once, for the initial synthesised semantics, and is
    not updated."""
    if state is None:
        state = init_pseudo_labels(ds, cvae, seed=cfg.seed)
    x, slots, protos = seen_training_arrays(ds)
    return fit_transductive(m, x, slots, protos, ds.visual[ds.unseen_test], state, cfg,
                            log_file=log_file, after_epoch=after_epoch)
