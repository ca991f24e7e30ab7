"""Nearest-prototype inference in the latent space and the ZSL / GZSL metrics."""

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import subsample_per_class
from .embednet import EmbedModel, encode_semantic, encode_visual, train_inductive

logger = logging.getLogger(__name__)


def _nearest(h, s, metric):
    if metric == "euclidean":
        d = (h * h).sum(axis=1)[:, None] - 2.0 * h @ s.T + (s * s).sum(axis=1)[None, :]
    elif metric == "cosine":
        hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        sn = s / np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-12)
        d = -hn @ sn.T
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return np.argmin(d, axis=1)


def predict_latent(h, s, candidates, metric="euclidean") -> np.ndarray:
    """Nearest row of ``s`` for every row of ``h``; ``s`` row i belongs to
    ``candidates[i]``. Candidates are scanned in ascending order so ties go
    to the lowest class index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate set")
    order = np.argsort(candidates, kind="stable")
    return candidates[order][_nearest(np.asarray(h), np.asarray(s)[order], metric)]


def predict(m: EmbedModel, x, candidates, prototypes, metric="euclidean") -> np.ndarray:
    """Label of the candidate whose encoded prototype is nearest to f_v(x).

    ``prototypes`` is the full class table; ``candidates`` selects its rows.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate set")
    s = encode_semantic(m, np.asarray(prototypes)[candidates])
    return predict_latent(encode_visual(m, x), s, candidates, metric)


def per_class_accuracy(pred, truth, classes) -> dict:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    out = {}
    for c in classes:
        mask = truth == c
        if not mask.any():
            warnings.warn(f"class {c} has no samples; excluded from the average", stacklevel=3)
            continue
        out[int(c)] = float(np.mean(pred[mask] == c))
    return out


def zsl_accuracy(pred, truth, classes) -> float:
    """Macro average of per-class top-1 accuracy (not the sample average)."""
    accs = per_class_accuracy(pred, truth, classes)
    return float(np.mean(list(accs.values()))) if accs else 0.0


def harmonic_mean(seen_acc: float, unseen_acc: float) -> float:
    if seen_acc + unseen_acc == 0:
        return 0.0
    return 2.0 * seen_acc * unseen_acc / (seen_acc + unseen_acc)


@dataclass
class EvalReport:
    mode: str
    per_class_accuracy: dict
    zsl_acc: float | None = None
    seen_acc: float | None = None
    unseen_acc: float | None = None
    harmonic: float | None = None
    unseen_as_seen: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"mode": self.mode,
               "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()}}
        if self.mode == "zsl":
            out["zsl_acc"] = self.zsl_acc
        else:
            out.update(S=self.seen_acc, U=self.unseen_acc, H=self.harmonic,
                       unseen_as_seen=self.unseen_as_seen)
        out["metadata"] = self.metadata
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            mode=d["mode"],
            per_class_accuracy={int(k): v for k, v in d["per_class_accuracy"].items()},
            zsl_acc=d.get("zsl_acc"), seen_acc=d.get("S"), unseen_acc=d.get("U"),
            harmonic=d.get("H"), unseen_as_seen=d.get("unseen_as_seen"),
            metadata=d.get("metadata", {}),
        )

    def to_text(self) -> str:
        if self.mode == "zsl":
            return f"{'ZSL_Acc':>8}\n{100 * self.zsl_acc:8.1f}\n"
        head = f"{'S':>6} {'U':>6} {'H':>6}"
        row = f"{100 * self.seen_acc:6.1f} {100 * self.unseen_acc:6.1f} {100 * self.harmonic:6.1f}"
        return f"{head}\n{row}\nunseen predicted as seen: {self.unseen_as_seen}\n"


def evaluate_zsl(m: EmbedModel, ds, metric="euclidean", metadata=None) -> EvalReport:
    """Unseen test rows against unseen prototypes only."""
    if len(ds.unseen_test) == 0:
        raise ValueError("unseen_test split is empty")
    truth = ds.labels[ds.unseen_test]
    pred = predict(m, ds.visual[ds.unseen_test], ds.unseen_classes, ds.prototypes, metric)
    accs = per_class_accuracy(pred, truth, ds.unseen_classes)
    return EvalReport("zsl", accs, zsl_acc=float(np.mean(list(accs.values()))),
                      metadata=dict(metadata or {}))


def evaluate_gzsl(m: EmbedModel, ds, metric="euclidean", metadata=None,
                  candidates=None) -> EvalReport:
    """Held-out seen and unseen test rows against every class prototype.

    ``candidates`` overrides the default candidate set (all classes).
    """
    if len(ds.seen_heldout) == 0 or len(ds.unseen_test) == 0:
        raise ValueError("GZSL evaluation needs non-empty seen_heldout and unseen_test splits")
    if candidates is None:
        candidates = np.concatenate([ds.seen_classes, ds.unseen_classes])
    rows = np.concatenate([ds.seen_heldout, ds.unseen_test])
    pred = predict(m, ds.visual[rows], candidates, ds.prototypes, metric)
    truth = ds.labels[rows]
    n_seen_rows = len(ds.seen_heldout)
    seen_accs = per_class_accuracy(pred[:n_seen_rows], truth[:n_seen_rows], ds.seen_classes)
    unseen_accs = per_class_accuracy(pred[n_seen_rows:], truth[n_seen_rows:], ds.unseen_classes)
    S = float(np.mean(list(seen_accs.values())))
    U = float(np.mean(list(unseen_accs.values())))
    confused = int(np.isin(pred[n_seen_rows:], ds.seen_classes).sum())
    return EvalReport("gzsl", {**seen_accs, **unseen_accs}, seen_acc=S, unseen_acc=U,
                      harmonic=harmonic_mean(S, U), unseen_as_seen=confused,
                      metadata=dict(metadata or {}))


@dataclass
class SweepRow:
    fraction: float
    mean_h: float
    max_deviation: float
    per_seed: dict


def sweep_fractions(ds, fractions, seeds, cfg, metric="euclidean",
                    match_steps: bool = True) -> list:
    """Inductive GZSL H for every (fraction, seed) on a per-class subsample.

    The seed drives both the subsample and the training run. Deviation is the
    largest |H_seed - mean H| for the fraction. With ``match_steps`` a
    subsampled run gets as many optimiser steps as the full-data run (its epoch
    count is scaled up); otherwise every fraction uses ``cfg.epochs``.
    """
    full_steps = cfg.epochs * math.ceil(len(ds.seen_train) / cfg.batch_size)
    table = []
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"fraction {frac} outside (0, 1]")
        hs = {}
        for seed in seeds:
            sub = ds if frac == 1.0 else subsample_per_class(ds, frac, seed)
            epochs = cfg.epochs
            if match_steps:
                epochs = math.ceil(full_steps / math.ceil(len(sub.seen_train) / cfg.batch_size))
            run_cfg = replace(cfg, seed=seed, mode="inductive", epochs=epochs)
            m = EmbedModel.init(sub.d, sub.k, sub.s, cfg.latent_dim, cfg.semantic_hidden, seed)
            m, _ = train_inductive(m, sub, run_cfg)
            hs[seed] = evaluate_gzsl(m, sub, metric).harmonic
        vals = np.array(list(hs.values()))
        table.append(SweepRow(float(frac), float(vals.mean()),
                              float(np.max(np.abs(vals - vals.mean()))), hs))
    return table
