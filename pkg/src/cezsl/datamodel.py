"""Datasets: in-memory representation, the on-disk binary layout, synthetic
generation, CSV conversion and per-class subsampling."""

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numkernel import DTYPE

logger = logging.getLogger(__name__)

FEATURES_MAGIC = b"ZSLF"
PROTOTYPES_MAGIC = b"ZSLP"
SPLIT_NAMES = ("seen_train", "seen_heldout", "unseen_test")


class DatasetError(ValueError):
    """Base class for every dataset load/validation failure."""


class MissingFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnknownClassError(DatasetError):
    pass


class SplitOverlapError(DatasetError):
    pass


class SplitLabelError(DatasetError):
    """A split row carries a label from the wrong side of the seen/unseen divide."""


class GenerationError(RuntimeError):
    pass


def fork_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one pipeline component.

    The same (seed, label) always yields the same stream, and distinct labels
    never share one.
    """
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    visual: np.ndarray
    labels: np.ndarray
    prototypes: np.ndarray
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    seen_train: np.ndarray
    seen_heldout: np.ndarray
    unseen_test: np.ndarray

    def __post_init__(self):
        for name, dtype in [("visual", DTYPE), ("prototypes", DTYPE), ("labels", np.int64),
                            ("seen_classes", np.int64), ("unseen_classes", np.int64),
                            ("seen_train", np.int64), ("seen_heldout", np.int64),
                            ("unseen_test", np.int64)]:
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        self.validate()

    @property
    def n(self) -> int:
        return self.visual.shape[0]

    @property
    def d(self) -> int:
        return self.visual.shape[1]

    @property
    def k(self) -> int:
        return self.prototypes.shape[1]

    @property
    def s(self) -> int:
        return len(self.seen_classes)

    @property
    def u(self) -> int:
        return len(self.unseen_classes)

    def validate(self) -> None:
        if self.visual.ndim != 2 or self.prototypes.ndim != 2:
            raise DimensionMismatchError("visual features and prototypes must be 2-D")
        if self.labels.shape != (self.n,):
            raise DimensionMismatchError(f"{self.labels.size} labels for {self.n} rows")
        n_classes = self.prototypes.shape[0]
        if n_classes != self.s + self.u:
            raise DimensionMismatchError(
                f"{n_classes} prototypes for {self.s} seen + {self.u} unseen classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise UnknownClassError("label outside the prototype table")
        all_classes = np.concatenate([self.seen_classes, self.unseen_classes])
        if np.unique(all_classes).size != all_classes.size:
            raise SplitOverlapError("a class is listed as both seen and unseen (or twice)")
        if all_classes.size and (all_classes.min() < 0 or all_classes.max() >= n_classes):
            raise UnknownClassError("class list references a class without a prototype")
        rows = np.concatenate([self.seen_train, self.seen_heldout, self.unseen_test])
        if np.unique(rows).size != rows.size:
            raise SplitOverlapError("a row appears in more than one split")
        if rows.size != self.n or (rows.size and (rows.min() < 0 or rows.max() >= self.n)):
            raise SplitOverlapError("splits must partition the rows exactly")
        seen_rows = np.concatenate([self.seen_train, self.seen_heldout])
        if not np.isin(self.labels[seen_rows], self.seen_classes).all():
            raise SplitLabelError("seen split row labelled with a non-seen class")
        if not np.isin(self.labels[self.unseen_test], self.unseen_classes).all():
            raise SplitLabelError("unseen split row labelled with a non-unseen class")
        if not (np.isfinite(self.visual).all() and np.isfinite(self.prototypes).all()):
            raise DatasetError("non-finite feature values")

    def summary(self) -> dict:
        return {"n": self.n, "d": self.d, "k": self.k, "s": self.s, "u": self.u}


# ---------------------------------------------------------------- binary I/O

def _write_matrix(path: Path, magic: bytes, mat: np.ndarray) -> None:
    rows, cols = mat.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def _read_matrix(path: Path, magic: bytes) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise DatasetError(f"{path.name}: bad magic (expected {magic!r})")
    rows, cols = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != 4 * rows * cols:
        raise DimensionMismatchError(
            f"{path.name}: header says {rows}x{cols} but payload holds {len(payload) / 4:g} values")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(rows, cols)


def _read_index_list(path: Path) -> np.ndarray:
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    try:
        return np.array([int(ln) for ln in lines if ln], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{path.name}: {exc}") from None


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_matrix(path / "features.bin", FEATURES_MAGIC, ds.visual)
    (path / "labels.u32").write_bytes(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    _write_matrix(path / "prototypes.bin", PROTOTYPES_MAGIC, ds.prototypes)
    for name, classes in [("seen_classes.txt", ds.seen_classes), ("unseen_classes.txt", ds.unseen_classes)]:
        (path / name).write_text("".join(f"{c}\n" for c in classes))
    splits = {name: getattr(ds, name).tolist() for name in SPLIT_NAMES}
    (path / "splits.json").write_text(json.dumps(splits))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    needed = ["features.bin", "labels.u32", "prototypes.bin", "seen_classes.txt",
              "unseen_classes.txt", "splits.json"]
    for name in needed:
        if not (path / name).is_file():
            raise MissingFileError(f"{path / name} not found")
    visual = _read_matrix(path / "features.bin", FEATURES_MAGIC)
    raw_labels = (path / "labels.u32").read_bytes()
    if len(raw_labels) != 4 * visual.shape[0]:
        raise DimensionMismatchError(
            f"labels.u32 holds {len(raw_labels) / 4:g} labels for {visual.shape[0]} rows")
    labels = np.frombuffer(raw_labels, dtype="<u4").astype(np.int64)
    prototypes = _read_matrix(path / "prototypes.bin", PROTOTYPES_MAGIC)
    try:
        splits = json.loads((path / "splits.json").read_text())
        split_arrays = {name: np.asarray(splits[name], dtype=np.int64) for name in SPLIT_NAMES}
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"splits.json: {exc}") from None
    return Dataset(visual, labels, prototypes,
                   _read_index_list(path / "seen_classes.txt"),
                   _read_index_list(path / "unseen_classes.txt"),
                   **split_arrays)


def convert_csv(features_csv, prototypes_csv, out_dir) -> Dataset:
    """Build the binary layout from two CSV files.

    ``features_csv`` has a header row ``label,split,<feature columns...>`` with
    ``split`` one of seen_train / seen_heldout / unseen_test. ``prototypes_csv``
    has a header ``class,<prototype columns...>`` and one row per class index,
    covering 0..C-1. Classes seen in a seen_* split become the seen classes,
    those in unseen_test the unseen classes.
    """
    labels, splits, rows = [], [], []
    with open(features_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["label", "split"]:
            raise DatasetError("features CSV must start with columns label,split")
        for i, rec in enumerate(reader):
            if len(rec) != len(header):
                raise DimensionMismatchError(f"features CSV row {i + 2} has {len(rec)} fields")
            if rec[1] not in SPLIT_NAMES:
                raise DatasetError(f"features CSV row {i + 2}: unknown split {rec[1]!r}")
            labels.append(int(rec[0]))
            splits.append(rec[1])
            rows.append([float(v) for v in rec[2:]])
    with open(prototypes_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "class":
            raise DatasetError("prototypes CSV must start with column class")
        proto = {}
        for rec in reader:
            if len(rec) != len(header):
                raise DimensionMismatchError("ragged prototypes CSV")
            proto[int(rec[0])] = [float(v) for v in rec[1:]]
    if sorted(proto) != list(range(len(proto))):
        raise UnknownClassError("prototype class indices must cover 0..C-1")
    labels = np.asarray(labels, dtype=np.int64)
    splits = np.asarray(splits)
    seen = np.unique(labels[splits != "unseen_test"])
    unseen = np.unique(labels[splits == "unseen_test"])
    ds = Dataset(
        np.asarray(rows, dtype=np.float32).astype(DTYPE).reshape(len(rows), -1),
        labels,
        np.asarray([proto[c] for c in range(len(proto))], dtype=np.float32).astype(DTYPE),
        seen, unseen,
        **{name: np.flatnonzero(splits == name) for name in SPLIT_NAMES},
    )
    save_dataset(ds, out_dir)
    return ds


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    seen: int = 5
    unseen: int = 3
    visual_dim: int = 32
    prototype_dim: int = 8
    samples_per_class: int = 50
    spread: float = 0.05
    separation: float = 5.0
    seed: int = 0
    heldout_fraction: float = 0.2
    max_retries: int = 10_000
    prototype_rank: int | None = None

    def __post_init__(self):
        counts = (self.seen, self.unseen, self.visual_dim, self.prototype_dim, self.samples_per_class)
        if min(counts) < 1:
            raise ValueError("all SynthSpec counts must be >= 1")
        if not self.spread > 0:
            raise ValueError("spread must be positive")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must be in [0, 1)")
        if self.prototype_rank is not None and not 1 <= self.prototype_rank <= self.prototype_dim:
            raise ValueError("prototype_rank must be in [1, prototype_dim]")

    @property
    def rank(self) -> int:
        """Dimension of the attribute basis shared by all classes.

        Defaults to s - 1 (capped to k) so the seen prototypes span every
        class: unseen classes are combinations of attributes the seen
        classes exhibit.
        """
        if self.prototype_rank is not None:
            return self.prototype_rank
        return max(1, min(self.prototype_dim, self.seen - 1))


def _draw_prototypes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n_classes = spec.seen + spec.unseen
    r = spec.rank
    basis = rng.uniform(0.0, 1.0, size=(r, spec.prototype_dim))
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    accepted = []
    for _ in range(spec.max_retries):
        cand = rng.uniform(0.0, 3.0 * spec.separation, size=r) @ basis
        if all(np.linalg.norm(cand - p) >= spec.separation for p in accepted):
            accepted.append(cand)
            if len(accepted) == n_classes:
                return np.stack(accepted)
    raise GenerationError(
        f"could not place {n_classes} prototypes {spec.separation} apart in "
        f"{spec.prototype_dim} dims after {spec.max_retries} draws")


def heldout_split(labels, classes, fraction: float, rng: np.random.Generator):
    """Split rows of ``classes`` into (train, heldout), holding out
    round(fraction * n_c) rows of each class but always keeping one for training."""
    train, held = [], []
    for c in classes:
        rows = rng.permutation(np.flatnonzero(labels == c))
        n_held = min(int(round(fraction * rows.size)), max(rows.size - 1, 0))
        held.extend(rows[:n_held])
        train.extend(rows[n_held:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(held, dtype=np.int64))


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Gaussian clusters around a fixed random linear image of each prototype.

    Prototypes are non-negative combinations of a shared random attribute
    basis (see ``SynthSpec.rank``); the map has non-negative entries. Both
    prototypes and class centers are then translated per dimension so the
    smallest class value sits at zero (plus a 3-spread margin for features),
    which keeps features non-negative like post-ReLU CNN activations without
    a large shared offset. Values are rounded to float32 so the dataset
    survives a save/load cycle unchanged.
    """
    rng = fork_rng(spec.seed, "data")
    prototypes = _draw_prototypes(spec, rng)
    # translate so every attribute's smallest class value is zero
    prototypes = prototypes - prototypes.min(axis=0)
    mapping = rng.uniform(0.0, 2.0 / spec.prototype_dim, size=(spec.visual_dim, spec.prototype_dim))
    n_classes = spec.seen + spec.unseen
    labels = np.repeat(np.arange(n_classes), spec.samples_per_class)
    centers = prototypes @ mapping.T
    # same per-dimension translation for features, leaving a 3-sigma margin above zero
    centers = centers - centers.min(axis=0) + 3.0 * spec.spread
    visual = centers[labels] + rng.normal(0.0, 1.0, size=(labels.size, spec.visual_dim)) * spec.spread
    seen = np.arange(spec.seen)
    unseen = np.arange(spec.seen, n_classes)
    train, held = heldout_split(labels, seen, spec.heldout_fraction, rng)
    return Dataset(
        visual.astype(np.float32).astype(DTYPE),
        labels,
        prototypes.astype(np.float32).astype(DTYPE),
        seen, unseen, train, held, np.flatnonzero(np.isin(labels, unseen)),
    )


# ---------------------------------------------------------------- utilities

def class_means(visual, labels, classes) -> np.ndarray:
    visual = np.asarray(visual, dtype=DTYPE)
    labels = np.asarray(labels)
    out = np.empty((len(classes), visual.shape[1]), dtype=DTYPE)
    for i, c in enumerate(classes):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no samples")
        out[i] = visual[mask].mean(axis=0)
    return out


def subsample_per_class(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ceil(fraction * n_c) random seen-train rows of every seen class.

    Dropped rows are removed from the dataset entirely (and the remaining rows
    re-indexed) so the three splits still partition the rows.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    rng = fork_rng(seed, "subsample")
    train_labels = ds.labels[ds.seen_train]
    keep = []
    for c in ds.seen_classes:
        rows = ds.seen_train[train_labels == c]
        if rows.size == 0:
            raise ValueError(f"seen class {c} has no training rows")
        n_keep = math.ceil(fraction * rows.size - 1e-9)
        keep.append(rng.choice(rows, size=n_keep, replace=False))
    keep = np.sort(np.concatenate(keep))
    retained = np.sort(np.concatenate([keep, ds.seen_heldout, ds.unseen_test]))
    new_index = np.full(ds.n, -1, dtype=np.int64)
    new_index[retained] = np.arange(retained.size)
    return replace(
        ds,
        visual=ds.visual[retained],
        labels=ds.labels[retained],
        seen_train=new_index[keep],
        seen_heldout=new_index[ds.seen_heldout],
        unseen_test=new_index[ds.unseen_test],
    )


def standardize(ds: Dataset) -> Dataset:
    """Per-dimension standardisation using seen-train statistics. Off by default."""
    ref = ds.visual[ds.seen_train]
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd[sd == 0] = 1.0
    return replace(ds, visual=(ds.visual - mu) / sd)
