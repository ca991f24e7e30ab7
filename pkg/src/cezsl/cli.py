"""Command-line entry point: ``cezsl {synth,train,eval,sweep,convert}``.

Exit codes: 0 success, 2 configuration error, 3 data or model error.

Run config (JSON)::

    {
      "dataset": "path/to/dataset_dir",      # or "synth": {SynthSpec fields}
      "mode": "inductive" | "transductive",
      "seed": 0,
      "output_dir": "runs/demo",
      "train": {TrainConfig fields: epochs, batch_size, learning_rate, ...},
      "loss_weights": {"alpha1": 1.0, ..., "beta": 1e-4},
      "cvae": {"epochs": 300, "batch_size": 64, "learning_rate": 1e-3, "hidden": 512},
      "kmeans": {"max_iter": 300},
      "eval": {"metric": "euclidean"}
    }
"""

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from threadpoolctl import threadpool_info

from . import __version__
from .checkpoint import CheckpointError, load_params, save_params
from .cvae import CvaeConfig, CvaeModel, train_cvae
from .datamodel import (DatasetError, GenerationError, SynthSpec, convert_csv, generate_synthetic,
                        load_dataset, save_dataset)
from .embednet import EmbedModel, LossWeights, TrainConfig, train_inductive
from .evalkit import evaluate_gzsl, evaluate_zsl, sweep_fractions
from .transduce import init_pseudo_labels, train_transductive

logger = logging.getLogger("cezsl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
CONFIG_KEYS = {"dataset", "synth", "mode", "seed", "output_dir", "train", "loss_weights",
               "cvae", "kmeans", "eval"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str | None = None
    synth: SynthSpec | None = None
    mode: str = "inductive"
    seed: int = 0
    output_dir: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    kmeans_max_iter: int = 300
    metric: str = "euclidean"
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        # where a run is written does not change what it computes
        ident = {k: v for k, v in self.raw.items() if k != "output_dir"}
        blob = json.dumps(ident, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def load_data(self):
        if self.synth is not None:
            return generate_synthetic(self.synth)
        return load_dataset(self.dataset)


def _section(raw, name, cls, exclude=()):
    body = raw.get(name, {})
    if not isinstance(body, dict):
        raise ConfigError(f"'{name}' must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(body) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return body


def _set_path(raw: dict, dotted: str, value):
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: '{p}' is not an object")
    node[leaf] = value


def parse_config(raw: dict, overrides=()) -> RunConfig:
    """Validate a raw config dict; ``overrides`` are ``key.path=json`` strings."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_path(raw, key, value)
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if ("dataset" in raw) == ("synth" in raw):
        raise ConfigError("give exactly one of 'dataset' and 'synth'")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    mode = raw.get("mode", "inductive")
    try:
        synth = None
        if "synth" in raw:
            body = _section(raw, "synth", SynthSpec)
            synth = SynthSpec(**{"seed": seed, **body})
        train = _section(raw, "train", TrainConfig, exclude=("loss_weights", "mode", "seed"))
        weights = LossWeights(**_section(raw, "loss_weights", LossWeights))
        tcfg = TrainConfig(**train, loss_weights=weights, mode=mode, seed=seed)
        cvae = CvaeConfig(**_section(raw, "cvae", CvaeConfig, exclude=("seed",)), seed=seed)
        kmeans = raw.get("kmeans", {})
        if not isinstance(kmeans, dict) or set(kmeans) - {"max_iter"}:
            raise ConfigError("'kmeans' accepts only max_iter")
        metric = raw.get("eval", {}).get("metric", "euclidean")
        if metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown metric {metric!r}")
        return RunConfig(dataset=raw.get("dataset"), synth=synth, mode=mode, seed=seed,
                         output_dir=raw.get("output_dir", "run"), train=tcfg, cvae=cvae,
                         kmeans_max_iter=int(kmeans.get("max_iter", 300)), metric=metric, raw=raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides=()) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, overrides)


def run_metadata(cfg: RunConfig | None = None, **extra) -> dict:
    threads = sorted({info.get("num_threads") for info in threadpool_info()} - {None})
    meta = {"version": __version__, "threads": threads}
    if cfg is not None:
        meta.update(seed=cfg.seed, config_hash=cfg.config_hash(), mode=cfg.mode)
    meta.update(extra)
    return meta


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(seen=args.seen, unseen=args.unseen, visual_dim=args.visual_dim,
                         prototype_dim=args.prototype_dim,
                         samples_per_class=args.samples_per_class, spread=args.spread,
                         separation=args.separation, seed=args.seed,
                         heldout_fraction=args.heldout_fraction,
                         prototype_rank=args.prototype_rank)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out)
    print(json.dumps(ds.summary()))
    return EXIT_OK


def train_run(cfg: RunConfig, sample_semantics: bool = False):
    """Train per ``cfg`` and write checkpoints, the JSON-lines log and run.json.

    Returns the metadata dict that was written.
    """
    ds = cfg.load_data()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.synth is not None:
        save_dataset(ds, out / "data")
    t = cfg.train
    with open(out / "train_log.jsonl", "w") as log:
        if cfg.mode == "inductive":
            m = EmbedModel.init(ds.d, ds.k, ds.s, t.latent_dim, t.semantic_hidden, cfg.seed)
            m, history = train_inductive(m, ds, t)
            for rec in history:
                log.write(json.dumps({"stage": "embed", **rec}) + "\n")
        else:
            cv = CvaeModel.init(ds.d, ds.k, cfg.cvae.hidden, cfg.seed)
            cv, cv_hist = train_cvae(cv, ds, cfg.cvae)
            for epoch, loss in enumerate(cv_hist, 1):
                log.write(json.dumps({"stage": "cvae", "epoch": epoch, "loss": loss}) + "\n")
            save_params(out / "cvae.zslm", cv.params)
            state = init_pseudo_labels(ds, cv, seed=cfg.seed, max_iter=cfg.kmeans_max_iter,
                                       sample_semantics=sample_semantics)
            m = EmbedModel.init(ds.d, ds.k, ds.s + ds.u, t.latent_dim, t.semantic_hidden, cfg.seed)
            m, state, history = train_transductive(m, ds, cv, t, state=state)
            for rec in history:
                log.write(json.dumps({"stage": "embed", **rec}) + "\n")
            with open(out / "pseudo_labels.json", "w") as fh:
                json.dump({"revision": state.revision, "labels": state.labels.tolist()}, fh)
    save_params(out / "embed.zslm", m.params)
    final = history[-1]["total"] if history else None
    meta = run_metadata(cfg, final_epoch_loss=final, dataset=ds.summary(), config=cfg.raw)
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    meta = train_run(cfg, sample_semantics=args.sample)
    print(f"final epoch loss {meta['final_epoch_loss']!r} -> {cfg.output_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        m = EmbedModel.from_params(load_params(args.checkpoint))
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    ds = load_dataset(args.dataset)
    if m.visual_dim != ds.d or m.semantic_dim != ds.k:
        raise DatasetError(f"checkpoint expects d={m.visual_dim}, k={m.semantic_dim}; "
                           f"dataset has d={ds.d}, k={ds.k}")
    meta = run_metadata(checkpoint=str(args.checkpoint), dataset=str(args.dataset))
    if args.mode == "zsl":
        report = evaluate_zsl(m, ds, args.metric, meta)
    else:
        report = evaluate_gzsl(m, ds, args.metric, meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    if args.mode == "zsl":
        print(f"ZSL_Acc={report.zsl_acc:.4f}")
    else:
        print(f"H={report.harmonic:.4f}")
    return EXIT_OK


def write_sweep_csv(path, rows, seeds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "mean_H", "max_deviation"] + [f"H_seed_{s}" for s in seeds])
        for r in rows:
            w.writerow([repr(r.fraction), repr(r.mean_h), repr(r.max_deviation)]
                       + [repr(r.per_seed[s]) for s in seeds])


def _number_list(text, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}: {exc}") from exc


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    fractions = _number_list(args.fractions, float)
    seeds = _number_list(args.seeds, int)
    if not fractions or not seeds:
        raise ConfigError("need at least one fraction and one seed")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1]")
    rows = sweep_fractions(cfg.load_data(), fractions, seeds, cfg.train, cfg.metric,
                           match_steps=not args.fixed_epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out, rows, seeds)
    for r in rows:
        print(f"fraction {r.fraction:g}: mean H {r.mean_h:.4f} (max deviation {r.max_deviation:.4f})")
    return EXIT_OK


def cmd_convert(args) -> int:
    ds = convert_csv(args.features, args.prototypes, args.out)
    print(json.dumps(ds.summary()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cezsl", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    defaults = SynthSpec()
    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seen", type=int, default=defaults.seen)
    s.add_argument("--unseen", type=int, default=defaults.unseen)
    s.add_argument("--visual-dim", type=int, default=defaults.visual_dim)
    s.add_argument("--prototype-dim", type=int, default=defaults.prototype_dim)
    s.add_argument("--samples-per-class", type=int, default=defaults.samples_per_class)
    s.add_argument("--spread", type=float, default=defaults.spread)
    s.add_argument("--separation", type=float, default=defaults.separation)
    s.add_argument("--heldout-fraction", type=float, default=defaults.heldout_fraction)
    s.add_argument("--prototype-rank", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override a config entry, e.g. --set train.epochs=50")
    t.add_argument("--output-dir")
    t.add_argument("--sample", action="store_true",
                   help="draw synthesised semantics from the CVAE posterior instead of its mean")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate an embedding checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--mode", choices=("zsl", "gzsl"), default="gzsl")
    e.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="inductive H against the labelled fraction")
    w.add_argument("config")
    w.add_argument("--fractions", default="0.05,0.1,0.2,0.5,1.0")
    w.add_argument("--seeds", default="0,1,2")
    w.add_argument("--out", default="sweep.csv")
    w.add_argument("--set", action="append", default=[], metavar="KEY=JSON")
    w.add_argument("--fixed-epochs", action="store_true",
                   help="train every fraction for train.epochs instead of matching step counts")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("convert", help="CSV features + prototypes -> dataset directory")
    c.add_argument("--features", required=True)
    c.add_argument("--prototypes", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, GenerationError, OSError) as exc:
        # DatasetError and CheckpointError are ValueErrors too
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
