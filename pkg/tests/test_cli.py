import csv
import json

import numpy as np
import pytest

from cezsl.checkpoint import save_params
from cezsl.cli import ConfigError, main, parse_config
from cezsl.datamodel import load_dataset, save_dataset
from cezsl.evalkit import harmonic_mean, sweep_fractions

SMALL = {"seen": 3, "unseen": 2, "visual_dim": 6, "prototype_dim": 4, "samples_per_class": 12}


def write_config(path, **overrides):
    cfg = {"synth": SMALL, "mode": "inductive", "seed": 3, "output_dir": str(path.parent / "run"),
           "train": {"epochs": 3, "latent_dim": 16, "semantic_hidden": 12},
           "cvae": {"epochs": 3, "hidden": 8}}
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def test_synth_directory(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"n": 400, "d": 32, "k": 8, "s": 5, "u": 3}
    ds = load_dataset(tmp_path / "a")
    assert ds.summary() == summary
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    for name in ("features.bin", "labels.u32", "prototypes.bin", "splits.json",
                 "seen_classes.txt", "unseen_classes.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_bad_spec_is_config_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--spread", "0"]) == 2


def test_train_inductive_smoke(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "embed.zslm").read_bytes()[:4] == b"ZSLM"
    assert not (run / "cvae.zslm").exists()
    log = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]
    meta = json.loads((run / "run.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 16 and meta["threads"]


def test_train_transductive_writes_both(tmp_path):
    cfg = write_config(tmp_path / "c.json", mode="transductive")
    assert main(["train", str(cfg), "--set", "train.relabel_gate=0.0"]) == 0
    run = tmp_path / "run"
    assert (run / "embed.zslm").exists() and (run / "cvae.zslm").exists()
    stages = {json.loads(x)["stage"] for x in (run / "train_log.jsonl").read_text().splitlines()}
    assert stages == {"cvae", "embed"}
    labels = json.loads((run / "pseudo_labels.json").read_text())
    assert labels["revision"] == 3


def test_train_rerun_reproduces(tmp_path):
    cfg = write_config(tmp_path / "c.json", mode="transductive")
    reports = []
    for out in ("r1", "r2"):
        assert main(["train", str(cfg), "--output-dir", str(tmp_path / out)]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / out / "embed.zslm"), "--dataset",
                     str(tmp_path / out / "data"), "--out", str(tmp_path / out)]) == 0
        reports.append(json.loads((tmp_path / out / "report.json").read_text()))
    losses = [json.loads((tmp_path / o / "run.json").read_text())["final_epoch_loss"]
              for o in ("r1", "r2")]
    assert abs(losses[0] - losses[1]) <= 1e-12
    for r in reports:
        r["metadata"].pop("checkpoint")
        r["metadata"].pop("dataset")
    assert reports[0] == reports[1]


def test_eval_modes(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", str(cfg)]) == 0
    ck, data = str(tmp_path / "run" / "embed.zslm"), str(tmp_path / "run" / "data")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ck, "--dataset", data, "--out", str(tmp_path / "g")]) == 0
    printed = capsys.readouterr().out
    report = json.loads((tmp_path / "g" / "report.json").read_text())
    assert printed.strip() == f"H={report['H']:.4f}"
    assert report["H"] == pytest.approx(harmonic_mean(report["S"], report["U"]), abs=1e-12)
    assert (tmp_path / "g" / "report.txt").read_text().split()[:3] == ["S", "U", "H"]
    assert main(["eval", "--checkpoint", ck, "--dataset", data, "--mode", "zsl",
                 "--out", str(tmp_path / "z")]) == 0
    zsl = json.loads((tmp_path / "z" / "report.json").read_text())
    assert "zsl_acc" in zsl and not {"S", "U", "H"} & set(zsl)


def test_eval_oracle_fixture(tmp_path, capsys):
    from test_evalkit import identity_model, oracle_dataset
    save_dataset(oracle_dataset(np.random.default_rng(0)), tmp_path / "d")
    save_params(tmp_path / "m.zslm", identity_model(4).params)
    assert main(["eval", "--checkpoint", str(tmp_path / "m.zslm"), "--dataset",
                 str(tmp_path / "d"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == "H=1.0000"


def test_eval_dimension_mismatch(tmp_path):
    from test_evalkit import identity_model
    main(["synth", "--out", str(tmp_path / "d"), "--visual-dim", "5"])
    save_params(tmp_path / "m.zslm", identity_model(4).params)
    assert main(["eval", "--checkpoint", str(tmp_path / "m.zslm"), "--dataset",
                 str(tmp_path / "d"), "--out", str(tmp_path)]) == 3
    (tmp_path / "junk.zslm").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.zslm"), "--dataset",
                 str(tmp_path / "d"), "--out", str(tmp_path)]) == 3


def test_sweep_csv(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "sweep.csv"
    assert main(["sweep", str(cfg), "--fractions", "0.5", "--seeds", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and set(rows[0]) == {"fraction", "mean_H", "max_deviation", "H_seed_1"}
    assert main(["sweep", str(cfg), "--fractions", "0.05,0.5,1.0", "--seeds", "0,1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    table = sweep_fractions(parse_config(json.loads(cfg.read_text())).load_data(),
                            [0.05, 0.5, 1.0], [0, 1], parse_config(json.loads(cfg.read_text())).train)
    for rec, row in zip(rows, table):
        assert float(rec["fraction"]) == row.fraction
        assert float(rec["mean_H"]) == row.mean_h
        assert float(rec["max_deviation"]) == row.max_deviation
        assert [float(rec["H_seed_0"]), float(rec["H_seed_1"])] == [row.per_seed[0], row.per_seed[1]]
        assert 0.0 <= row.mean_h <= 1.0
    assert main(["sweep", str(cfg), "--fractions", "0,1.0", "--out", str(out)]) == 2


def test_convert(tmp_path):
    (tmp_path / "f.csv").write_text("label,split,f0,f1\n0,seen_train,0.5,1\n0,seen_heldout,0.25,2\n"
                                    "1,unseen_test,3,4\n")
    (tmp_path / "p.csv").write_text("class,a0,a1\n0,1,0\n1,0,1\n")
    assert main(["convert", "--features", str(tmp_path / "f.csv"), "--prototypes",
                 str(tmp_path / "p.csv"), "--out", str(tmp_path / "d")]) == 0
    assert load_dataset(tmp_path / "d").summary() == {"n": 3, "d": 2, "k": 2, "s": 1, "u": 1}
    assert main(["convert", "--features", str(tmp_path / "missing.csv"), "--prototypes",
                 str(tmp_path / "p.csv"), "--out", str(tmp_path / "e")]) == 3


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", str(bad)]) == 2
    assert main(["train", str(tmp_path / "absent.json")]) == 2
    both = write_config(tmp_path / "both.json", dataset=str(tmp_path))
    assert main(["train", str(both)]) == 2
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", str(cfg), "--set", "train.nope=1"]) == 2
    assert main(["train", str(cfg), "--set", "train.batch_size=1"]) == 2
    assert main(["train", str(cfg), "--set", "loss_weights.alpha1=-1"]) == 2
    assert main(["train", str(cfg), "--set", "mode=\"semi\""]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_missing_dataset_exit_3(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": str(tmp_path / "nowhere"),
                               "output_dir": str(tmp_path / "run")}))
    assert main(["train", str(cfg)]) == 3


def test_parse_config_rules():
    cfg = parse_config({"synth": {}, "seed": 7}, ["train.epochs=4", "eval.metric=cosine"])
    assert cfg.synth.seed == 7 and cfg.train.seed == 7 and cfg.cvae.seed == 7
    assert cfg.train.epochs == 4 and cfg.metric == "cosine"
    assert cfg.config_hash() != parse_config({"synth": {}, "seed": 8}).config_hash()
    with pytest.raises(ConfigError):
        parse_config({"synth": {}, "kmeans": {"n_init": 3}})
    with pytest.raises(ConfigError):
        parse_config({"synth": {}, "seed": -1})
