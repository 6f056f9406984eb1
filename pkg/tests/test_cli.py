import json
import os
import re

import numpy as np
import pytest

from compseg import netpbm
from compseg.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "c"
    assert main(["gen-data", "--out", str(d), "--count", "12", "--size", "32", "--seed", "4",
                 "--hole-prob", "0", "--fuzz", "2"]) == EXIT_OK
    return d


def first_json(text):
    return json.loads(text.splitlines()[0])


def test_gen_data_is_bytewise_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--count", "10", "--size", "32",
                     "--seed", "42", "--hole-prob", "0"]) == EXIT_OK
    cfg = first_json(capsys.readouterr().out)
    assert cfg["command"] == "gen-data" and cfg["seed"] == 42
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "splits.csv" in a and "images/00009.ppm" in a


def test_gen_data_rejects_size_not_multiple_of_16(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--size", "100"]) == EXIT_INVALID
    assert not (tmp_path / "x").exists()


def test_gen_data_hole_prob_one(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "6", "--size", "64", "--hole-prob", "1.0"]) == 0
    for i in range(6):
        hole = netpbm.read_mask(tmp_path / "holes" / f"{i:05d}.pgm")
        mask = netpbm.read_mask(tmp_path / "masks" / f"{i:05d}.pgm")
        img = netpbm.read_ppm(tmp_path / "images" / f"{i:05d}.ppm")
        assert hole.any() and not (hole & (1 - mask)).any()
        assert img[:, hole[0] == 1].mean() > img[:, (mask[0] == 1) & (hole[0] == 0)].mean()


def test_unknown_flag_and_missing_subcommand():
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", "x", "--out", "y", "--bogus"])
    assert e.value.code == EXIT_INVALID
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_INVALID


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    assert "--schedule" in text and "step:40:0.1" in text and "--fold" in text


def test_train_defaults_and_modes(small_corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(small_corpus), "--out", str(out), "--epochs", "1",
                 "--channels", "4"]) == EXIT_OK
    cfg = first_json(capsys.readouterr().out)
    assert cfg["fold"] == 0 and cfg["mode"] == "complementary" and cfg["drop_every"] == 40
    assert (out / "last.cseg").exists() and (out / "train_log.csv").exists()
    assert main(["train", "--data", str(small_corpus), "--out", str(tmp_path / "fg"), "--epochs", "1",
                 "--channels", "4", "--mode", "fg_only", "--schedule", "step:40:0.1", "--lr", "1e-6"]) == 0
    cfg = first_json(capsys.readouterr().out)
    assert cfg["base_lr"] == 1e-6 and cfg["drop_factor"] == 0.1
    assert "L_back" not in open(tmp_path / "fg" / "train_log.csv").readline()


def test_train_validation_errors(small_corpus, tmp_path):
    base = ["train", "--data", str(small_corpus), "--out", str(tmp_path / "r"), "--channels", "4"]
    assert main(base + ["--schedule", "cosine"]) == EXIT_INVALID
    assert main(base + ["--fold", "7"]) == EXIT_INVALID
    assert main(base + ["--labeled-fraction", "0"]) == EXIT_INVALID
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == EXIT_INVALID


def test_eval_and_runtime_failure(small_corpus, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", "--data", str(small_corpus), "--out", str(run), "--epochs", "0", "--channels", "4"])
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run / "last.cseg"), "--data", str(small_corpus),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert 0 <= summary["DI"] <= 1 and "DI_fg_only" in summary
    (tmp_path / "bad.cseg").write_bytes(b"CSEG1\x05")
    assert main(["eval", "--ckpt", str(tmp_path / "bad.cseg"), "--data", str(small_corpus)]) == EXIT_FAILED


def test_gradcheck_routing_and_tolerance(capsys):
    assert main(["gradcheck", "--op", "adaptive_dilated_conv"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "rate_map" in out and "FAIL" not in out
    assert main(["gradcheck", "--op", "aac_forward", "--tol", "1e-12"]) == EXIT_FAILED
    assert main(["gradcheck", "--op", "nonsense"]) == EXIT_INVALID


def test_rate_map_fresh_checkpoint(small_corpus, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", "--data", str(small_corpus), "--out", str(run), "--epochs", "0", "--channels", "4"])
    args = ["rate-map", "--ckpt", str(run / "last.cseg"), "--image", str(small_corpus / "images" / "00000.ppm")]
    capsys.readouterr()
    assert main(args + ["--out-prefix", str(tmp_path / "a" / "r")]) == EXIT_OK
    text = capsys.readouterr().out
    ranges = [(float(a), float(b)) for a, b in re.findall(r"raw_min=(\S+) raw_max=(\S+)", text)]
    assert len(ranges) == 3
    # fresh rate layers: bias 1, tiny weights, so every map stays close to 1
    assert all(0.5 < lo <= hi < 1.5 for lo, hi in ranges)
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["r_kam1.pgm", "r_kam2.pgm", "r_kam3.pgm"]
    assert [netpbm.read(tmp_path / "a" / f).shape for f in files] == [(4, 4), (8, 8), (16, 16)]
    main(args + ["--out-prefix", str(tmp_path / "b" / "r")])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert main(args[:2] + [str(run / "last.cseg"), "--image", str(tmp_path / "none.ppm"),
                            "--out-prefix", "x"]) == EXIT_INVALID
