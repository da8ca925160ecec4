import json
import struct

import numpy as np
import pytest

from bimpala import io
from bimpala import training as tr
from bimpala.cli import main
from bimpala.network import NetConfig, init_network


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    net = init_network(NetConfig(), 3)
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, net, seed=3, provenance={"note": "x"})
    back, manifest = io.read_checkpoint(path)
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)
    assert manifest["seed"] == 3 and manifest["format_version"] == io.FORMAT_VERSION
    io.save_checkpoint(tmp_path / "again.ckpt", back, seed=3, provenance={"note": "x"})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    seeds = tr.eval_seeds(5)
    assert tr.evaluate_policy(net, seeds, 30).per_seed == tr.evaluate_policy(back, seeds, 30).per_seed


def test_checkpoint_header_and_blob_length(tmp_path):
    net = init_network(NetConfig(), 0)
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, net)
    data = path.read_bytes()
    magic, version, mlen = struct.unpack_from("<4sIQ", data)
    assert magic == b"BLRL" and version == 1
    manifest = json.loads(data[16 : 16 + mlen])
    n_values = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    assert len(data) - 16 - mlen == 8 * n_values


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        io.load_checkpoint(p)


def test_csv_format(tmp_path):
    p = tmp_path / "t.csv"
    io.write_csv(p, ["a", "b", "c"], [[1, 0.1, "x"], [2, float("nan"), "y,z"]])
    text = p.read_bytes().decode()
    assert "\r" not in text and text.endswith("\n")
    assert text.splitlines()[1] == "1,0.10000000000000001,x"
    assert float(text.splitlines()[1].split(",")[1]) == 0.1
    header, rows = io.read_csv(p)
    assert header == ["a", "b", "c"] and rows[1][2] == "y,z"


def test_pgm(tmp_path):
    img = np.arange(12.0).reshape(3, 4)
    io.write_pgm(tmp_path / "m.pgm", img)
    pix = io.read_pgm(tmp_path / "m.pgm")
    assert pix.shape == (3, 4) and pix.min() == 0 and pix.max() == 255
    side = json.loads((tmp_path / "m.json").read_text())
    assert side["min"] == 0.0 and side["max"] == 11.0


# --- CLI ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--steps", "4", "--eval-every", "2", "--eval-seeds", "2", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "model.ckpt").exists()
    header, rows = io.read_csv(trained / "metrics.csv")
    assert "wall_seconds" not in header and len(rows) == 2
    flags = json.loads((trained / "run_train.json").read_text())
    assert flags["seed"] == 5 and flags["command"] == "train"


def test_steps_zero_is_fresh_init(tmp_path):
    main(["train", "--steps", "0", "--seed", "9", "--eval-seeds", "1", "--out", str(tmp_path)])
    net = io.load_checkpoint(tmp_path / "model.ckpt")
    fresh = init_network(NetConfig(), 9)
    assert all(np.array_equal(net.params[k], fresh.params[k]) for k in fresh.params)


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["train", "--out", "x", "--mode", "sgd"],
        ["ablate", "--out", "x", "--ckpt", "m", "--k-list", "1,a"],
        ["frobnicate"],
        ["decompose", "--out", "x", "--ckpt", "m"],
    ],
)
def test_bad_flags_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_unknown_probe_layer_exit_2(trained, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["probe", "--ckpt", str(trained / "model.ckpt"), "--layer", "nope", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "seq0.res0" in capsys.readouterr().err


def test_k_too_large_exit_2(trained, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--ckpt", str(trained / "model.ckpt"), "--target", "conv", "--k-list", "999", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_probe_layer_mismatch_exit_2(trained, tmp_path):
    ck = str(trained / "model.ckpt")
    main(["probe", "--ckpt", ck, "--layer", "seq0.res1,flatten", "--n-per-class", "8", "--epochs", "5", "--out", str(tmp_path)])
    for probe, layer in (("probe_seq0.res1.json", "seq1.res0"), ("probe_flatten.json", None)):
        argv = ["decompose", "--ckpt", ck, "--probe", str(tmp_path / probe), "--out", str(tmp_path / "d")]
        if layer:
            argv += ["--layer", layer]
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_probe_rows_and_range(trained, tmp_path):
    main(["probe", "--ckpt", str(trained / "model.ckpt"), "--layer", "all", "--n-per-class", "8", "--epochs", "5", "--out", str(tmp_path)])
    header, rows = io.read_csv(tmp_path / "probe_f1.csv")
    assert header == ["layer", "f1", "accuracy"]
    assert [r[0] for r in rows] == NetConfig().layer_names
    assert all(0.0 <= float(r[1]) <= 1.0 for r in rows)


def test_decompose_outputs(trained, tmp_path):
    ck = str(trained / "model.ckpt")
    main(["probe", "--ckpt", ck, "--layer", "seq0.res1", "--n-per-class", "8", "--epochs", "5", "--out", str(tmp_path / "p")])
    d = tmp_path / "d"
    main(["decompose", "--ckpt", ck, "--probe", str(tmp_path / "p" / "probe_seq0.res1.json"), "--m-components", "3", "--out", str(d)])
    assert len(list(d.glob("map_*.pgm"))) == 6
    for name in ("singular_values.csv", "spectrum.csv", "importance.csv"):
        assert (d / name).exists()
    a = tmp_path / "a"
    main(["decompose", "--ckpt", ck, "--action", "left", "--out", str(a)])
    header, rows = io.read_csv(a / "spectrum.csv")
    assert len(rows) == 4 * NetConfig().flat_dim
    assert {r[1] for r in rows[:4]} == {"up", "down", "left", "right"}


def test_ablate_row_count(trained, tmp_path):
    ck = str(trained / "model.ckpt")
    main(["ablate", "--ckpt", ck, "--target", "fc", "--target", "conv", "--k-list", "1,full", "--seeds", "2", "--step-cap", "10", "--out", str(tmp_path)])
    header, rows = io.read_csv(tmp_path / "ablation.csv")
    assert len(rows) == 4
    full = [r for r in rows if r[1] == "full"]
    assert all(r[5] == "1" for r in full)  # identical trajectories to the baseline


def test_report(trained, tmp_path):
    main(["report", "--run", str(trained), "--out", str(tmp_path)])
    assert "metrics.csv" in (tmp_path / "report.md").read_text()
