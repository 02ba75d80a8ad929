import csv
import json

import numpy as np
import pytest

from holovae.cli import main
from holovae.fourier import SphericalSignal, dh_grid, write_signal_file
from holovae.model import ModelConfig, load_checkpoint
from holovae.so3 import as_rotation
from holovae.steerable import read_tensor_file, write_tensor_file
from holovae.synthetic import CLASS_NAMES, POINT_LABELS, make_dataset


def write_clouds(path, clouds, classes):
    with open(path, "w") as fh:
        fh.write("# synthetic clouds\n")
        for i, (c, y) in enumerate(zip(clouds, classes)):
            fh.write(f"> c{i} {CLASS_NAMES[y]}\n")
            for p, lab in zip(c.cartesian(), c.channel):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {lab}\n")


def write_json(path, d):
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Transform a small cloud set, then train a 4-epoch autoencoder on it."""
    d = tmp_path_factory.mktemp("cli")
    clouds, y = make_dataset(60, seed=11)
    write_clouds(d / "clouds.txt", clouds, y)
    zcfg = write_json(d / "zft.json", {"L": 2, "N": 4, "labels": list(POINT_LABELS)})
    assert main(["transform", "--mode", "zft", "--config", zcfg, "--in", str(d / "clouds.txt"), "--out", str(d / "all.hvst")]) == 0
    x, ids = read_tensor_file(d / "all.hvst")
    write_tensor_file(d / "train.hvst", x[:50], ids[:50])
    write_tensor_file(d / "val.hvst", x[50:], ids[50:])
    cfg = ModelConfig(str(x.signature), [2, 1], [4, 4], z=2, c_init=4, epochs=4, batch_size=10, lr=0.01)
    mcfg = write_json(d / "model.json", cfg.to_dict())
    rc = main(["train", "--config", mcfg, "--train", str(d / "train.hvst"), "--val", str(d / "val.hvst"), "--out", str(d / "run")])
    assert rc == 0
    return d


class TestTransform:
    def test_outputs(self, work):
        x, ids = read_tensor_file(work / "all.hvst")
        assert len(x) == 60 and ids[0] == "c0"
        rows = list(csv.reader(open(work / "all.hvst.labels.csv")))
        assert rows[0] == ["id", "label"] and rows[1] == ["c0", "helix"]
        man = json.loads((work / "all.hvst.manifest.json").read_text())
        assert man["command"] == "transform" and len(man["inputs"]) == 1

    def test_amino_acid_signature(self, tmp_path):
        (tmp_path / "p.txt").write_text("0.1 0.2 0.3 C\n-0.2 0.0 0.4 N\n0.0 0.5 0.0 O\n0.3 -0.3 0.1 S\n")
        cfg = write_json(tmp_path / "c.json", {"L": 4, "N": 20, "labels": ["C", "N", "O", "S"]})
        assert main(["transform", "--mode", "zft", "--config", cfg, "--in", str(tmp_path / "p.txt"), "--out", str(tmp_path / "o.hvst")]) == 0
        x, _ = read_tensor_file(tmp_path / "o.hvst")
        assert x.signature.size == 940

    def test_empty_input_is_parse_error(self, tmp_path):
        (tmp_path / "p.txt").write_text("# nothing here\n")
        cfg = write_json(tmp_path / "c.json", {"L": 2, "N": 2, "labels": ["A"]})
        out = tmp_path / "o.hvst"
        assert main(["transform", "--mode", "zft", "--config", cfg, "--in", str(tmp_path / "p.txt"), "--out", str(out)]) == 3
        assert not out.exists()

    def test_malformed_and_out_of_ball(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"L": 2, "N": 2, "labels": ["A"]})
        (tmp_path / "bad.txt").write_text("0 0 0 A\n0.1 oops 0 A\n")
        assert main(["transform", "--mode", "zft", "--config", cfg, "--in", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 3
        assert ":2:" in capsys.readouterr().err
        (tmp_path / "far.txt").write_text("> p0\n0 0 0 A\n> p1\n0 0 0.5 A\n2 0 0 A\n")
        assert main(["transform", "--mode", "zft", "--config", cfg, "--in", str(tmp_path / "far.txt"), "--out", str(tmp_path / "o")]) == 4
        assert "p1" in capsys.readouterr().err

    def test_byte_identical(self, tmp_path):
        clouds, y = make_dataset(5, seed=2)
        write_clouds(tmp_path / "c.txt", clouds, y)
        cfg = write_json(tmp_path / "c.json", {"L": 3, "N": 4, "labels": list(POINT_LABELS)})
        for out in ("a.hvst", "b.hvst"):
            assert main(["transform", "--mode", "zft", "--config", cfg, "--in", str(tmp_path / "c.txt"), "--out", str(tmp_path / out)]) == 0
        assert (tmp_path / "a.hvst").read_bytes() == (tmp_path / "b.hvst").read_bytes()
        assert (tmp_path / "a.hvst.labels.csv").read_bytes() == (tmp_path / "b.hvst.labels.csv").read_bytes()

    def test_sft(self, tmp_path):
        theta, phi = dh_grid(4)
        T, P = np.meshgrid(theta, phi, indexing="ij")
        write_signal_file(tmp_path / "s.hvsg", [SphericalSignal(4, np.cos(T)[None]), SphericalSignal(4, np.ones((1, 8, 8)))])
        cfg = write_json(tmp_path / "c.json", {"L": 3})
        assert main(["transform", "--mode", "sft", "--config", cfg, "--in", str(tmp_path / "s.hvsg"), "--out", str(tmp_path / "o.hvst")]) == 0
        x, ids = read_tensor_file(tmp_path / "o.hvst")
        assert len(x) == 2 and x.signature.size == 16 and ids == ["0", "1"]


class TestTrain:
    def test_outputs(self, work):
        run = work / "run"
        assert {p.name for p in run.iterdir()} == {"best.ckpt", "last.ckpt", "history.csv", "manifest.json"}
        rows = list(csv.DictReader(open(run / "history.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1", "2", "3"]
        assert all(np.isfinite(float(r["val_loss"])) for r in rows)
        man = json.loads((run / "manifest.json").read_text())
        _, _, header = load_checkpoint(run / "best.ckpt")
        assert man["config"]["config_hash"] == header["config_hash"]

    def test_unreachable_degree_rejected(self, tmp_path, capsys):
        cfg = {"input_signature": "1x0 + 1x10", "degrees": [10, 10, 10], "channels": [2, 2, 2], "z": 1, "B": 3}
        path = write_json(tmp_path / "m.json", cfg)
        assert main(["train", "--config", path, "--train", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 4
        assert "10" in capsys.readouterr().err
        assert not (tmp_path / "r").exists()

    def test_signature_mismatch(self, work, tmp_path, capsys):
        cfg = ModelConfig("1x0 + 1x1", [1], [2], z=1)
        path = write_json(tmp_path / "m.json", cfg.to_dict())
        assert main(["train", "--config", path, "--train", str(work / "train.hvst"), "--out", str(tmp_path / "r")]) == 4
        assert "signature" in capsys.readouterr().err

    def test_resume_matches_uninterrupted(self, work, tmp_path):
        base = json.loads((work / "model.json").read_text())
        args = ["--train", str(work / "train.hvst"), "--val", str(work / "val.hvst")]
        short = write_json(tmp_path / "short.json", {**base, "epochs": 2})
        assert main(["train", "--config", short, *args, "--out", str(tmp_path / "a")]) == 0
        _, state, _ = load_checkpoint(tmp_path / "a" / "last.ckpt")
        assert len(state.history) == 2
        full = str(work / "model.json")
        assert main(["train", "--config", full, *args, "--out", str(tmp_path / "b"), "--resume", str(tmp_path / "a" / "last.ckpt")]) == 0
        m1, _, _ = load_checkpoint(tmp_path / "b" / "last.ckpt")
        m2, _, _ = load_checkpoint(work / "run" / "last.ckpt")
        assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m2.params)

    def test_resume_with_other_config_rejected(self, work, tmp_path):
        base = json.loads((work / "model.json").read_text())
        other = write_json(tmp_path / "o.json", {**base, "lr": 0.5})
        rc = main(["train", "--config", other, "--train", str(work / "train.hvst"), "--out", str(tmp_path / "r"),
                   "--resume", str(work / "run" / "last.ckpt")])
        assert rc == 4


class TestEvaluate:
    def test_report(self, work, tmp_path):
        out = tmp_path / "ev"
        rc = main(["evaluate", "--ckpt", str(work / "run" / "best.ckpt"), "--data", str(work / "all.hvst"),
                   "--labels", str(work / "all.hvst.labels.csv"), "--audit", "--out", str(out)])
        assert rc == 0
        rep = json.loads((out / "report.json").read_text())
        numbers = [v for v in rep.values() if isinstance(v, float)]
        assert numbers and all(np.isfinite(numbers))
        assert rep["equivariance"]["passed"] and rep["n_samples"] == 60
        rows = list(csv.reader(open(out / "embeddings.csv")))
        assert len(rows) == 61 and rows[1][:2] == ["c0", "helix"]

    def test_missing_labels_file(self, work, tmp_path, capsys):
        rc = main(["evaluate", "--ckpt", str(work / "run" / "best.ckpt"), "--data", str(work / "all.hvst"),
                   "--labels", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "ev")])
        assert rc == 4 and "nope.csv" in capsys.readouterr().err

    def test_signature_mismatch(self, work, tmp_path):
        (tmp_path / "p.txt").write_text("0.1 0.2 0.3 A\n")
        cfg = write_json(tmp_path / "c.json", {"L": 1, "N": 1, "labels": ["A"]})
        assert main(["transform", "--mode", "zft", "--config", cfg, "--in", str(tmp_path / "p.txt"), "--out", str(tmp_path / "o.hvst")]) == 0
        rc = main(["evaluate", "--ckpt", str(work / "run" / "best.ckpt"), "--data", str(tmp_path / "o.hvst"), "--out", str(tmp_path / "ev")])
        assert rc == 4


@pytest.fixture(scope="module")
def vae_ckpt(work):
    base = json.loads((work / "model.json").read_text())
    cfg = write_json(work / "vae.json", {**base, "variational": True, "beta": 0.1, "epochs": 2})
    assert main(["train", "--config", cfg, "--train", str(work / "train.hvst"), "--out", str(work / "vae")]) == 0
    return work / "vae" / "last.ckpt"


class TestSample:
    def test_zero_samples(self, vae_ckpt, tmp_path):
        assert main(["sample", "--ckpt", str(vae_ckpt), "-n", "0", "--out", str(tmp_path / "s")]) == 0
        x, ids = read_tensor_file(tmp_path / "s" / "samples.hvst")
        assert len(x) == 0 and not ids

    def test_seeded_samples_repeat(self, vae_ckpt, tmp_path):
        for d in ("a", "b"):
            assert main(["sample", "--ckpt", str(vae_ckpt), "-n", "3", "--seed", "7", "--out", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "samples.hvst").read_bytes()
        assert a == (tmp_path / "b" / "samples.hvst").read_bytes()
        x, _ = read_tensor_file(tmp_path / "a" / "samples.hvst")
        assert len(x) == 3 and np.all(np.isfinite(x.data))

    def test_rasterized_outputs(self, vae_ckpt, work, tmp_path):
        out = tmp_path / "s"
        rc = main(["sample", "--ckpt", str(vae_ckpt), "-n", "2", "--zft-config", str(work / "zft.json"), "--grid", "6", "--out", str(out)])
        assert rc == 0
        assert np.load(out / "samples_density.npy").shape == (2, 6, 6, 6, 2)

    def test_autoencoder_checkpoint_rejected(self, work, tmp_path, capsys):
        rc = main(["sample", "--ckpt", str(work / "run" / "best.ckpt"), "-n", "2", "--out", str(tmp_path / "s")])
        assert rc == 4 and "variational" in capsys.readouterr().err.lower()


class TestInterpolate:
    def test_endpoints_match_evaluate(self, work, tmp_path):
        ckpt = str(work / "run" / "best.ckpt")
        assert main(["evaluate", "--ckpt", ckpt, "--data", str(work / "all.hvst"), "--no-linear", "--out", str(tmp_path / "ev")]) == 0
        rc = main(["interpolate", "--ckpt", ckpt, "--data", str(work / "all.hvst"), "--a", "c3", "--b", "c17",
                   "--steps", "3", "--out", str(tmp_path / "ip")])
        assert rc == 0
        rec, ids = read_tensor_file(tmp_path / "ev" / "reconstructions.hvst")
        path, _ = read_tensor_file(tmp_path / "ip" / "interpolation.hvst")
        assert len(path) == 5
        emb = {r["id"]: r for r in csv.DictReader(open(tmp_path / "ev" / "embeddings.csv"))}
        # the path is decoded in the canonical frame; undo each endpoint's frame
        for step, cid in ((0, "c3"), (4, "c17")):
            F = np.array([[float(emb[cid][f"e{j}_{a}"]) for a in "xyz"] for j in (1, 2, 3)]).T
            canon = rec[ids.index(cid)].rotate(as_rotation(F.T))
            np.testing.assert_allclose(path[step].data, canon.data, atol=1e-9)
        rows = list(csv.reader(open(tmp_path / "ip" / "latents.csv")))
        assert [float(r[1]) for r in rows[1:]] == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_unknown_id(self, work, tmp_path):
        rc = main(["interpolate", "--ckpt", str(work / "run" / "best.ckpt"), "--data", str(work / "all.hvst"),
                   "--a", "c3", "--b", "zzz", "--steps", "1", "--out", str(tmp_path / "ip")])
        assert rc == 4


class TestExitCodes:
    def test_usage(self, capsys):
        assert main([]) == 2
        assert main(["sample", "--ckpt", "x", "-n", "-1", "--out", "o"]) == 2
        assert main(["transform", "--mode", "fft", "--config", "c", "--in", "i", "--out", "o"]) == 2
        capsys.readouterr()

    def test_invalid_json_is_parse_error(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        (tmp_path / "p.txt").write_text("0 0 0 A\n")
        assert main(["transform", "--mode", "zft", "--config", str(tmp_path / "c.json"), "--in", str(tmp_path / "p.txt"), "--out", str(tmp_path / "o")]) == 3

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"HVCK\x00\x01")
        assert main(["sample", "--ckpt", str(tmp_path / "c.ckpt"), "-n", "1", "--out", str(tmp_path / "s")]) == 3
