from __future__ import annotations

import hashlib
import json
import math

import numpy as np
import pytest

from uvtomo import io
from uvtomo.cli import ConfigError, ExperimentConfig, load_config, run
from uvtomo.forward import ProjectionStack
from uvtomo.model import PointSourceModel


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# file formats


def test_stack_round_trip(tmp_path):
    imgs = np.random.default_rng(0).standard_normal((3, 5, 5)).astype(np.float32).astype(float)
    st = ProjectionStack(imgs, 0.02, 0.5, seed=42)
    io.write_stack(tmp_path / "s.uvts", st)
    back = io.read_stack(tmp_path / "s.uvts")
    np.testing.assert_array_equal(back.images, imgs)
    assert (back.delta, back.noise_sigma, back.seed) == (0.02, 0.5, 42)
    raw = (tmp_path / "s.uvts").read_bytes()
    assert raw[:4] == b"UVTS" and len(raw) == io.STACK_HEADER.size + 3 * 25 * 4
    # u is the fastest index on disk
    first = np.frombuffer(raw[io.STACK_HEADER.size: io.STACK_HEADER.size + 20], dtype="<f4")
    np.testing.assert_array_equal(first, imgs[0, :5, 0].astype(np.float32))
    chunks = list(io.iter_stack(tmp_path / "s.uvts", chunk=2))
    assert [c.L for c in chunks] == [2, 1]


def test_stack_without_seed(tmp_path):
    io.write_stack(tmp_path / "s.uvts", ProjectionStack(np.zeros((1, 3, 3)), 0.1))
    assert io.read_stack_header(tmp_path / "s.uvts")["seed"] is None


def test_corrupt_files_are_rejected(tmp_path):
    io.write_stack(tmp_path / "s.uvts", ProjectionStack(np.zeros((2, 3, 3)), 0.1))
    raw = (tmp_path / "s.uvts").read_bytes()
    (tmp_path / "short.uvts").write_bytes(raw[:-4])
    (tmp_path / "magic.uvts").write_bytes(b"XXXX" + raw[4:])
    for name in ("short.uvts", "magic.uvts"):
        with pytest.raises(io.FormatError):
            io.read_stack(tmp_path / name)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(io.FormatError):
        io.read_json(tmp_path / "bad.json")


def test_volume_round_trip(tmp_path):
    vol = np.random.default_rng(1).random((5, 5, 5)).astype(np.float32).astype(float)
    io.write_volume(tmp_path / "v.uvtv", vol, 2, 0.1)
    back, hw, vs = io.read_volume(tmp_path / "v.uvtv")
    np.testing.assert_array_equal(back, vol)
    assert (hw, vs) == (2, 0.1)


def test_columns_round_trip(tmp_path):
    x = np.random.default_rng(2).standard_normal(7)
    io.write_columns(tmp_path / "c.csv", {"t": np.arange(7.0), "value": x})
    back = io.read_columns(tmp_path / "c.csv")
    np.testing.assert_array_equal(back["value"], x)


def test_json_infinity():
    assert json.loads(io.dumps({"snr": math.inf}))["snr"] == "inf"


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(K=4, snr_db=-6.0, debias=True)
    (tmp_path / "c.json").write_text(io.dumps(cfg.to_dict()))
    back = load_config(tmp_path / "c.json", {"L": "50"})
    assert back.K == 4 and back.snr_db == -6.0 and back.debias is True and back.L == 50
    assert back.snr_ratio == pytest.approx(10**-0.6)
    assert load_config(None, {"snr": "inf"}).snr == math.inf


@pytest.mark.parametrize("bad", [{"K": 0}, {"delta": -1}, {"nope": 1}, {"L": "many"}, {"debias": "maybe"}])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


# ---------------------------------------------------------------------------
# commands


def test_simulate_is_deterministic(tmp_path, capsys):
    args = ["simulate", "--K", "5", "--L", "100", "--seed", "7", "--snr", "1.0"]
    assert run(args + ["--output", str(tmp_path / "a"), "--export-frame", "0"]) == 0
    assert run(args + ["--output", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a" / "stack.uvts") == digest(tmp_path / "b" / "stack.uvts")
    assert digest(tmp_path / "a" / "model.json") == digest(tmp_path / "b" / "model.json")
    assert (tmp_path / "a" / "frame_0.csv").exists()
    assert io.read_stack_header(tmp_path / "a" / "stack.uvts")["L"] == 100


def test_noiseless_simulation_records_zero_sigma(tmp_path, capsys):
    assert run(["simulate", "--L", "3", "--snr", "inf", "--output", str(tmp_path)]) == 0
    assert io.read_stack_header(tmp_path / "stack.uvts")["noise_sigma"] == 0.0
    assert "noise sigma: 0.0" in capsys.readouterr().out


def test_zero_image_stack_gives_zero_curves(tmp_path, capsys):
    io.write_stack(tmp_path / "empty.uvts", ProjectionStack(np.zeros((0, 21, 21)), 0.05, 0.3))
    assert run(["features", "--stack", str(tmp_path / "empty.uvts"), "--N-k", "16", "--N-phi", "16",
                "--output", str(tmp_path / "f")]) == 0
    for name in ("b1.csv", "b2.csv", "mu.csv", "c.csv"):
        assert np.all(io.read_columns(tmp_path / "f" / name)["value"] == 0)


def test_features_against_model_and_grid_mismatch(tmp_path, capsys):
    out = tmp_path / "sim"
    assert run(["simulate", "--K", "1", "--L", "2000", "--M", "50", "--max-radius", "0.3", "--seed", "3",
                "--output", str(out)]) == 0
    assert run(["features", "--stack", str(out / "stack.uvts"), "--analytic", str(out / "model.json"),
                "--K", "1", "--output", str(tmp_path / "f")]) == 0
    meta = io.read_json(tmp_path / "f" / "features.json")
    assert meta["mu_error"] < 0.05
    ref = tmp_path / "ref.csv"
    t = np.linspace(0, 1, 10)
    io.write_columns(ref, {"t": t, "mu": t, "c": t})
    code = run(["features", "--stack", str(out / "stack.uvts"), "--analytic", str(ref), "--output", str(tmp_path / "g")])
    assert code == 2
    assert "t-grid" in capsys.readouterr().err


@pytest.fixture(scope="module")
def analytic_features_dir(tmp_path_factory):
    from uvtomo.features import analytic_features, default_t_grid
    from uvtomo.model import Rng, random_model

    d = tmp_path_factory.mktemp("feat")
    model = random_model(3, None, 0.05, Rng(0).child("model"))
    model.save(d / "model.json")
    mu, c = analytic_features(model, default_t_grid())
    io.write_columns(d / "mu.csv", {"t": mu.t_grid, "value": mu.values})
    io.write_columns(d / "c.csv", {"t": c.t_grid, "value": c.values})
    return d


def test_reconstruct_and_evaluate(analytic_features_dir, tmp_path, capsys):
    d = analytic_features_dir
    assert run(["reconstruct", "--features", str(d), "--model", str(d / "model.json"), "--K", "3",
                "--max-iters", "30", "--restarts", "2", "--output", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "radial targets sum to 3.0 (K = 3)" in out
    vol, hw, vs = io.read_volume(tmp_path / "density.uvtv")
    assert vol.shape == (11, 11, 11) and vol.sum() == pytest.approx(3.0, rel=1e-5)
    trace = io.read_columns(tmp_path / "trace.csv")
    assert np.all(np.diff(trace["objective"]) <= 0)
    assert run(["evaluate", "--centers", str(tmp_path / "centers.json"), "--model", str(d / "model.json"),
                "--output", str(tmp_path / "ev")]) == 0
    rep = io.read_json(tmp_path / "ev" / "report.json")
    assert rep["threshold"] == 10.0 and isinstance(rep["success"], bool)


def test_small_grid_warns(analytic_features_dir, tmp_path, capsys):
    d = analytic_features_dir
    assert run(["reconstruct", "--features", str(d), "--model", str(d / "model.json"), "--M-r", "1",
                "--max-iters", "5", "--restarts", "1", "--output", str(tmp_path)]) == 0
    assert "true centers fall outside the reconstruction grid" in capsys.readouterr().err


def test_evaluate_identical_and_rotated(tmp_path, capsys):
    x = np.array([[0.1, 0.2, 0.0], [-0.2, 0.1, 0.3], [0.0, -0.3, 0.1]])
    PointSourceModel(x, 0.05).save(tmp_path / "m.json")
    io.write_json(tmp_path / "same.json", {"centers": x})
    c, s = math.cos(0.7), math.sin(0.7)
    rot = x @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    io.write_json(tmp_path / "rot.json", {"centers": rot})
    far = x * 100.0
    io.write_json(tmp_path / "far.json", {"centers": far})
    for name, ok in (("same.json", True), ("rot.json", True), ("far.json", False)):
        assert run(["evaluate", "--centers", str(tmp_path / name), "--model", str(tmp_path / "m.json"),
                    "--voxel-size", "0.02", "--output", str(tmp_path / name[:-5])]) == 0
        rep = io.read_json(tmp_path / name[:-5] / "report.json")
        assert rep["success"] is ok
        if ok:
            assert rep["rmsd"] < 1e-9


def test_exit_codes(tmp_path, capsys):
    assert run(["simulate", "--K", "0", "--output", str(tmp_path)]) == 2
    assert run(["features", "--stack", str(tmp_path / "missing.uvts"), "--output", str(tmp_path)]) == 4
    with pytest.raises(SystemExit):
        run(["ablate", "--axis", "bogus", "--values", "1"])


def test_ablate_command(tmp_path, capsys):
    assert run(["ablate", "--axis", "grid", "--values", "20", "40", "--L", "20", "--M", "20", "--delta", "0.025",
                "--ablate-seeds", "2", "--output", str(tmp_path)]) == 0
    text = (tmp_path / "ablation.csv").read_text().splitlines()
    assert text[0] == "axis,value,seed,mu_error,c_error" and len(text) == 5
    assert "grid=20" in capsys.readouterr().out
