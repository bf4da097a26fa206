import csv
import json
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import cKDTree

from sdfcomplete.cli import main, parse_overrides, read_config_file, resolve_config
from sdfcomplete.extract import inference_lattice, lattice_points
from sdfcomplete.data import DESK_GRID
from sdfcomplete.trainer import load_checkpoint

TINY_CFG = """\
# tiny network for fast runs
profile = desk
hidden = 16
depth = 2
encoder.enc_channels = 4,4,8,8,8
encoder.dec_channels = 8, 8
encoder.d_se = 4
sampler.n_on = 150
sampler.n_off = 150
"""


def run_dir(root: Path, prefix: str) -> Path:
    [d] = [p for p in root.iterdir() if p.name.startswith(prefix)]
    return d


def only_new(root: Path, before: set) -> Path:
    [d] = [p for p in root.iterdir() if p not in before]
    return d


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 2-scene dataset and a short conditioned-mode training run shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    runs = root / "runs"
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["synth", "--out", str(runs), "--scenes", "2", "--seed", "5", "--gt_density", "50",
                 "--lidar.azimuth_step", "2"]) == 0
    ds = run_dir(runs, "synth-")
    assert main(["train", "--out", str(runs), "--config", str(root / "tiny.cfg"), "--dataset", str(ds),
                 "--max_steps", "10", "--epochs", "10"]) == 0
    return root, runs, ds, run_dir(runs, "train-")


def test_config_file_parsing_and_precedence(tmp_path):
    (tmp_path / "c.cfg").write_text("epochs = 7\nlearning_rate = 0.001  # comment\n\nweights.eikonal=10\n")
    values = read_config_file(tmp_path / "c.cfg")
    assert values == {"epochs": "7", "learning_rate": "0.001", "weights.eikonal": "10"}
    values.update(parse_overrides(["--epochs", "3", "--pe.include-xyz=true"]))
    cfg, run = resolve_config(values)
    assert cfg.epochs == 3 and cfg.learning_rate == 0.001 and cfg.weights.eikonal == 10.0
    assert cfg.pe.include_xyz is True and cfg.weights.normal == 100.0 and cfg.omega_0 == 30.0
    assert run["profile"] == "paper" and run["scenes"] == 50
    desk, _ = resolve_config({"profile": "desk"})
    assert desk.hidden == 64 and desk.omega_0 == 1.0
    assert resolve_config({"encoder.pruning_placement": "2"})[0].encoder.pruning_placement == 2
    assert resolve_config({"hidden_omega": "none"})[0].hidden_omega is None


def test_synth_is_deterministic_and_scene_count(tmp_path):
    runs = tmp_path / "runs"
    args = ["synth", "--out", str(runs), "--scenes", "3", "--seed", "2"]
    assert main(args) == 0
    d = run_dir(runs, "synth-seed2-")
    first = (d / "manifest.json").read_bytes()
    assert main(args) == 0
    assert (d / "manifest.json").read_bytes() == first
    man = json.loads(first)
    assert sorted(man["artifacts"]) == ["dataset.json"] + [f"scenes/scene_{i:03d}.json" for i in range(3)]
    assert man["command"] == "synth" and man["seed"] == 2 and man["output_dir"] == d.name


def test_synth_default_writes_fifty_scenes(tmp_out):
    assert main(["synth"]) == 0
    d = run_dir(tmp_out / "runs", "synth-seed0-")
    assert len(list((d / "scenes").glob("*.json"))) == 50
    assert len(json.loads((d / "dataset.json").read_text())["scenes"]) == 50


def test_errors_are_single_line_and_nonzero(tmp_path, capsys, workspace):
    _, runs, ds, tr = workspace
    cases = [
        ["synth", "--out", str(tmp_path), "--scenes", "0"],
        ["train", "--out", str(tmp_path), "--dataset", str(tmp_path / "missing")],
        ["train", "--out", str(tmp_path), "--dataset", str(ds), "--nonsense", "1"],
        ["train", "--out", str(tmp_path), "--dataset", str(ds), "--mode", "nerf"],
        ["complete", "--out", str(tmp_path), "--checkpoint", str(tr / "model.ckpt"), "--dataset", str(ds),
         "--resolution", "1"],
        ["eval", "--out", str(tmp_path), "--dataset", str(ds), "--ablate", "colour"],
        ["frobnicate"],
    ]
    for argv in cases:
        capsys.readouterr()
        assert main(argv) != 0, argv
        err = capsys.readouterr().err
        assert err.startswith("error: ") and err.count("\n") == 1, (argv, err)


def test_train_smoke_log_and_checkpoint(workspace):
    _, _, _, tr = workspace
    log = (tr / "train_log.csv").read_text().splitlines()
    assert len(log) == 1 + 10
    man = json.loads((tr / "manifest.json").read_text())
    assert set(man["artifacts"]) == {"model.ckpt", "train_log.csv"}
    ck = load_checkpoint(tr / "model.ckpt")
    assert any(s.startswith("encoder/") for s in ck.sections())


def test_siren_checkpoint_has_no_encoder(workspace):
    root, runs, ds, _ = workspace
    before = set(runs.iterdir())
    assert main(["train", "--out", str(runs), "--config", str(root / "tiny.cfg"), "--dataset", str(ds),
                 "--mode", "siren", "--baseline_steps", "2"]) == 0
    ck = load_checkpoint(only_new(runs, before) / "model.ckpt")
    assert ck.sections() and not any(s.startswith("encoder") for s in ck.sections())


def test_resumed_log_equals_uninterrupted(workspace, tmp_path):
    root, _, ds, tr = workspace
    runs = tmp_path / "runs"
    cfg = ["--config", str(root / "tiny.cfg"), "--dataset", str(ds), "--epochs", "10"]
    assert main(["train", "--out", str(runs), *cfg, "--max_steps", "4"]) == 0
    head = run_dir(runs, "train-")
    assert main(["train", "--out", str(runs / "b"), *cfg, "--max_steps", "10",
                 "--resume", str(head / "model.ckpt")]) == 0
    tail = run_dir(runs / "b", "train-")
    rows = lambda p: (p / "train_log.csv").read_text().splitlines()
    assert rows(head) + rows(tail)[1:] == rows(tr)
    assert (tail / "model.ckpt").read_bytes() == (tr / "model.ckpt").read_bytes()


def test_training_twice_is_byte_identical(workspace, tmp_path):
    root, _, ds, tr = workspace
    assert main(["train", "--out", str(tmp_path), "--config", str(root / "tiny.cfg"), "--dataset", str(ds),
                 "--max_steps", "10", "--epochs", "10"]) == 0
    again = run_dir(tmp_path, "train-")
    assert again.name == tr.name
    for f in ("model.ckpt", "train_log.csv", "manifest.json"):
        assert (again / f).read_bytes() == (tr / f).read_bytes()


def test_complete_two_resolutions_and_sweep(workspace, tmp_path):
    _, _, ds, tr = workspace
    argv = ["complete", "--out", str(tmp_path), "--checkpoint", str(tr / "model.ckpt"), "--dataset", str(ds),
            "--scene", "scene_001", "--resolution", "16", "--resolution", "48",
            "--vth", "0.1", "--vth", "0.3", "--vth", "0.05", "--mesh-out", "ply"]
    assert main(argv) == 0
    d = run_dir(tmp_path, "complete-seed0-")
    sc = d / "scene_001"
    coarse, fine = np.load(sc / "r16_sdf.npy"), np.load(sc / "r48_sdf.npy")
    # every coarse lattice point is also a fine lattice point, with the same field value
    pc = lattice_points(*inference_lattice(DESK_GRID, 16))
    pf = lattice_points(*inference_lattice(DESK_GRID, 48))
    dist, idx = cKDTree(pf).query(pc)
    assert dist.max() <= 1e-9
    assert np.allclose(coarse.ravel(), fine.ravel()[idx], rtol=0, atol=1e-6)
    with open(sc / "r16_sweep.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["v_th", "iou"] and [float(r[0]) for r in rows[1:]] == [0.05, 0.1, 0.3]
    assert (sc / "r16_mesh.ply").exists() and (sc / "r48_points.ply").exists()
    first = (d / "manifest.json").read_bytes()
    assert main(argv) == 0
    assert (d / "manifest.json").read_bytes() == first


def test_eval_input_only_and_repeatable(workspace, tmp_path, capsys):
    _, _, ds, tr = workspace
    argv = ["eval", "--out", str(tmp_path), "--dataset", str(ds), "--resolution", "32"]
    assert main(argv) == 0
    d = run_dir(tmp_path, "eval-")
    rep = (d / "report.csv").read_bytes()
    with open(d / "summary.csv") as f:
        [hdr, row] = list(csv.reader(f))
    assert row[0] == "input" and row[1] == "2" and 0.0 < float(row[2]) < 1.0
    assert main(argv) == 0
    assert (d / "report.csv").read_bytes() == rep
    assert main(["eval", "--out", str(tmp_path / "m"), "--dataset", str(ds), "--resolution", "32",
                 "--checkpoint", str(tr / "model.ckpt")]) == 0
    assert "lode" in capsys.readouterr().out


def test_eval_sampling_ablation_table(workspace, tmp_path):
    root, _, ds, tr = workspace
    assert main(["eval", "--out", str(tmp_path), "--config", str(root / "tiny.cfg"), "--dataset", str(ds),
                 "--train-dataset", str(ds), "--ablate", "sampling", "--resolution", "16", "--epochs", "1"]) == 0
    with open(run_dir(tmp_path, "eval-") / "summary.csv") as f:
        names = [r[0] for r in list(csv.reader(f))[1:]]
    assert names == ["trilinear", "nearest"]
