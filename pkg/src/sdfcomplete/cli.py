"""Command-line entry point: ``synth``, ``train``, ``complete`` and ``eval``.

Configuration comes from built-in defaults, then a flat ``key = value`` file
(``--config``), then ``--key value`` pairs on the command line. Nested
settings use dotted keys such as ``weights.eikonal`` or ``encoder.d_se``.
Every run writes into ``<root>/<command>-seed<seed>-<digest>`` where the
root is ``--out``, else ``$SDFCOMPLETE_OUT``, else ``./runs``, and the digest
covers the resolved configuration and the content of every input file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import PointCloud
from .data import DESK_GRID, DatasetManifest, LidarConfig, benchmark_spec, load_dataset
from .extract import (InferenceConfig, evaluate_grid, extract_surface_points, knn_label_transfer, marching_cubes,
                      semantic_points, threshold_sweep, write_curve_csv)
from .pipeline import (DESK_OVERRIDES, ABLATION_AXES, SceneScore, ablation_variants, corpus_mean, evaluate_model,
                       input_scores, run_variant, score_points)
from .plyio import write_mesh_obj, write_mesh_ply, write_ply
from .trainer import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("sdfcomplete")

OUT_ENV = "SDFCOMPLETE_OUT"
NESTED = ("weights", "sampler", "encoder", "pe")
# keys outside TrainConfig, with their defaults
RUN_KEYS = {"profile": "paper", "scenes": 50, "gt_density": 400.0}
# keys whose value may be None, a number, a string or a list
LOOSE_KEYS = {"hidden_omega", "max_steps", "encoder.pruning_placement"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---- configuration ------------------------------------------------------------------

def read_config_file(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e.strerror}")
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_overrides(extra: list[str]) -> dict:
    """``--key value`` and ``--key=value`` pairs left over by argparse."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise CliError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise CliError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def _loose(raw: str):
    if raw.lower() in ("none", "null", ""):
        return None
    if "," in raw:
        return [_loose(x.strip()) for x in raw.split(",") if x.strip()]
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def coerce(key: str, raw, current):
    """Convert a raw string to the type of the default it replaces."""
    if not isinstance(raw, str):
        return raw
    try:
        if key in LOOSE_KEYS:
            return _loose(raw)
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            v = _loose(raw)
            return v if isinstance(v, list) else [v]
        return raw
    except ValueError:
        raise CliError(f"bad value {raw!r} for {key}")


def resolve_config(values: dict) -> tuple[TrainConfig, dict]:
    """TrainConfig plus the run-level keys, from raw values layered over the defaults."""
    values = dict(values)
    run = {k: coerce(k, values.pop(k), d) if k in values else d for k, d in RUN_KEYS.items()}
    lidar_raw = {k[6:]: values.pop(k) for k in list(values) if k.startswith("lidar.")}
    if run["profile"] not in ("paper", "desk"):
        raise CliError(f"unknown profile {run['profile']!r}; expected paper or desk")
    base = TrainConfig(**DESK_OVERRIDES) if run["profile"] == "desk" else TrainConfig()
    top, nested = {}, {n: {} for n in NESTED}
    for key, raw in values.items():
        head, _, tail = key.partition(".")
        if tail and head in NESTED:
            sub = getattr(base, head)
            if tail not in {f.name for f in dataclasses.fields(sub)}:
                raise CliError(f"unknown config key {key!r}")
            nested[head][tail] = coerce(key, raw, getattr(sub, tail))
        elif not tail and key in {f.name for f in dataclasses.fields(TrainConfig)} and key not in NESTED:
            top[key] = coerce(key, raw, getattr(base, key))
        else:
            raise CliError(f"unknown config key {key!r}")
    try:
        for head, kw in nested.items():
            if kw:
                top[head] = dataclasses.replace(getattr(base, head), **kw)
        cfg = dataclasses.replace(base, **top)
        lidar = LidarConfig()
        lidar = dataclasses.replace(lidar, **{k: coerce("lidar." + k, v, getattr(lidar, k))
                                              for k, v in lidar_raw.items()})
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}")
    run["lidar"] = lidar
    if run["scenes"] < 1:
        raise CliError("scenes must be >= 1")
    return cfg, run


# ---- run directories ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Seed-named output directory; ``finish`` writes the manifest with artifact hashes."""

    def __init__(self, command: str, cfg: TrainConfig, run_keys: dict, inputs: dict, args: dict,
                 config_file: Optional[str], out_root: Optional[str]):
        self.command = command
        self.snapshot = {"train": cfg.to_dict(), "run": {k: (v.to_dict() if hasattr(v, "to_dict") else v)
                                                         for k, v in run_keys.items()},
                         "args": args, "inputs": inputs}
        digest = hashlib.sha256(json.dumps([command, self.snapshot], sort_keys=True).encode()).hexdigest()[:10]
        self.seed = cfg.seed
        root = Path(out_root or os.environ.get(OUT_ENV) or "runs")
        self.name = f"{command}-seed{cfg.seed}-{digest}"
        self.dir = root / self.name
        self.config_file = config_file
        self.artifacts: list[Path] = []
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CliError(f"cannot create output directory {self.dir}: {e.strerror}")

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config_file": self.config_file,
            "config": self.snapshot,
            "seed": self.seed,
            "output_dir": self.name,
            "artifacts": {str(p.relative_to(self.dir)): sha256_file(p) for p in sorted(set(self.artifacts))},
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return self.dir


def _dataset_path(p: str) -> Path:
    path = Path(p)
    if path.is_dir():
        path = path / "dataset.json"
    if not path.is_file():
        raise CliError(f"dataset manifest not found: {path}")
    return path


def _load_scenes(p: str, only: Optional[list] = None):
    path = _dataset_path(p)
    scenes = load_dataset(path)
    if only:
        known = {s.id for s in scenes}
        missing = [s for s in only if s not in known]
        if missing:
            raise CliError(f"scene(s) not in dataset: {', '.join(missing)}")
        scenes = [s for s in scenes if s.id in only]
    if not scenes:
        raise CliError(f"dataset {path} has no scenes")
    return scenes, sha256_file(path)


def _load_ckpt(p: str) -> tuple[Checkpoint, str]:
    if not Path(p).is_file():
        raise CliError(f"checkpoint not found: {p}")
    return load_checkpoint(p), sha256_file(p)


# ---- commands -----------------------------------------------------------------------

def cmd_synth(ns, cfg: TrainConfig, run_keys: dict) -> Run:
    n = run_keys["scenes"]
    run = Run("synth", cfg, run_keys, {}, {}, ns.config, ns.out)
    entries = []
    for i in range(n):
        spec = benchmark_spec(cfg.seed * 1000 + i, DESK_GRID)
        rel = f"scenes/scene_{i:03d}.json"
        run.path(rel).write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
        entries.append({"id": f"scene_{i:03d}", "path": rel})
    man = DatasetManifest("synthetic", entries, DESK_GRID, run_keys["gt_density"], run_keys["lidar"], cfg.seed)
    run.path("dataset.json").write_text(man.to_json())
    print(f"wrote {n} scenes to {run.dir}")
    return run


def cmd_train(ns, cfg: TrainConfig, run_keys: dict) -> Run:
    scenes, ds_hash = _load_scenes(ns.dataset)
    inputs = {"dataset": ds_hash}
    resume = None
    if ns.resume:
        resume, inputs["resume"] = _load_ckpt(ns.resume)
    run = Run("train", cfg, run_keys, inputs, {}, ns.config, ns.out)
    result = fit(scenes, cfg, resume=resume)
    save_checkpoint(run.path("model.ckpt"), Checkpoint.from_fit(result))
    run.path("train_log.csv").write_text(result.log_text)
    skipped = 0 if result.state is None else result.state.skipped
    print(f"trained {cfg.mode} for {result.step} steps ({skipped} skipped) -> {run.dir / 'model.ckpt'}")
    return run


def _mesh_labels(model, fld, scene, vertices):
    if model.cfg.semantic == "b":
        return semantic_points(fld, PointCloud(vertices)).labels
    if model.cfg.semantic == "a" and scene.input_cloud.labels is not None:
        return knn_label_transfer(scene.input_cloud, vertices)
    return None


def cmd_complete(ns, cfg: TrainConfig, run_keys: dict) -> Run:
    resolutions = ns.resolution or [256]
    if min(resolutions) < 2:
        raise CliError("--resolution must be >= 2")
    vths = ns.vth or [0.1]
    if min(vths) <= 0:
        raise CliError("--vth must be positive")
    ckpt, ck_hash = _load_ckpt(ns.checkpoint)
    scenes, ds_hash = _load_scenes(ns.dataset, ns.scene)
    model = ckpt.to_model()
    cfg = ckpt.config
    args = {"resolution": resolutions, "vth": vths, "mesh_out": ns.mesh_out, "scene": ns.scene, "knn_k": ns.knn_k}
    run = Run("complete", cfg, run_keys, {"checkpoint": ck_hash, "dataset": ds_hash}, args, ns.config, ns.out)
    rows = []
    for scene in scenes:
        fld, _ = model.field(scene)
        for r in resolutions:
            sdf = evaluate_grid(fld, InferenceConfig(n_inf=r, v_th=vths[0]))
            np.save(run.path(f"{scene.id}/r{r}_sdf.npy"), sdf.values)
            pts = extract_surface_points(sdf, vths[0])
            if model.cfg.semantic == "b":
                pts = semantic_points(fld, pts)
            elif model.cfg.semantic == "a" and scene.input_cloud.labels is not None:
                pts = PointCloud(pts.points, labels=knn_label_transfer(scene.input_cloud, pts, ns.knn_k))
            write_ply(run.path(f"{scene.id}/r{r}_points.ply"), pts)
            score = score_points(pts, scene)
            rows.append([scene.id, r, vths[0], score.n_points, repr(score.iou),
                         "" if score.miou is None else repr(score.miou)])
            if len(vths) > 1:
                write_curve_csv(run.path(f"{scene.id}/r{r}_sweep.csv"),
                                threshold_sweep(sdf, scene.gt_occ, sorted(vths)))
            if ns.mesh_out:
                mesh = marching_cubes(sdf)
                path = run.path(f"{scene.id}/r{r}_mesh.{ns.mesh_out}")
                if ns.mesh_out == "obj":
                    write_mesh_obj(path, mesh.vertices, mesh.triangles)
                else:
                    write_mesh_ply(path, mesh.vertices, mesh.triangles,
                                   _mesh_labels(model, fld, scene, mesh.vertices) if len(mesh.vertices) else None)
    with open(run.path("scores.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene_id", "resolution", "v_th", "n_points", "iou", "miou"])
        w.writerows(rows)
    print(f"completed {len(scenes)} scene(s) at resolution(s) {resolutions} -> {run.dir}")
    return run


def _write_report(run: Run, table: dict[str, list[SceneScore]]) -> list[list]:
    with open(run.path("report.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "scene_id", "iou", "miou", "n_points"])
        for name, scores in table.items():
            for s in scores:
                w.writerow([name, s.scene_id, repr(s.iou), "" if s.miou is None else repr(s.miou), s.n_points])
    summary = []
    for name, scores in table.items():
        m = corpus_mean(scores, "miou") if all(s.miou is not None for s in scores) else None
        summary.append([name, len(scores), repr(corpus_mean(scores)), "" if m is None else repr(m)])
    with open(run.path("summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "n_scenes", "mean_iou", "mean_miou"])
        w.writerows(summary)
    return summary


def cmd_eval(ns, cfg: TrainConfig, run_keys: dict) -> Run:
    if ns.resolution < 2:
        raise CliError("--resolution must be >= 2")
    icfg = InferenceConfig(n_inf=ns.resolution, v_th=ns.vth)
    scenes, ds_hash = _load_scenes(ns.dataset)
    inputs = {"dataset": ds_hash}
    ckpt = None
    if ns.checkpoint:
        ckpt, inputs["checkpoint"] = _load_ckpt(ns.checkpoint)
    train = None
    if ns.ablate:
        base = ckpt.config if ckpt is not None else cfg
        if base.mode == "lode":
            if not ns.train_dataset:
                raise CliError("--ablate with mode lode needs --train-dataset")
            train, inputs["train_dataset"] = _load_scenes(ns.train_dataset)
    args = {"ablate": ns.ablate, "resolution": ns.resolution, "vth": ns.vth}
    run = Run("eval", ckpt.config if ckpt is not None else cfg, run_keys, inputs, args, ns.config, ns.out)
    if ns.ablate:
        table = {name: run_variant(vcfg, train, scenes, icfg)
                 for name, vcfg in ablation_variants(ns.ablate, base).items()}
    elif ckpt is not None:
        table = {ckpt.config.mode: evaluate_model(ckpt.to_model(), scenes, icfg)}
    else:
        table = {"input": input_scores(scenes)}
    summary = _write_report(run, table)
    print(f"{'variant':<12} {'scenes':>6} {'IoU':>8} {'mIoU':>8}")
    for name, n, iou_, miou_ in summary:
        m = f"{float(miou_):8.4f}" if miou_ else f"{'-':>8}"
        print(f"{name:<12} {n:>6} {float(iou_):8.4f} {m}")
    return run


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "complete": cmd_complete, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdfcomplete", description=__doc__.splitlines()[0],
                epilog="Any config key can be given as --key value, e.g. --mode siren --semantic b "
                       "--epochs 5 --weights.eikonal 3000 --profile desk.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--threads", type=int, help="cap on intra-op CPU threads")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("synth", parents=[common], help="write the seeded synthetic benchmark dataset")
    t = sub.add_parser("train", parents=[common], help="fit a model and write a checkpoint and loss log")
    t.add_argument("--dataset", required=True, help="dataset.json or a directory containing it")
    t.add_argument("--resume", help="checkpoint to continue from")
    c = sub.add_parser("complete", parents=[common], help="complete scenes: points, SDF grids, meshes, sweeps")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--dataset", required=True)
    c.add_argument("--scene", action="append", help="scene id (repeatable; default every scene)")
    c.add_argument("--resolution", type=int, action="append", help="lattice points on the longest axis (repeatable)")
    c.add_argument("--vth", type=float, action="append",
                   help="surface threshold in meters; the first is used for points, several write a sweep CSV")
    c.add_argument("--mesh-out", choices=["ply", "obj"], help="also write a marching-cubes mesh")
    c.add_argument("--knn-k", type=int, default=5, help="neighbors for label transfer (semantic a)")
    e = sub.add_parser("eval", parents=[common], help="corpus IoU/mIoU report; no checkpoint scores the raw input")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--ablate", choices=ABLATION_AXES)
    e.add_argument("--train-dataset", help="training scenes for --ablate in the conditioned mode")
    e.add_argument("--resolution", type=int, default=256)
    e.add_argument("--vth", type=float, default=0.1)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    try:
        ns, extra = build_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if ns.threads is not None:
            if ns.threads < 1:
                raise CliError("--threads must be >= 1")
            torch.set_num_threads(ns.threads)
        values = read_config_file(ns.config) if ns.config else {}
        values.update(parse_overrides(extra))
        cfg, run_keys = resolve_config(values)
        run = COMMANDS[ns.command](ns, cfg, run_keys)
        run.finish()
        return 0
    except SystemExit as e:          # --help
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:           # one-line diagnostic, no traceback
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        log.debug("failure", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
