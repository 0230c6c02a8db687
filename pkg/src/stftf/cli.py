"""``stftf`` command line: generate, train, rollout, evaluate, plot.

Every failure prints one line ``stftf: error[<Class>]: <message>`` to stderr
and exits with the code listed in ``EXIT_CODES``.  Each run writes a
``provenance.json`` (argv, resolved config, seed, git-style hashes of the
inputs) next to its outputs; it contains no timestamps.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core.config import ConfigKeyError, load_json, model_config_from_dict, model_config_to_dict, strict_from_dict
from .core.dataset import DatasetReader, dataset_write
from .core.normalization import normalize
from .core.types import GridSpec, LevelConfig, ModelConfig, RngStream, Trajectory, ValidationError
from .datagen.generate import GenerationError, default_config, generate_dataset
from .datagen.ns import NsConfig, SolverError
from .datagen.swe import SweConfig
from .eval.metrics import REFERENCE_PLASMA_COVERAGE, ci_coverage, l2_relative_error, scale_contributions
from .eval.report import (error_curve_export, plot_contributions, plot_error_curves, plot_field_panels,
                          read_error_curve, write_coverage_csv)
from .flowmatch import FlowConfig, SamplingError, load_flow
from .model.checkpoint import CheckpointError, load_stft
from .model.stft import max_modes
from .tokenizer import plan_layout
from .rollout import RolloutError, rollout_deterministic, rollout_ensemble, rollout_mean
from .trainer import TrainConfig, TrainingDiverged, TrainLog, train_deterministic, train_flow

log = logging.getLogger("stftf")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "missing_path": 3,
    "config_key": 4,
    "invalid_input": 5,
    "checkpoint": 6,
    "numerical": 7,
    "io": 8,
}
PROVENANCE_NAME = "provenance.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- provenance

def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    """Git-style hash: blob hash for a file, hash of the sorted ``name hash`` listing for a directory."""
    path = Path(path)
    if path.is_file():
        return _blob_hash(path.read_bytes())
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    lines = []
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != PROVENANCE_NAME):
        lines.append(f"{f.relative_to(path).as_posix()} {_blob_hash(f.read_bytes())}\n")
    return hashlib.sha1("".join(lines).encode()).hexdigest()


def write_provenance(path, command: str, argv, config: dict, seed, inputs: dict) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "content_hash": content_hash(p)} for name, p in sorted(inputs.items())},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- argument parsing helpers

def parse_grid(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m:
        raise ValidationError(f"--grid expects WxH, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def parse_budget(text: str) -> dict:
    """``100ep`` epochs, ``200it`` steps, ``600s`` / ``30m`` / ``2h`` wall clock."""
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(ep|it|s|m|h)", text.strip())
    if not m:
        raise ValidationError(f"--budget expects e.g. 100ep, 200it, 600s, 30m or 2h; got {text!r}")
    value, unit = float(m.group(1)), m.group(2)
    budget = {"max_epochs": None, "max_steps": None, "wall_clock": None}
    if unit in ("ep", "it"):
        if value != int(value):
            raise ValidationError(f"--budget {text!r}: epochs and iterations must be whole numbers")
        budget["max_epochs" if unit == "ep" else "max_steps"] = int(value)
    else:
        budget["wall_clock"] = value * {"s": 1, "m": 60, "h": 3600}[unit]
    return budget


def parse_levels(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"--ci-levels expects comma-separated numbers, got {text!r}") from None


def _solver_config(system: str, path: Optional[str]):
    cfg = default_config(system)
    if path is None:
        return cfg
    d = load_json(path)
    cls = NsConfig if system == "ns" else SweConfig
    strict_from_dict(cls, d, f"{path}")
    tuple_fields = {f.name for f in dataclasses.fields(cls) if isinstance(f.default, tuple)}
    return dataclasses.replace(cfg, **{k: tuple(v) if k in tuple_fields else v for k, v in d.items()})


def default_model_config(grid: GridSpec, k: int = 5) -> ModelConfig:
    """Two levels: patches of about half, then a quarter of the grid, overlap 1."""
    def patch(n, frac):
        return max(2, n // frac)

    levels = []
    for frac in (2, 4):
        p_h, p_w = patch(grid.width, frac), patch(grid.height, frac)
        lay = plan_layout(grid.width, grid.height, p_h, p_w, 1, 1)
        levels.append(LevelConfig(p_h=p_h, p_w=p_w, o_h=1, o_w=1, m_h=max_modes(lay.N_h), m_w=max_modes(lay.N_w),
                                  depth=2, hidden_dim=64, n_heads=4))
    if levels[1].p_h >= levels[0].p_h or levels[1].p_w >= levels[0].p_w:
        levels = levels[:1]
    return ModelConfig(k=k, levels=tuple(levels))


def _train_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    d = load_json(path)
    if not isinstance(d, dict):
        raise ConfigKeyError(f"{path}: expected a mapping with sections model/train/flow")
    unknown = sorted(set(d) - {"model", "train", "flow"})
    if unknown:
        raise ConfigKeyError(f"{path}: unknown sections {unknown}; allowed ['flow', 'model', 'train']")
    return d


def _dataset(path) -> DatasetReader:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return DatasetReader(path)


# ---------------------------------------------------------------- subcommands

def cmd_generate(args, argv) -> None:
    width, height = parse_grid(args.grid) if args.grid else (None, None)
    cfg = _solver_config(args.system, args.config)
    updates = {k: v for k, v in (("width", width), ("height", height), ("n_snapshots", args.snapshots))
               if v is not None}
    cfg = dataclasses.replace(cfg, **updates)
    generate_dataset(args.system, args.n_traj, args.seed, args.out, config=cfg, workers=args.workers)
    inputs = {"config": args.config} if args.config else {}
    write_provenance(Path(args.out) / PROVENANCE_NAME, "generate", argv,
                     {"system": args.system, "n_traj": args.n_traj,
                      "solver": json.loads(json.dumps(dataclasses.asdict(cfg)))}, args.seed, inputs)


def cmd_train(args, argv) -> None:
    ds = _dataset(args.data)
    val = _dataset(args.val_data) if args.val_data else None
    file_cfg = _train_config_file(args.config)
    stage = {"det": "deterministic", "flow": "flow"}[args.stage]
    tdict = dict(file_cfg.get("train", {}))
    strict_from_dict(TrainConfig, tdict, "train config")
    tdict["stage"] = stage
    if args.budget:
        tdict.update(parse_budget(args.budget))
    if args.seed is not None:
        tdict["seed"] = args.seed
    tcfg = TrainConfig(**tdict)
    out = Path(args.out)
    train_trajs, val_trajs = list(ds), (list(val) if val is not None else None)
    inputs = {"data": args.data}
    if args.val_data:
        inputs["val_data"] = args.val_data
    if args.config:
        inputs["config"] = args.config

    if stage == "deterministic":
        mcfg = (model_config_from_dict(file_cfg["model"]) if "model" in file_cfg
                else default_model_config(ds.grid))
        train_log = TrainLog(out.with_suffix(".log.csv"), "val_rel_l2")
        resolved = {"model": model_config_to_dict(mcfg), "train": dataclasses.asdict(tcfg)}
        try:
            ckpt = train_deterministic(train_trajs, mcfg, tcfg, val=val_trajs, train_log=train_log)
        except TrainingDiverged as exc:
            exc.checkpoint.save(out)
            raise
    else:
        if not args.ckpt:
            raise ValidationError("--stage flow requires --ckpt pointing at the StFT checkpoint")
        stft = load_stft(args.ckpt)
        fcfg = FlowConfig.from_dict(file_cfg.get("flow", {}))
        train_log = TrainLog(out.with_suffix(".log.csv"), "val_flow_loss")
        resolved = {"flow": dataclasses.asdict(fcfg), "train": dataclasses.asdict(tcfg)}
        inputs["ckpt"] = args.ckpt
        try:
            ckpt = train_flow(train_trajs, stft, fcfg, tcfg, val=val_trajs, train_log=train_log)
        except TrainingDiverged as exc:
            exc.checkpoint.save(out)
            raise
    ckpt.save(out)
    write_provenance(out.with_suffix(".provenance.json"), "train", argv, resolved, tcfg.seed, inputs)


def _write_traj(traj: Trajectory, out, metadata: dict) -> None:
    dataset_write([traj], out, metadata=metadata)


def cmd_rollout(args, argv) -> None:
    ds = _dataset(args.data)
    stft = load_stft(args.ckpt)
    if not 0 <= args.traj_index < len(ds):
        raise ValidationError(f"--traj-index {args.traj_index} out of range for {len(ds)} trajectories")
    truth = ds[args.traj_index]
    k = stft.k
    if args.start < 0 or args.start + k > truth.T:
        raise ValidationError(f"--start {args.start} leaves fewer than k={k} snapshots")
    horizon = args.horizon if args.horizon is not None else truth.T - args.start - k
    window = truth.data[args.start:args.start + k]
    t0 = truth.t0 + args.start + k
    meta = {"mode": args.mode, "source_data": str(args.data), "traj_index": args.traj_index, "t0": t0,
            "stft_hash": stft.content_hash, "system": ds.metadata.get("system")}
    inputs = {"data": args.data, "ckpt": args.ckpt}
    flow = None
    if args.mode != "det":
        if not args.flow_ckpt:
            raise ValidationError(f"--mode {args.mode} requires --flow-ckpt")
        flow = load_flow(args.flow_ckpt, stft)
        inputs["flow_ckpt"] = args.flow_ckpt
    out = Path(args.out)
    n_steps = args.flow_steps
    if args.mode == "det":
        pred = rollout_deterministic(stft, window, horizon, t0=t0)
        _write_traj(pred, out, meta)
        config = {"mode": "det", "horizon": horizon, "start": args.start}
    elif args.mode == "mean":
        n = args.samples or 50
        pred = rollout_mean(stft, flow, window, horizon, n_samples=n, rng=RngStream(args.seed, 0),
                            n_steps=n_steps, t0=t0)
        _write_traj(pred, out, meta)
        config = {"mode": "mean", "horizon": horizon, "start": args.start, "n_samples": n, "flow_steps": n_steps}
    else:
        n = args.samples or 100
        ens = rollout_ensemble(stft, flow, window, horizon, n_traj=n, seed=args.seed, n_steps=n_steps, t0=t0)
        meta = {**meta, "failed_members": {str(m): s for m, s in ens.failed.items()}}
        dataset_write([ens.member(i) for i in range(ens.size)], out / "members", metadata=meta)
        _write_traj(Trajectory(ens.grid, ens.mean.astype(np.float32), t0), out / "mean", meta)
        _write_traj(Trajectory(ens.grid, ens.std.astype(np.float32), t0), out / "std", meta)
        config = {"mode": "ensemble", "horizon": horizon, "start": args.start, "n_traj": n, "flow_steps": n_steps}
    write_provenance(out / PROVENANCE_NAME, "rollout", argv, config, args.seed, inputs)


def _aligned_truth(truth_ds: DatasetReader, pred_ds: DatasetReader, traj_index: Optional[int]):
    meta = pred_ds.metadata
    idx = traj_index if traj_index is not None else int(meta.get("traj_index", 0))
    if not 0 <= idx < len(truth_ds):
        raise ValidationError(f"trajectory index {idx} out of range for {len(truth_ds)} truth trajectories")
    truth = truth_ds[idx]
    t0 = int(meta.get("t0", pred_ds[0].t0))
    start = t0 - truth.t0
    n = min(pred_ds[0].T, truth.T - start)
    if start < 0 or n <= 0:
        raise ValidationError(f"prediction starting at t0={t0} does not overlap truth trajectory {idx}")
    return truth.data[start:start + n], t0, n


def _eval_fields(data: np.ndarray, grid: GridSpec, system, variables):
    """Select evaluation variables; shallow-water runs score |V| recomputed from u and v."""
    names = list(grid.variables)
    if variables:
        wanted = variables
    elif system == "swe" and {"u", "v"} <= set(names):
        wanted = ["V"]
    else:
        wanted = names
    cols = []
    for name in wanted:
        if name == "V" and {"u", "v"} <= set(names):
            u, v = data[..., names.index("u")], data[..., names.index("v")]
            cols.append(np.sqrt(u.astype(np.float64) ** 2 + v.astype(np.float64) ** 2))
        elif name in names:
            cols.append(data[..., names.index(name)].astype(np.float64))
        else:
            raise ValidationError(f"unknown evaluation variable {name!r}; dataset has {names}")
    return np.stack(cols, axis=-1), wanted


def cmd_evaluate(args, argv) -> None:
    truth_ds = _dataset(args.truth)
    if not args.pred and not args.ensemble:
        raise ValidationError("evaluate needs --pred and/or --ensemble")
    inputs = {"truth": args.truth}
    variables = [v for v in args.variables.split(",") if v] if args.variables else None
    system = truth_ds.metadata.get("system")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics: dict = {"reference_plasma_coverage": {repr(k): v for k, v in REFERENCE_PLASMA_COVERAGE.items()}}

    if args.ensemble:
        inputs["ensemble"] = args.ensemble
        members = _dataset(Path(args.ensemble) / "members")
    if args.pred:
        inputs["pred"] = args.pred
        pred_ds = _dataset(args.pred)
    else:
        pred_ds = _dataset(Path(args.ensemble) / "mean")
    truth_raw, t0, n = _aligned_truth(truth_ds, pred_ds, args.traj_index)
    truth, names = _eval_fields(truth_raw, truth_ds.grid, system, variables)
    pred, _ = _eval_fields(pred_ds[0].data[:n], pred_ds.grid, system, variables)

    total = l2_relative_error(pred, truth, "per_variable_total", names)
    per_t = l2_relative_error(pred, truth, "per_variable_per_timestep", names)
    metrics.update(n_compared=n, t0=t0, variables=names,
                   relative_l2_total=total,
                   relative_l2_timestep_mean={k: float(np.mean(v)) for k, v in per_t.items()},
                   relative_l2_mean=float(np.mean(list(total.values()))))
    error_curve_export(per_t, out / "error_curve.csv", t0=t0)
    plot_error_curves(per_t, out / "error_curve.png", t0=t0)

    std_field = None
    if args.ensemble:
        ens = np.stack([_eval_fields(m.data[:n], members.grid, system, variables)[0] for m in members])
        n_eval = args.eval_snapshots if args.eval_snapshots is not None else min(n, 20)
        if n_eval > n:
            raise ValidationError(f"--eval-snapshots {n_eval} exceeds the {n} aligned snapshots")
        coverage = ci_coverage(ens, truth, parse_levels(args.ci_levels), n_eval, args.ci_method, names)
        metrics["coverage"] = {repr(k): v for k, v in coverage.items()}
        metrics["coverage_method"] = args.ci_method
        metrics["coverage_snapshots"] = n_eval
        write_coverage_csv(coverage, out / "coverage.csv")
        std_field = ens.std(axis=0)
    snap = min(args.snapshot, n - 1)
    plot_field_panels(truth[snap, ..., 0], pred[snap, ..., 0], out / "fields.png",
                      None if std_field is None else std_field[snap, ..., 0],
                      title=f"{names[0]} at t={t0 + snap}")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    config = {"ci_levels": args.ci_levels, "eval_snapshots": args.eval_snapshots, "ci_method": args.ci_method,
              "variables": names, "snapshot": snap}
    write_provenance(out / PROVENANCE_NAME, "evaluate", argv, config, None, inputs)


def cmd_plot(args, argv) -> None:
    out = Path(args.out)
    inputs, made = {}, False
    if args.curve:
        inputs["curve"] = args.curve
        if not Path(args.curve).exists():
            raise FileNotFoundError(f"error curve CSV not found: {args.curve}")
        curves = read_error_curve(args.curve)
        t0 = min(t for rows in curves.values() for t, _ in rows) if curves else 0
        plot_error_curves({k: [e for _, e in rows] for k, rows in curves.items()}, out / "error_curve.png", t0)
        made = True
    if args.pred and args.truth:
        inputs.update(pred=args.pred, truth=args.truth)
        truth_ds, pred_ds = _dataset(args.truth), _dataset(args.pred)
        truth_raw, t0, n = _aligned_truth(truth_ds, pred_ds, args.traj_index)
        variables = [args.variable] if args.variable else None
        system = truth_ds.metadata.get("system")
        truth, names = _eval_fields(truth_raw, truth_ds.grid, system, variables)
        pred, _ = _eval_fields(pred_ds[0].data[:n], pred_ds.grid, system, variables)
        std = None
        if args.ensemble:
            inputs["ensemble"] = args.ensemble
            std_ds = _dataset(Path(args.ensemble) / "std")
            std = _eval_fields(std_ds[0].data[:n], std_ds.grid, system, variables)[0]
        snap = min(args.snapshot, n - 1)
        plot_field_panels(truth[snap, ..., 0], pred[snap, ..., 0], out / f"fields_t{t0 + snap}_{names[0]}.png",
                          None if std is None else std[snap, ..., 0], title=f"{names[0]} at t={t0 + snap}")
        made = True
    if args.ckpt and args.data:
        inputs.update(ckpt=args.ckpt, data=args.data)
        stft = load_stft(args.ckpt)
        traj = _dataset(args.data)[args.traj_index or 0]
        start = args.snapshot
        if start + stft.k >= traj.T:
            raise ValidationError(f"--snapshot {start} leaves no target after a k={stft.k} window")
        dtype = next(stft.model.parameters()).dtype
        hist = torch.from_numpy(normalize(traj.data[start:start + stft.k].astype(np.float64), stft.stats))
        with torch.no_grad():
            _, outputs = stft.model(hist.to(dtype).unsqueeze(0))
        target = normalize(traj.data[start + stft.k].astype(np.float64), stft.stats)
        weights = scale_contributions(outputs, target)
        plot_contributions(weights, out / "contributions.png")
        out.mkdir(parents=True, exist_ok=True)
        (out / "contributions.csv").write_text(
            "level,weight\n" + "".join(f"{i + 1},{w!r}\n" for i, w in enumerate(weights.tolist())))
        made = True
    if not made:
        raise ValidationError("plot needs --curve, --pred with --truth, or --ckpt with --data")
    write_provenance(out / PROVENANCE_NAME, "plot", argv, {"snapshot": args.snapshot, "variable": args.variable},
                     None, inputs)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stftf", description="Multi-scale spatio-temporal Fourier transformer forecasting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a PDE dataset")
    g.add_argument("--system", choices=("ns", "swe"), required=True)
    g.add_argument("--n-traj", type=int, required=True)
    g.add_argument("--grid", help="WxH")
    g.add_argument("--snapshots", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON file with solver config fields")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the StFT or the residual flow")
    t.add_argument("--stage", choices=("det", "flow"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--config", help="JSON with optional sections model, train, flow")
    t.add_argument("--budget", help="100ep, 200it, 600s, 30m or 2h")
    t.add_argument("--ckpt", help="StFT checkpoint (flow stage)")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out", required=True)

    r = sub.add_parser("rollout", help="autoregressive forecast")
    r.add_argument("--mode", choices=("det", "mean", "ensemble"), default="det")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--flow-ckpt")
    r.add_argument("--data", required=True)
    r.add_argument("--traj-index", type=int, default=0)
    r.add_argument("--start", type=int, default=0, help="index of the first history snapshot")
    r.add_argument("--horizon", type=int)
    r.add_argument("--samples", type=int, help="residual samples per step (mean) or members (ensemble)")
    r.add_argument("--flow-steps", type=int, help="Euler steps per residual sample")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="relative L2 errors and CI coverage")
    e.add_argument("--pred")
    e.add_argument("--truth", required=True)
    e.add_argument("--ensemble")
    e.add_argument("--traj-index", type=int)
    e.add_argument("--ci-levels", default="0.9,0.95")
    e.add_argument("--ci-method", choices=("gaussian", "quantile"), default="gaussian")
    e.add_argument("--eval-snapshots", type=int)
    e.add_argument("--variables", help="comma-separated; default all (|V| for shallow water)")
    e.add_argument("--snapshot", type=int, default=0, help="lead index for the field figure")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="render figures from existing outputs")
    pl.add_argument("--curve", help="error_curve.csv from evaluate")
    pl.add_argument("--pred")
    pl.add_argument("--truth")
    pl.add_argument("--ensemble")
    pl.add_argument("--ckpt")
    pl.add_argument("--data")
    pl.add_argument("--traj-index", type=int)
    pl.add_argument("--snapshot", type=int, default=0)
    pl.add_argument("--variable")
    pl.add_argument("--out", required=True)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "rollout": cmd_rollout, "evaluate": cmd_evaluate,
            "plot": cmd_plot}


def _classify(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, UsageError):
        return "UsageError", EXIT_CODES["usage"]
    if isinstance(exc, FileNotFoundError):
        return "MissingPath", EXIT_CODES["missing_path"]
    if isinstance(exc, ConfigKeyError):
        return "ConfigKeyError", EXIT_CODES["config_key"]
    if isinstance(exc, CheckpointError):
        return "CheckpointError", EXIT_CODES["checkpoint"]
    if isinstance(exc, (TrainingDiverged, RolloutError, SolverError, SamplingError, GenerationError)):
        return type(exc).__name__, EXIT_CODES["numerical"]
    if isinstance(exc, (ValidationError, json.JSONDecodeError)):
        return type(exc).__name__, EXIT_CODES["invalid_input"]
    if isinstance(exc, OSError):
        return "IOError", EXIT_CODES["io"]
    return type(exc).__name__, EXIT_CODES["internal"]


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        workers = getattr(args, "workers", None)
        if workers is not None:
            if workers < 1:
                raise ValidationError("--workers must be >= 1")
            torch.set_num_threads(min(torch.get_num_threads(), workers))
        COMMANDS[args.command](args, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        name, code = _classify(exc)
        message = " ".join(str(exc).split()) or name
        print(f"stftf: error[{name}]: {message}", file=sys.stderr)
        return code
    return EXIT_CODES["ok"]


def main() -> None:
    sys.exit(run())
