"""``flowpost`` command line.

Every command reads an optional INI config (sections ``features``, ``flow``,
``solver``, ``model``, ``train``, ``calibrate``, ``toy``), validates all of
its inputs, writes a key-value manifest and then its outputs. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import WavFormatError, read_wav, write_wav
from .calibration import SigmaProfile, load_profile, save_profile, sigma_from_heuristic
from .features import FeatureConfig, Waveform, extract, invert
from .flowmath import PathKind, PathSpec
from .metrics import build_report, evaluate_pair, write_report_csv
from .neural import (
    FlowModel,
    TrainConfig,
    TrainingDivergedError,
    enhance_grid,
    grid_dataset,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .odesolve import Method, NonFiniteStateError, SolverConfig, steps_for_nfe
from .toylab import (
    DegradeKind,
    DegradeSpec,
    ToyProblem,
    degrade,
    endpoint_dispersion,
    field_grid,
    sigma_regimes_experiment,
    tone_bursts,
    write_dispersion_csv,
    write_field_grid_csv,
    write_regimes_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CLEAN_SUFFIX = ".clean.wav"
DEGRADED_SUFFIX = ".degraded.wav"
ENHANCED_SUFFIX = ".enhanced.wav"

DEFAULTS = {
    "features": {"sample_rate": "48000", "window_len": "1534", "hop_len": "384",
                 "alpha": "0.3", "beta": "0.66"},
    "flow": {"sigma": "0.66", "path": "joint"},
    "solver": {"method": "midpoint", "nfe": "6"},
    "model": {"hidden": "128,128,128", "ema_decay": "0.999", "output": "endpoint",
              "gate": "true", "tile": "24"},
    "train": {"learning_rate": "50", "iterations": "2000", "batch_size": "64", "seed": "0"},
    "calibrate": {"quantile": "0.997", "bandwidth": "3", "per_frequency": "false"},
    "toy": {"targets": "1,0.2; -0.8,0.9; 0.1,-1.2", "y": "0,0", "sigma": "0.4"},
    "synth": {"duration": "0.5", "strength": "10", "floor": "0.01", "freq": "1000"},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

def load_config(path=None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"config file not found: {p}")
        try:
            cfg.read(p)
        except configparser.Error as exc:
            raise UsageError(f"malformed config {p}: {exc}") from exc
    return cfg


def feature_config(cfg) -> tuple[FeatureConfig, int]:
    s = cfg["features"]
    try:
        fc = FeatureConfig(s.getint("window_len"), s.getint("hop_len"),
                           s.getfloat("alpha"), s.getfloat("beta"))
        return fc, s.getint("sample_rate")
    except ValueError as exc:
        raise UsageError(f"bad [features] section: {exc}") from exc


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _points(text: str) -> np.ndarray:
    rows = [_floats(chunk) for chunk in text.split(";") if chunk.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"expected 'x,y; x,y; ...', got {text!r}")
    return np.array(rows)


def toy_problem(cfg, args) -> ToyProblem:
    s = cfg["toy"]
    targets = _points(args.targets if args.targets else s["targets"])
    y = np.array(_floats(args.y if args.y else s["y"]))
    sigma = args.sigma if args.sigma is not None else s.getfloat("sigma")
    try:
        return ToyProblem(targets, y, sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- manifest

def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp so reruns are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    secs = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(secs))


def write_manifest(path, command: str, cfg, args, outputs, seed=None) -> Path:
    """Key-value manifest: command, version, seed, timestamp, outputs, config, flags."""
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"seed = {'' if seed is None else seed}",
        f"timestamp = {_timestamp()}",
    ]
    lines += [f"output.{i} = {Path(o).name}" for i, o in enumerate(outputs)]
    for section in cfg.sections():
        for key, value in cfg[section].items():
            lines.append(f"config.{section}.{key} = {value}")
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        lines.append(f"arg.{key} = {value}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


# ---------------------------------------------------------------- helpers

def _read(path, rate: int) -> Waveform:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"input not found: {p}")
    return read_wav(p, expected_rate=rate)


def find_pairs(directory) -> list:
    """``(name, clean_path, degraded_path)`` for every complete pair, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    pairs = []
    for clean in sorted(d.glob("*" + CLEAN_SUFFIX)):
        name = clean.name[: -len(CLEAN_SUFFIX)]
        deg = d / (name + DEGRADED_SUFFIX)
        if deg.is_file():
            pairs.append((name, clean, deg))
    if not pairs:
        raise DataError(f"no <name>{CLEAN_SUFFIX} / <name>{DEGRADED_SUFFIX} pairs in {d}")
    return pairs


def _load_pairs(directory, fc: FeatureConfig, rate: int) -> list:
    grids = []
    for name, c, d in find_pairs(directory):
        wc, wd = _read(c, rate), _read(d, rate)
        if len(wc) != len(wd):
            raise DataError(f"pair {name}: clean and degraded lengths differ")
        grids.append((extract(wc, fc), extract(wd, fc)))
    return grids


def _profile_for(values_path, fc: FeatureConfig, cfg) -> SigmaProfile:
    if values_path is None:
        return SigmaProfile.scalar(cfg["flow"].getfloat("sigma"))
    p = Path(values_path)
    if not p.is_file():
        raise DataError(f"profile not found: {p}")
    try:
        prof, _ = load_profile(p)
    except (ValueError, KeyError) as exc:
        raise DataError(f"unreadable profile {p}: {exc}") from exc
    if not prof.is_scalar and len(prof) != fc.n_freqs:
        raise DataError(f"profile has {len(prof)} rows, features have {fc.n_freqs}")
    return prof


def _solver(method: str, nfe: int) -> SolverConfig:
    try:
        return SolverConfig(Method(method), steps_for_nfe(method, nfe))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _tile_of(model: FlowModel) -> int:
    tile = int(round(np.sqrt(model.data_dim / 2)))
    if 2 * tile * tile != model.data_dim:
        raise DataError(f"model dim {model.data_dim} is not a complex square tile")
    return tile


# ---------------------------------------------------------------- commands

def cmd_roundtrip(args, cfg) -> int:
    fc, rate = feature_config(cfg)
    w = _read(args.input, rate)
    if len(w) < fc.window_len:
        raise DataError(f"{args.input}: {len(w)} samples, need at least {fc.window_len}")
    grid = extract(w, fc)
    rec = invert(grid)
    norm = np.linalg.norm(w.samples)
    err = 0.0 if norm == 0 else float(np.linalg.norm(rec - w.samples) / norm)
    v = grid.values
    inside = float(np.mean((np.abs(v.real) <= 1) & (np.abs(v.imag) <= 1)))
    print(f"relative_error = {err:.3e}")
    print(f"frames = {v.shape[1]}")
    print(f"bins = {v.shape[0]}")
    print(f"fraction_in_unit_box = {inside:.6f}")
    print(f"max_abs_feature = {float(np.max(np.abs(v))):.6f}")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    fc, rate = feature_config(cfg)
    s = cfg["synth"]
    spec = DegradeSpec(DegradeKind.SPECTRAL_SMOOTH, s.getfloat("strength"))
    out = _out_dir(args.out_dir)
    names = [f"item{i:03d}" for i in range(args.count)]
    outputs = [out / (n + suf) for n in names for suf in (CLEAN_SUFFIX, DEGRADED_SUFFIX)]
    write_manifest(out / "manifest.txt", "synth", cfg, args, outputs, args.seed)
    for i, name in enumerate(names):
        w = tone_bursts(s.getfloat("duration"), rate, seed=args.seed * 100_003 + i,
                        freq=s.getfloat("freq"), floor=s.getfloat("floor"))
        deg = invert(degrade(extract(w, fc), spec, seed=i))
        write_wav(out / (name + CLEAN_SUFFIX), w)
        write_wav(out / (name + DEGRADED_SUFFIX), Waveform(np.clip(deg, -1, 1), rate))
    print(f"wrote {len(names)} pairs to {out}")
    return EXIT_OK


def cmd_calibrate(args, cfg) -> int:
    from .plotting import plot_sigma_profile

    fc, rate = feature_config(cfg)
    c = cfg["calibrate"]
    q = args.quantile if args.quantile is not None else c.getfloat("quantile")
    bw = args.bandwidth if args.bandwidth is not None else c.getfloat("bandwidth")
    per_freq = args.per_frequency or c.getboolean("per_frequency")
    if not 0 < q <= 1:
        raise UsageError(f"quantile must lie in (0, 1], got {q}")
    pairs = _load_pairs(args.pairs, fc, rate)
    prof = sigma_from_heuristic(pairs, q=q, per_frequency=per_freq,
                                bandwidth=bw if per_freq and bw > 0 else None)
    out = Path(args.out)
    fig = out.with_suffix(".png")
    write_manifest(out.with_name(out.name + ".manifest"), "calibrate", cfg, args, [out, fig])
    save_profile(out, prof, q, bw if per_freq else None)
    plot_sigma_profile(fig, prof.values, rate)
    print(f"sigma: min {prof.values.min():.6g} max {prof.values.max():.6g} ({prof.kind.value})")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .plotting import plot_training_history

    fc, rate = feature_config(cfg)
    prof = _profile_for(args.profile, fc, cfg)
    pairs = _load_pairs(args.pairs, fc, rate)
    m, t = cfg["model"], cfg["train"]
    tile = m.getint("tile")
    if min(pairs[0][0].shape) < tile:
        raise DataError(f"feature grids {pairs[0][0].shape} are smaller than the {tile}x{tile} tile")
    seed = args.seed if args.seed is not None else t.getint("seed")
    tc = TrainConfig(
        PathSpec(PathKind(cfg["flow"]["path"]), prof),
        learning_rate=args.learning_rate if args.learning_rate is not None else t.getfloat("learning_rate"),
        iterations=args.iterations if args.iterations is not None else t.getint("iterations"),
        batch_size=t.getint("batch_size"),
        seed=seed,
        eval_every=max(1, (args.iterations or t.getint("iterations")) // 20),
    )
    ds = grid_dataset(pairs, prof, tile)
    model = init_model(ds.x1.shape[1], tuple(int(h) for h in _floats(m["hidden"])), seed=seed,
                       ema_decay=m.getfloat("ema_decay"), output=m["output"],
                       gate=m.getboolean("gate"))
    history: list = []
    train(model, ds, tc, history=history)
    out = Path(args.out)
    hist_csv = out.with_name(out.stem + ".history.csv")
    hist_png = out.with_name(out.stem + ".history.png")
    write_manifest(out.with_name(out.name + ".manifest"), "train", cfg, args,
                   [out, hist_csv, hist_png], seed)
    save_checkpoint(out, model)
    with open(hist_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "heldout_loss"])
        for step, loss in history:
            w.writerow([step, repr(float(loss))])
    plot_training_history(hist_png, history)
    print(f"held-out loss {history[0][1]:.6g} -> {history[-1][1]:.6g}")
    return EXIT_OK


def cmd_enhance(args, cfg) -> int:
    fc, rate = feature_config(cfg)
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise DataError(f"checkpoint not found: {ck}")
    try:
        model = load_checkpoint(ck)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"unreadable checkpoint {ck}: {exc}") from exc
    prof = _profile_for(args.profile, fc, cfg)
    s = cfg["solver"]
    solver = _solver(args.solver or s["method"], args.nfe if args.nfe is not None else s.getint("nfe"))
    tile = _tile_of(model)
    inputs = [(Path(p), _read(p, rate)) for p in args.inputs]
    out = _out_dir(args.out_dir)
    targets = []
    for p, w in inputs:
        name = p.name
        for suffix in (DEGRADED_SUFFIX, ".wav"):
            if name.endswith(suffix):
                name = name[: -len(suffix)]
                break
        targets.append(out / (name + ENHANCED_SUFFIX))
    results = []
    for i, (p, w) in enumerate(inputs):
        enhanced, run = enhance_grid(model, extract(w, fc), prof, solver, seed=args.seed + i, tile=tile)
        results.append((Waveform(np.clip(invert(enhanced), -1, 1), rate), run.nfe))
    write_manifest(out / "manifest.txt", "enhance", cfg, args, targets, args.seed)
    for (p, _), target, (w, nfe) in zip(inputs, targets, results):
        write_wav(target, w)
        print(f"{p.name} -> {target.name} (nfe={nfe})")
    return EXIT_OK


def cmd_fieldviz(args, cfg) -> int:
    from .plotting import plot_field_grid

    problem = toy_problem(cfg, args)
    if problem.dim != 2:
        raise UsageError("fieldviz needs 2-D targets")
    times = _floats(args.t)
    if any(not 0 <= t < 1 for t in times):
        raise UsageError("every t must lie in [0, 1)")
    source = problem
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if model.data_dim != 2:
            raise DataError("fieldviz checkpoints must have a 2-D state")
        from .neural import forward

        y = problem.y
        source = lambda pts, t: forward(model, pts, t, np.broadcast_to(y, pts.shape), use_ema=True)  # noqa: E731
    out = _out_dir(args.out_dir)
    stems = [f"field_t{t:.3f}" for t in times]
    outputs = [out / (s + ext) for s in stems for ext in (".csv", ".png")]
    path = PathKind(args.path)
    grids = [field_grid(source, t, resolution=args.resolution, path=path) for t in times]
    write_manifest(out / "manifest.txt", "fieldviz", cfg, args, outputs)
    for t, stem, g in zip(times, stems, grids):
        write_field_grid_csv(out / (stem + ".csv"), g)
        plot_field_grid(out / (stem + ".png"), g, problem.targets, problem.y)
        print(f"t={t:g}: {int(g.flag.sum())} far-field points")
    return EXIT_OK


def cmd_dispersion(args, cfg) -> int:
    from .plotting import plot_dispersion

    problem = toy_problem(cfg, args)
    solver = _solver(args.solver, args.nfe)
    out = _out_dir(args.out_dir)
    kinds = [PathKind.JOINT, PathKind.CONSTANT_SIGMA]
    outputs = [out / f"dispersion_{k.value}.csv" for k in kinds] + [out / "dispersion.png"]
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    reports = {k.value: endpoint_dispersion("oracle", problem, args.n, solver, seed=args.seed, path=k)
               for k in kinds}
    write_manifest(out / "manifest.txt", "dispersion", cfg, args, outputs, args.seed)
    for k, target in zip(kinds, outputs):
        rep = reports[k.value]
        write_dispersion_csv(target, rep)
        print(f"{k.value}: mean distance {rep.mean_distance:.3e}, std {rep.std:.3e}")
    plot_dispersion(outputs[-1], reports, problem.targets)
    return EXIT_OK


def cmd_regimes(args, cfg) -> int:
    from .plotting import plot_regimes

    problem = toy_problem(cfg, args)
    out = _out_dir(args.out_dir)
    outputs = [out / "regimes.csv", out / "regimes.png"]
    results = sigma_regimes_experiment(problem, _floats(args.sigmas))
    write_manifest(out / "manifest.txt", "regimes", cfg, args, outputs)
    write_regimes_csv(outputs[0], results)
    plot_regimes(outputs[1], results)
    for r in results:
        print(f"sigma={r.sigma:g}: t*={r.t_star:.4f}")
    return EXIT_OK


def _metric_pairs(estimate, reference) -> list:
    e, r = Path(estimate), Path(reference)
    if e.is_file() and r.is_file():
        return [(e.name.split(".")[0], e, r)]
    if e.is_dir() and r.is_dir():
        # references never come from degraded/enhanced files, estimates never from clean ones
        refs = {p.name.split(".")[0]: p for p in sorted(r.glob("*.wav"))
                if not p.name.endswith((DEGRADED_SUFFIX, ENHANCED_SUFFIX))}
        pairs = [(p.name.split(".")[0], p, refs[p.name.split(".")[0]])
                 for p in sorted(e.glob("*.wav"))
                 if p.name.split(".")[0] in refs and not p.name.endswith(CLEAN_SUFFIX)]
        if pairs:
            return pairs
        raise DataError(f"no matching names between {e} and {r}")
    raise DataError("estimate and reference must both be files or both be directories")


def cmd_metrics(args, cfg) -> int:
    from .plotting import plot_metrics

    _, rate = feature_config(cfg)
    rows, names = [], []
    for name, e, r in _metric_pairs(args.estimate, args.reference):
        we, wr = _read(e, rate), _read(r, rate)
        if len(we) != len(wr):
            raise DataError(f"{name}: estimate and reference lengths differ")
        rows.append(evaluate_pair(we.samples, wr.samples, rate))
        names.append(name)
    report = build_report(names, rows)
    out = _out_dir(args.out_dir)
    outputs = [out / "metrics.csv", out / "metrics.png"]
    write_manifest(out / "manifest.txt", "metrics", cfg, args, outputs)
    write_report_csv(outputs[0], report)
    plot_metrics(outputs[1], report)
    for k in report.METRICS:
        print(f"{k} = {report.mean[k]:.6g} +/- {report.ci95[k]:.3g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _toy_args(p):
    p.add_argument("--targets", help="'x,y; x,y; ...'")
    p.add_argument("--y", help="'x,y'")
    p.add_argument("--sigma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowpost", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("roundtrip", help="feature round-trip error of a WAV file")
    p.add_argument("input")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("synth", help="write synthetic clean/degraded tone-burst pairs")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="estimate the prior noise scale from pairs")
    p.add_argument("pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--per-frequency", action="store_true")
    p.add_argument("--quantile", type=float)
    p.add_argument("--bandwidth", type=float)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train a tile flow model on pairs")
    p.add_argument("pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--profile")
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance degraded WAV files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--profile")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--solver", choices=[m.value for m in Method])
    p.add_argument("--nfe", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("fieldviz", help="export field grids of a 2-D toy problem")
    _toy_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--t", default="0.1,0.5,0.9")
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--path", choices=[k.value for k in PathKind], default="joint")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_fieldviz)

    p = sub.add_parser("dispersion", help="endpoint spread of joint vs constant-sigma paths")
    _toy_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--solver", choices=[m.value for m in Method], default="midpoint")
    p.add_argument("--nfe", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dispersion)

    p = sub.add_parser("regimes", help="transition time t* across prior scales")
    _toy_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sigmas", default="1.6,0.4,0.1")
    p.set_defaults(func=cmd_regimes)

    p = sub.add_parser("metrics", help="objective metrics of estimates against references")
    p.add_argument("--estimate", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"flowpost: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WavFormatError, FileNotFoundError) as exc:
        print(f"flowpost: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteStateError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"flowpost: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"flowpost: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
