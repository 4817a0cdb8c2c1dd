"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from fractions import Fraction

import numpy as np
import torch

from . import checkpoint as ckpt
from .inr import DimensionError
from .metrics import FRAME_METRICS, MetricError, format_report, physics_errors, sequence_metrics, track_balls
from .model import ModelConfig
from .rollout import (
    ContextError,
    Intervention,
    RolloutConfig,
    action_table,
    quantize_8bit,
    retarget,
    scaled_grid,
    superresolve,
)
from .runconfig import ConfigError, PathKeys, RolloutKeys, RunConfig
from .synthdata import (
    CollisionConfig,
    DatasetFormatError,
    SpriteConfig,
    VideoDataset,
    _atomic_write,
    gen_collisions,
    gen_sprites,
    import_raw,
    read_dataset,
    write_dataset,
)
from .training import NumericError, PrerequisiteError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PHYSICS_METRICS = ("position", "momentum", "energy")
DATA_ERRORS = (
    DatasetFormatError,
    ckpt.CheckpointFormatError,
    ConfigError,
    ContextError,
    DimensionError,
    MetricError,
    PrerequisiteError,
    OSError,
)  # anything else raising ValueError is also reported as bad input


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ratio(text: str) -> Fraction:
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or ratio: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("scale must be positive")
    return value


def _unit(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("context ratio must lie in [0, 1]")
    return value


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if text.lower() in ("", "none", "null", "{}", "∅"):
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}") from None
    if len(dims) != 5 or min(dims) < 1:
        raise argparse.ArgumentTypeError("dims must be five positive integers N,T,H,W,C")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsworld", description="Weight-space world model experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    data = sub.add_parser("data", help="generate or import datasets")
    dsub = data.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    gen = dsub.add_parser("gen")
    gen.add_argument("--kind", choices=("sprites", "collisions"), required=True)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    imp = dsub.add_parser("import")
    imp.add_argument("--raw", required=True)
    imp.add_argument("--dims", type=_dims, required=True)
    imp.add_argument("--normalize", choices=("none", "minmax", "standard"), default="none")
    imp.add_argument("--out", required=True)

    tr = sub.add_parser("train")
    tr.add_argument("--phase", choices=("1", "2", "3", "joint12"), required=True)
    tr.add_argument("--config")
    tr.add_argument("--data")
    tr.add_argument("--init")
    tr.add_argument("--out")

    ro = sub.add_parser("rollout")
    _rollout_args(ro)

    rt = sub.add_parser("retarget")
    _rollout_args(rt)
    rt.add_argument("--intervene-at", type=_int_list, required=True)
    rt.add_argument("--alien-seq", required=True, help="sequence index in --alien-data, or 'zero'")
    rt.add_argument("--alien-data", help="defaults to --data")
    rt.add_argument("--mode", choices=("content", "motion", "both"), required=True)

    sr = sub.add_parser("superres")
    sr.add_argument("--ckpt", required=True)
    sr.add_argument("--data", required=True)
    sr.add_argument("--scale", type=_ratio, required=True)
    sr.add_argument("--no-mask", action="store_true")
    sr.add_argument("--n-sequences", type=int, default=0)
    sr.add_argument("--out", required=True)

    ev = sub.add_parser("eval")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--metrics", default=",".join(FRAME_METRICS))
    ev.add_argument("--out", required=True)
    return p


def _rollout_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key = value file with rollout defaults")
    p.add_argument("--context-ratio", type=_unit)
    p.add_argument("--steps", type=int, help="rollout length (default: data length)")
    p.add_argument("--scale", type=_ratio)
    p.add_argument("--mask", action="store_const", const=True, help="apply the Nyquist mask while rendering")
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--out", required=True)


# ---------------------------------------------------------------- commands


def _config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig({})


def cmd_data(args) -> int:
    if args.data_command == "import":
        write_dataset(import_raw(args.raw, args.dims, args.normalize), args.out)
        return EXIT_OK
    cfg = _config(args.config)
    ds = gen_sprites(cfg.build(SpriteConfig)) if args.kind == "sprites" else gen_collisions(cfg.build(CollisionConfig))
    write_dataset(ds, args.out)
    return EXIT_OK


def _model_config(cfg: RunConfig, ds: VideoDataset) -> ModelConfig:
    _, _, h, w, c = ds.shape
    shape = {k: v for k, v in (("height", h), ("width", w), ("channels", c)) if k not in cfg.values}
    return cfg.build(ModelConfig, **shape)


def cmd_train(args) -> int:
    cfg = _config(args.config)
    paths = cfg.build(PathKeys)
    data, out, init = args.data or paths.data, args.out or paths.out, args.init or paths.init
    if not data or not out:
        raise UsageError("train needs --data and --out (or data/out config keys)")
    tcfg = cfg.build(TrainConfig, phase=args.phase)
    ds = read_dataset(data)
    purpose = {"2": "phase2", "3": "phase3"}.get(args.phase)
    if init:
        model = ckpt.load_checkpoint(init, purpose)
        prior = int(model.meta.get("step", 0))
    else:
        model, prior = _model_config(cfg, ds), 0
    result = train(tcfg, ds, model)
    meta = {"phase": tcfg.phase, "step": prior + tcfg.steps, "seed": tcfg.seed}
    ckpt.save_checkpoint(result.model, out, meta)
    _atomic_write(out + ".log", result.log_text().encode())
    return EXIT_OK


def _references(ds: VideoDataset, n: int) -> torch.Tensor:
    frames = ds.frames if n <= 0 else ds.frames[:n]
    return torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))


def _rollout_config(args, ds: VideoDataset) -> tuple[RolloutConfig, int]:
    """Flags override config keys; returns the config and the sequence count."""
    keys = _config(args.config).build(RolloutKeys)
    pick = lambda flag, key: key if flag is None else flag  # noqa: E731
    steps = pick(args.steps, keys.T_inf) or ds.shape[1]
    rc = RolloutConfig(
        T_inf=steps,
        rho=pick(args.context_ratio, keys.rho),
        scale=pick(args.scale, Fraction(keys.scale)),
        apply_mask=pick(args.mask, keys.apply_mask),
    )
    return rc, pick(args.n_sequences, keys.n_sequences)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def _file_frames(frames: torch.Tensor) -> np.ndarray:
    """Clamp and snap to 8-bit levels; the file still stores float32."""
    return (quantize_8bit(frames).to(torch.float32) / 255).numpy()


def _write_trace(trace, out: str) -> None:
    _check_finite(trace.frames, "rendered frames")
    write_dataset(VideoDataset(_file_frames(trace.frames)), out)
    _atomic_write(out + ".actions.tsv", action_table(trace).encode())


def _check_shape(model, ds: VideoDataset) -> None:
    want = (model.config.height, model.config.width, model.config.channels)
    if tuple(ds.shape[2:]) != want:
        raise DimensionError(f"data frames are {tuple(ds.shape[2:])}, checkpoint expects {want}")


def cmd_rollout(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt, "rollout")
    ds = read_dataset(args.data)
    _check_shape(model, ds)
    rc, n = _rollout_config(args, ds)
    trace = retarget(_references(ds, n), rc, model, scaled_grid(model, rc.scale))
    _write_trace(trace, args.out)
    return EXIT_OK


def _intervention(args, model, rc: RolloutConfig) -> Intervention:
    steps = set(args.intervene_at)
    bad = sorted(t for t in steps if not 1 <= t < rc.T_inf)
    if bad:
        raise ContextError(f"intervention steps {bad} outside 1..{rc.T_inf - 1}")
    states, actions = {}, {}
    if steps and args.alien_seq.lower() in ("zero", "null", "none"):
        for t in steps:
            if args.mode in ("content", "both"):
                states[t] = torch.zeros(model.config.d_z)
            if args.mode in ("motion", "both"):
                actions[t] = torch.zeros(model.config.d_u)
        return Intervention(steps, states, actions)
    if steps:
        alien_ds = read_dataset(args.alien_data or args.data)
        _check_shape(model, alien_ds)
        try:
            k = int(args.alien_seq)
        except ValueError:
            raise UsageError(f"--alien-seq must be an integer or 'zero', got {args.alien_seq!r}") from None
        if not 0 <= k < alien_ds.shape[0]:
            raise ContextError(f"alien sequence {k} outside 0..{alien_ds.shape[0] - 1}")
        need = max(steps) + (1 if args.mode != "content" else 0)
        if alien_ds.shape[1] < need:
            raise ContextError(f"alien sequence has {alien_ds.shape[1]} frames, intervention needs {need}")
        with torch.no_grad():
            z = model.encode(torch.from_numpy(np.ascontiguousarray(alien_ds.frames[k, :need], dtype=np.float32)))
            for t in steps:
                if args.mode in ("content", "both"):
                    states[t] = z[t - 1]
                if args.mode in ("motion", "both"):
                    actions[t] = model.action(z[t - 1], z[t])
    return Intervention(steps, states, actions)


def cmd_retarget(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt, "rollout")
    ds = read_dataset(args.data)
    _check_shape(model, ds)
    rc, n = _rollout_config(args, ds)
    iv = _intervention(args, model, rc)
    trace = retarget(_references(ds, n), rc, model, scaled_grid(model, rc.scale), iv)
    _write_trace(trace, args.out)
    return EXIT_OK


def cmd_superres(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt, "superres")
    ds = read_dataset(args.data)
    _check_shape(model, ds)
    rc = RolloutConfig(T_inf=ds.shape[1], rho=1.0)
    trace = retarget(_references(ds, args.n_sequences), rc, model)
    frames = superresolve(trace.latents, model, args.scale, apply_mask=not args.no_mask)
    _check_finite(frames, "super-resolved frames")
    write_dataset(VideoDataset(_file_frames(frames)), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in FRAME_METRICS + PHYSICS_METRICS]
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; choose from {', '.join(FRAME_METRICS + PHYSICS_METRICS)}")
    pred, ref = read_dataset(args.pred), read_dataset(args.ref)
    if pred.shape[2:] != ref.shape[2:]:
        raise DimensionError(f"prediction frames {pred.shape[2:]} vs reference {ref.shape[2:]}")
    if pred.shape[0] > ref.shape[0]:
        raise DimensionError(f"{pred.shape[0]} predicted sequences but only {ref.shape[0]} references")
    frame_names = [m for m in names if m in FRAME_METRICS]
    physics = [m for m in names if m in PHYSICS_METRICS]
    if physics and not ref.has_truth:
        raise DatasetFormatError("physics metrics need a reference file with a truth block")
    rows = []
    for i in range(pred.shape[0]):
        if frame_names:
            scores = sequence_metrics(pred.frames[i], ref.frames[i], frame_names)
            rows += [(i, m, scores[m]) for m in frame_names]
        if physics:
            T = min(pred.shape[1], ref.shape[1])
            track = track_balls(pred.frames[i, :T])
            errs = dict(zip(PHYSICS_METRICS, physics_errors(track, ref.positions[i, :T], ref.radii[i])))
            rows += [(i, m, errs[m]) for m in physics]
    _atomic_write(args.out, format_report(rows).encode())
    return EXIT_OK


COMMANDS = {
    "data": cmd_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "retarget": cmd_retarget,
    "superres": cmd_superres,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (*DATA_ERRORS, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
