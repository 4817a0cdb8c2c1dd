"""Train the desk-scale sprite world model and report the headline numbers.

Usage: python scripts/desk_experiment.py [out.ckpt] [key=value ...]

Keys override the joint-phase TrainConfig (e.g. steps=500 lambda_ssim=0).
"""
import sys
from dataclasses import fields, replace

import torch

from wsworld.checkpoint import save_checkpoint
from wsworld.experiments import DeskConfig, retarget_report, run_desk
from wsworld.training import TrainConfig


def parse_overrides(args):
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for arg in args:
        key, _, value = arg.partition("=")
        if key not in types:
            sys.exit(f"unknown key {key!r}")
        kind = {"int": int, "float": float, "bool": lambda v: v.lower() in ("1", "true", "yes")}.get(str(types[key]), str)
        out[key] = kind(value)
    return out


def main():
    torch.set_num_threads(1)
    args = sys.argv[1:]
    if any(a.startswith("-") for a in args):
        sys.exit(__doc__)
    out = args.pop(0) if args and "=" not in args[0] else "desk.ckpt"
    cfg = DeskConfig()
    cfg = replace(cfg, joint=replace(cfg.joint, **parse_overrides(args)))

    def progress(step, loss):
        if step % 250 == 0:
            print(f"step {step:5d}  loss {loss:.4f}", flush=True)

    res = run_desk(cfg, progress)
    print(f"joint phase: {res.joint_seconds:.0f} s")
    print(f"reconstruction loss: {res.rec_init:.4f} -> {res.rec_final:.4f} ({res.rec_init / res.rec_final:.1f}x)")
    print(f"held-out one-step SSIM: {res.one_step_ssim:.3f} (copy {res.copy_ssim:.3f}, reconstruction {res.recon_ssim:.3f})")
    rep = retarget_report(res.model, res.heldout)
    print(f"content swap: pixel change {rep.pixel_change:.3f}, max action change {max(rep.action_change):.3f}")
    print(f"zero motion: displacement ratio {rep.displacement_ratio:.3f}")
    save_checkpoint(res.model, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
