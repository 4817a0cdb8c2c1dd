"""Render one encoded frame at increasing scales, with and without the band mask.

Usage: python scripts/superres_demo.py model.ckpt frames.bin [scale ...]
Prints the fraction of spectral energy above the training grid's Nyquist band.
"""
import sys

import numpy as np
import torch

from wsworld.checkpoint import load_checkpoint
from wsworld.rollout import superresolve
from wsworld.synthdata import read_dataset


def above_nyquist(img: np.ndarray, h: int, w: int) -> float:
    power = np.abs(np.fft.fft2(img, axes=(0, 1))) ** 2
    ky = np.abs(np.fft.fftfreq(img.shape[0]) * img.shape[0])
    kx = np.abs(np.fft.fftfreq(img.shape[1]) * img.shape[1])
    high = (ky[:, None] > h / 2) | (kx[None, :] > w / 2)
    return float(power[high].sum() / power.sum())


def main():
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    ckpt, data, *scales = sys.argv[1:]
    model = load_checkpoint(ckpt, purpose="phase3")
    frames = torch.from_numpy(read_dataset(data).frames[:1, :1])
    with torch.no_grad():
        z = model.encode(frames)[0, 0]
    h, w = model.config.height, model.config.width
    for s in [int(x) for x in scales] or [2, 4, 8]:
        for mask in (False, True):
            img = superresolve(z, model, s, apply_mask=mask).numpy()
            print(f"x{s:<3d} mask={mask!s:5}  {img.shape}  high-band energy {above_nyquist(img, h, w):.3e}")


if __name__ == "__main__":
    main()
