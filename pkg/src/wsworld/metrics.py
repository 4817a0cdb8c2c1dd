"""Frame-level evaluation metrics: distributional, structural, spectral and physical.

All metrics work on float64 numpy arrays with channels-last frames ``(H, W, C)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

N_BINS = 64


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Histogram:
    p: np.ndarray  # normalised counts
    centers: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.p.shape[0]


def _as_frame(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    return x


def intensity_hist(frame, n_bins: int = N_BINS) -> Histogram:
    """Pixel-intensity histogram on [0, 1]; channels are pooled."""
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    x = np.clip(np.asarray(frame, dtype=np.float64).ravel(), 0.0, 1.0)
    counts, edges = np.histogram(x, bins=n_bins, range=(0.0, 1.0))
    return Histogram(counts / counts.sum(), 0.5 * (edges[:-1] + edges[1:]))


def pooled_hist(frames, n_bins: int = N_BINS) -> Histogram:
    return intensity_hist(np.asarray(frames), n_bins)


def _same_bins(p: Histogram, q: Histogram) -> None:
    if p.n_bins != q.n_bins or not np.array_equal(p.centers, q.centers):
        raise MetricError("histograms use different binning")


def w1(p: Histogram, q: Histogram) -> float:
    """Wasserstein-1 on bin centres via the CDF difference."""
    _same_bins(p, q)
    gaps = np.diff(p.centers)
    diff = np.cumsum(p.p - q.p)[:-1]
    return float(np.sum(np.abs(diff) * gaps))


def _kl(a: np.ndarray, b: np.ndarray) -> float:
    nz = a > 0
    return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon distance (square root of the divergence, natural log)."""
    _same_bins(p, q)
    m = 0.5 * (p.p + q.p)
    val = 0.5 * _kl(p.p, m) + 0.5 * _kl(q.p, m)
    return math.sqrt(max(val, 0.0))


def bhattacharyya(p: Histogram, q: Histogram) -> float:
    """``-ln sum sqrt(p q)``; ``inf`` for disjoint supports."""
    _same_bins(p, q)
    if np.array_equal(p.p, q.p):
        return 0.0
    bc = float(np.sum(np.sqrt(p.p * q.p)))
    if bc == 0.0:
        return math.inf
    return max(-math.log(bc), 0.0)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray, c1: float, c2: float) -> float:
    f = lambda x: convolve2d(x, win[::-1, ::-1], mode="valid")  # noqa: E731  (correlation)
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions, averaged across channels."""
    a, b = _as_frame(a), _as_frame(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < win_size:
        raise MetricError(f"frame {a.shape[:2]} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, c1, c2) for c in range(a.shape[-1])]))


def mse(a, b) -> float:
    a, b = _as_frame(a), _as_frame(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` with peak 1; ``inf`` for identical frames."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def fft_distance(gt_frames, pred) -> float:
    """Distance between the GT-averaged FFT magnitude and ``|FFT(pred)|``, over ``H*W``."""
    gt = np.asarray(gt_frames, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.ndim == 4:
        if gt.shape[-1] != 1:
            raise MetricError("fft_distance is only defined for single-channel frames")
        gt = gt[..., 0]
    elif gt.ndim == 2:
        gt = gt[None]
    if pred.ndim == 3:
        if pred.shape[-1] != 1:
            raise MetricError("fft_distance is only defined for single-channel frames")
        pred = pred[..., 0]
    if gt.shape[1:] != pred.shape:
        raise MetricError(f"shape mismatch {gt.shape[1:]} vs {pred.shape}")
    ref = np.mean(np.abs(np.fft.fft2(gt)), axis=0)
    h, w = pred.shape
    return float(np.linalg.norm(ref - np.abs(np.fft.fft2(pred))) / (h * w))


# ------------------------------------------------------------------ physics


@dataclass
class BallTrack:
    positions: np.ndarray  # (T, 2 balls, 2) normalised (x, y)
    valid: np.ndarray  # (T, 2) bool


def extract_positions(frame, tau: float = 0.8):
    """Red/blue centroids by colour thresholding.

    Returns ``(positions (2, 2), valid (2,))``; ball 0 is red, ball 1 blue.
    Centroids use pixel centres, ``((j + 0.5) / W, (i + 0.5) / H)``.
    """
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[-1] != 3:
        raise MetricError("ball extraction needs an RGB frame")
    r, g, b = f[..., 0], f[..., 1], f[..., 2]
    masks = [(r > tau) & (g < tau) & (b < tau), (b > tau) & (r < tau) & (g < tau)]
    h, w = r.shape
    out = np.zeros((2, 2))
    valid = np.zeros(2, bool)
    for i, m in enumerate(masks):
        ii, jj = np.nonzero(m)
        if ii.size:
            out[i] = (jj.mean() + 0.5) / w, (ii.mean() + 0.5) / h
            valid[i] = True
    return out, valid


def track_balls(frames, tau: float = 0.8) -> BallTrack:
    """Per-frame centroids; empty masks reuse the last known position.

    Leading frames with no detection take the first later detection (0.5, 0.5
    if a ball is never seen).
    """
    found = [extract_positions(f, tau) for f in frames]
    pos = np.stack([p for p, _ in found])
    valid = np.stack([v for _, v in found])
    for ball in range(2):
        seen = np.nonzero(valid[:, ball])[0]
        last = pos[seen[0], ball].copy() if seen.size else np.array([0.5, 0.5])
        for t in range(len(frames)):
            if valid[t, ball]:
                last = pos[t, ball].copy()
            else:
                pos[t, ball] = last
    return BallTrack(pos, valid)


def _momentum_energy(positions: np.ndarray, masses: np.ndarray, dt: float):
    v = np.diff(positions, axis=0) / dt  # (T-1, 2, 2)
    mom = np.einsum("b,tbd->td", masses, v)
    ke = 0.5 * np.einsum("b,tb->t", masses, np.sum(v * v, axis=-1))
    return mom, ke


def physics_errors(track, truth, radii, dt: float = 0.1) -> tuple[float, float, float]:
    """Time-averaged absolute errors of position, momentum and kinetic energy.

    ``track``/``truth`` are ``(T, 2, 2)`` positions (or BallTrack); masses are ``r**2``.
    """
    p = np.asarray(getattr(track, "positions", track), dtype=np.float64)
    q = np.asarray(getattr(truth, "positions", truth), dtype=np.float64)
    if p.shape != q.shape:
        raise MetricError(f"track length mismatch {p.shape} vs {q.shape}")
    masses = np.asarray(radii, dtype=np.float64) ** 2
    pos_err = float(np.mean(np.linalg.norm(p - q, axis=-1)))
    mom_p, ke_p = _momentum_energy(p, masses, dt)
    mom_q, ke_q = _momentum_energy(q, masses, dt)
    mom_err = float(np.mean(np.linalg.norm(mom_p - mom_q, axis=-1)))
    ke_err = float(np.mean(np.abs(ke_p - ke_q)))
    return pos_err, mom_err, ke_err


# ------------------------------------------------------------------ reports

FRAME_METRICS = ("mse", "psnr", "ssim", "w1", "jsd", "bhattacharyya", "fft")


def sequence_metrics(pred, ref, metrics=FRAME_METRICS, n_bins: int = N_BINS) -> dict[str, float]:
    """Time-averaged metrics of a predicted sequence against its reference.

    Steps past the reference horizon compare histograms against the pooled
    reference distribution and pixel metrics against the first reference frame.
    """
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    ref = np.asarray(ref, dtype=np.float64)
    pooled = pooled_hist(ref, n_bins)
    out: dict[str, list[float]] = {m: [] for m in metrics}
    for t, frame in enumerate(pred):
        gt = ref[t] if t < len(ref) else ref[0]
        p_gt = intensity_hist(ref[t], n_bins) if t < len(ref) else pooled
        p_hat = intensity_hist(frame, n_bins)
        for m in metrics:
            if m == "mse":
                out[m].append(mse(frame, gt))
            elif m == "psnr":
                out[m].append(psnr(frame, gt))
            elif m == "ssim":
                out[m].append(ssim(frame, gt))
            elif m == "w1":
                out[m].append(w1(p_gt, p_hat))
            elif m == "jsd":
                out[m].append(jsd(p_gt, p_hat))
            elif m == "bhattacharyya":
                out[m].append(bhattacharyya(p_gt, p_hat))
            elif m == "fft":
                out[m].append(fft_distance(ref, frame))
            else:
                raise MetricError(f"unknown metric {m!r}")
    return {m: float(np.mean(v)) for m, v in out.items()}


def format_report(rows: list[tuple[int, str, float]]) -> str:
    """Tab-separated ``sequence metric value`` rows followed by mean +- std summaries."""
    lines = ["sequence\tmetric\tvalue"]
    for seq, name, value in rows:
        lines.append(f"{seq}\t{name}\t{value:.6g}")
    names = list(dict.fromkeys(name for _, name, _ in rows))
    for name in names:
        vals = np.array([v for _, n, v in rows if n == name], dtype=np.float64)
        with np.errstate(invalid="ignore"):  # inf sentinels give an undefined spread
            lines.append(f"mean\t{name}\t{np.mean(vals):.6g} ± {np.std(vals):.6g}")
    return "\n".join(lines) + "\n"
