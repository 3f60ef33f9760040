"""Fidelity metrics for generated videos: MSE, PSNR, SSIM and best-of-n aggregation.

Videos are ``(frames, H, W, C)`` arrays. FVD and LPIPS are not provided.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter, gaussian_filter

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB for identical inputs."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def ssim(a, b, window: int = 7, K1: float = 0.01, K2: float = 0.03, peak: float = 1.0,
         gaussian: bool = False) -> float:
    """Mean SSIM of two single-channel frames over all fully-contained windows.

    Local statistics use a uniform ``window x window`` box (population
    variance) or, with ``gaussian``, a sigma-1.5 Gaussian of the same support.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D frame, got shape {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"frame {a.shape} smaller than the {window}x{window} window")
    C1, C2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    if gaussian:
        def filt(x):
            return gaussian_filter(x, 1.5, truncate=(window // 2) / 1.5, mode="constant")
    else:
        def filt(x):
            return uniform_filter(x, window, mode="constant")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2))
    r = window // 2
    return float(s[r:a.shape[0] - r, r:a.shape[1] - r].mean())


def video_ssim(a, b, **kw) -> float:
    """SSIM averaged over frames and channels."""
    a, b = _pair(a, b)
    if a.ndim != 4:
        raise ValueError(f"expected (frames, H, W, C), got {a.shape}")
    return float(np.mean([ssim(a[f, :, :, c], b[f, :, :, c], **kw)
                          for f in range(a.shape[0]) for c in range(a.shape[3])]))


METRICS: dict[str, Callable] = {"mse": mse, "psnr": psnr, "ssim": video_ssim}
HIGHER_IS_BETTER = {"mse": False, "psnr": True, "ssim": True}


def best_of_n(trajectories: Sequence, ref, metric: str | Callable = "psnr") -> float:
    """Best score over sampled trajectories (max for similarities, min for MSE)."""
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    fn = METRICS[metric] if isinstance(metric, str) else metric
    higher = HIGHER_IS_BETTER.get(metric, True) if isinstance(metric, str) else True
    scores = [fn(t, ref) for t in trajectories]
    return max(scores) if higher else min(scores)


@dataclass
class MetricReport:
    video_id: str
    mse: float
    psnr: float
    ssim: float
    agg: str
    n: int

    def row(self) -> dict:
        return {"video_id": self.video_id, "mse": self.mse, "psnr": self.psnr, "ssim": self.ssim, "agg": self.agg}


def evaluate_video(video_id: str, trajectories: Sequence, ref) -> list[MetricReport]:
    """Mean and best-of-n reports for one reference video."""
    per = {name: [METRICS[name](t, ref) for t in trajectories] for name in METRICS}
    n = len(trajectories)
    if n == 0:
        raise ValueError("need at least one trajectory")
    mean = MetricReport(video_id, *(float(np.mean(per[k])) for k in ("mse", "psnr", "ssim")), "mean", n)
    best = MetricReport(video_id, float(min(per["mse"])), float(max(per["psnr"])), float(max(per["ssim"])),
                        "best_of_n", n)
    return [mean, best]
