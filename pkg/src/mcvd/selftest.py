"""Fast invariant suites behind ``mcvd selftest``."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np
import torch

from .checkpoint import decode_checkpoint, encode_checkpoint
from .data_io import decode_video, encode_video
from .denoiser import Denoiser, LinearToyDenoiser, count_params, noise_embedding
from .masking import BlockLayout, MaskPair, TaskKind, apply_mask, sample_masks, task_of_masks
from .sampler import GaussianDataDenoiser, SamplerConfig, sample_block
from .schedule import build_schedule, posterior_params, predict_x0_from_eps, q_sample
from .trainer import TrainConfig, Trainer, grad_check, tiny_denoiser_config


def _schedule() -> str:
    rng = np.random.default_rng(0)
    for _ in range(20):
        lo = rng.uniform(1e-5, 1e-2)
        s = build_schedule(int(rng.integers(1, 500)), lo, rng.uniform(lo, 0.5))
        ab = s.alpha_bars
        assert np.all(np.diff(ab) < 0)
        ref = np.array([np.prod(s.alphas[:i + 1]) for i in range(s.T)])
        assert np.max(np.abs(ab - ref) / ref) <= 1e-12
        assert posterior_params(1, s).var == 0.0
        assert all(posterior_params(t, s).var <= s.beta(t) for t in range(1, s.T + 1))
    s = build_schedule(1000)
    x0 = rng.standard_normal(64)
    eps = rng.standard_normal(64)
    for t in (1, 500, 1000):
        assert np.max(np.abs(predict_x0_from_eps(q_sample(x0, t, eps, s), eps, t, s) - x0)) < 1e-6
    return "20 random schedules; monotone, product identity, posterior variance bounds, inverse"


def _masking() -> str:
    rng = np.random.default_rng(0)
    counts = {task: 0 for task in TaskKind}
    n = 10_000
    for _ in range(n):
        counts[task_of_masks(sample_masks(0.5, rng))] += 1
    stat = sum((c - n / 4) ** 2 / (n / 4) for c in counts.values())
    assert stat < 11.345, f"chi-square {stat:.2f}"  # 3 dof, alpha = 0.01
    assert all(sample_masks(0.0, rng) == MaskPair(1, 1, 0.0) for _ in range(100))
    assert all(sample_masks(1.0, rng) == MaskPair(0, 0, 1.0) for _ in range(100))
    x = np.ones(3)
    assert np.all(apply_mask(x, 0) == 0) and apply_mask(x, 1) is x
    return f"task mix chi-square {stat:.2f} < 11.34; degenerate p_mask exact"


def _embedding() -> str:
    t = torch.rand(100, dtype=torch.float64)
    e = noise_embedding(t, 128)
    assert torch.allclose((e**2).sum(-1), torch.full((100,), 64.0, dtype=torch.float64), atol=1e-12)
    return "||e(t)||^2 = D/2 for 100 noise levels"


def _gradient() -> str:
    lay = BlockLayout(1, 2, 1, 8, 8, 1)
    rng = np.random.default_rng(0)
    batch = {"past": rng.random((2, 1, 1, 8, 8)), "current": rng.random((2, 2, 1, 8, 8)),
             "future": rng.random((2, 1, 1, 8, 8))}
    sched = build_schedule(1000)
    cfg = TrainConfig()
    unet = Denoiser(tiny_denoiser_config(lay))
    err = grad_check(unet, batch, sched, cfg, n_coords=200)
    assert err < 1e-3, f"U-Net relative error {err:.2e}"
    lin_err = grad_check(LinearToyDenoiser(lay), batch, sched, cfg, n_coords=200)
    assert lin_err < 1e-6, f"linear relative error {lin_err:.2e}"
    return f"tiny U-Net ({count_params(unet)} params) {err:.1e} < 1e-3; linear toy {lin_err:.1e} < 1e-6"


def _containers() -> str:
    rng = np.random.default_rng(0)
    v = rng.random((3, 4, 4, 1)).astype(np.float32)
    assert np.array_equal(decode_video(encode_video(v)), v)
    lay = BlockLayout(1, 2, 0, 8, 8, 1)
    data = {"past": rng.random((2, 1, 1, 8, 8)), "current": rng.random((2, 2, 1, 8, 8)),
            "future": np.zeros((2, 0, 1, 8, 8))}
    tr = Trainer(Denoiser(tiny_denoiser_config(lay)), build_schedule(50), TrainConfig(batch_size=2), data)
    tr.run(2)
    raw = encode_checkpoint(tr.state())
    assert encode_checkpoint(decode_checkpoint(raw)) == raw
    return "video and checkpoint round trips byte-identical"


def _sampler() -> str:
    sched = build_schedule(1000)
    oracle = GaussianDataDenoiser(1.0, 1.0, sched)
    lay = BlockLayout(0, 1, 0, 1, 1, 1)
    scfg = SamplerConfig("ddim", 100, seed=0, task=TaskKind.UNCONDITIONAL, clamp=False)
    x = sample_block(None, None, TaskKind.UNCONDITIONAL, oracle, sched, scfg, lay, batch=10_000)
    mean, var = float(x.mean()), float(x.var())
    assert abs(mean - 1.0) < 0.05 and abs(var - 1.0) < 0.05, (mean, var)
    return f"DDIM-100 with exact Gaussian denoiser: mean {mean:.3f}, var {var:.3f}"


SUITES: list[tuple[str, Callable[[], str]]] = [
    ("schedule", _schedule),
    ("masking", _masking),
    ("embedding", _embedding),
    ("gradient", _gradient),
    ("containers", _containers),
    ("sampler", _sampler),
]


def run_all(emit=print) -> bool:
    ok = True
    for name, fn in SUITES:
        t0 = time.perf_counter()
        try:
            detail = fn()
            emit(f"PASS {name:<11} {detail} ({time.perf_counter() - t0:.2f}s)")
        except Exception as e:  # report every suite, then fail overall
            ok = False
            emit(f"FAIL {name:<11} {type(e).__name__}: {e}")
    return ok
