"""Discrete-time Gaussian diffusion: schedule construction and closed-form kernels.

Step indices run over 1..T. Index 0 denotes clean data, with the empty-product
convention alpha_bar[0] = 1. All schedule arithmetic is carried out in float64;
the array-valued functions below work on numpy arrays and torch tensors alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

Array = Union[np.ndarray, torch.Tensor]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta schedule plus everything derived from it.

    ``betas``/``alphas``/``alpha_bars`` have length T and are indexed by
    ``t - 1``; use :meth:`alpha_bar` for 1-based access including t = 0.
    """

    betas: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty vector")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleError("every beta must lie in (0, 1)")
        betas = betas.copy()
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        alpha_bars = np.cumprod(alphas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if isinstance(t, (bool, np.bool_)) or int(t) != t:
            raise ScheduleError(f"step index must be an integer, got {t!r}")
        t = int(t)
        if not lo <= t <= self.T:
            raise ScheduleError(f"step index {t} outside [{lo}, {self.T}]")
        return t

    def alpha_bar(self, t: int) -> float:
        t = self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_step(t) - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(betas, kind=kind, beta_start=float(beta_start), beta_end=float(beta_end))


def _coef(values: Array, like: Array) -> Array:
    """Broadcast per-sample coefficients against a batch-first tensor."""
    if isinstance(like, torch.Tensor):
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        return c.reshape(-1, *([1] * (like.dim() - 1)))
    c = np.asarray(values, dtype=np.float64)
    return c.reshape(-1, *([1] * (np.ndim(like) - 1)))


def _alpha_bar_at(t, sched: NoiseSchedule):
    """Scalar alpha_bar for an int step, or a float64 vector for a batch of steps."""
    if isinstance(t, (int, np.integer)):
        return sched.alpha_bar(t)
    idx = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if idx.ndim == 0:
        return sched.alpha_bar(int(idx))
    if np.any(idx < 1) or np.any(idx > sched.T):
        raise ScheduleError(f"step indices outside [1, {sched.T}]")
    return sched.alpha_bars[idx.astype(np.int64) - 1]


def q_sample(x0: Array, t, eps: Array, sched: NoiseSchedule) -> Array:
    """Corrupt ``x0`` to step ``t``: sqrt(abar) * x0 + sqrt(1 - abar) * eps.

    ``t`` is an int, or a vector with one step per leading-axis sample.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ScheduleError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(t, (int, np.integer)):
        ab = sched.alpha_bar(sched.check_step(t))
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    ab = _alpha_bar_at(t, sched)
    if np.ndim(ab) == 0:
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


@dataclass(frozen=True)
class PosteriorParams:
    mean_coef_x0: float
    mean_coef_xt: float
    var: float

    def mean(self, x0: Array, xt: Array) -> Array:
        return self.mean_coef_x0 * x0 + self.mean_coef_xt * xt


def posterior_params(t: int, sched: NoiseSchedule, t_prev: int | None = None) -> PosteriorParams:
    """Coefficients of q(x_{t_prev} | x_t, x_0).

    With ``t_prev = t - 1`` (the default) this is the one-step posterior. A
    larger gap treats the pair as a single step of a respaced chain whose
    effective beta is 1 - abar_t / abar_prev.
    """
    t = sched.check_step(t)
    t_prev = t - 1 if t_prev is None else sched.check_step(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ScheduleError(f"t_prev={t_prev} must be smaller than t={t}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    if t_prev == t - 1:
        beta = sched.beta(t)
        alpha = float(sched.alphas[t - 1])
    else:
        alpha = ab_t / ab_prev
        beta = 1.0 - alpha
    denom = 1.0 - ab_t
    return PosteriorParams(
        mean_coef_x0=math.sqrt(ab_prev) * beta / denom,
        mean_coef_xt=math.sqrt(alpha) * (1.0 - ab_prev) / denom,
        var=float((1.0 - ab_prev) / denom * beta),
    )


def predict_x0_from_eps(xt: Array, eps_hat: Array, t: int, sched: NoiseSchedule) -> Array:
    ab = sched.alpha_bar(sched.check_step(t))
    if ab <= 0.0:
        raise ScheduleError(f"alpha_bar is zero at t={t}; x0 is not recoverable")
    return (xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def score_from_eps(eps_hat: Array, t: int, sched: NoiseSchedule) -> Array:
    """Score of q(x_t | x_0) implied by a noise estimate: -eps / sqrt(1 - abar)."""
    ab = sched.alpha_bar(sched.check_step(t))
    if ab >= 1.0:
        raise ScheduleError(f"alpha_bar is one at t={t}; the score is undefined")
    return -eps_hat / math.sqrt(1.0 - ab)
