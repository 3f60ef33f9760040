"""Blockwise past/future masking and the four tasks it selects."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class TaskKind(str, enum.Enum):
    FUTURE_PREDICTION = "FuturePrediction"
    PAST_PREDICTION = "PastPrediction"
    UNCONDITIONAL = "Unconditional"
    INTERPOLATION = "Interpolation"


# CLI verbs for each task
TASK_ALIASES = {
    "predict": TaskKind.FUTURE_PREDICTION,
    "retrodict": TaskKind.PAST_PREDICTION,
    "generate": TaskKind.UNCONDITIONAL,
    "interpolate": TaskKind.INTERPOLATION,
}


class MaskingRegime(str, enum.Enum):
    NONE = "None"
    PAST_ONLY = "PastOnly"
    PAST_FUTURE = "PastFuture"


@dataclass(frozen=True)
class BlockLayout:
    p: int
    k: int
    f: int = 0
    height: int = 16
    width: int = 16
    channels: int = 1

    def __post_init__(self):
        if self.p < 0 or self.f < 0:
            raise ValueError("past/future frame counts must be non-negative")
        if self.k < 1:
            raise ValueError("need at least one current frame")
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError("frame dimensions must be positive")

    @property
    def window(self) -> int:
        return self.p + self.k + self.f

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass(frozen=True)
class MaskPair:
    m_p: int
    m_f: int
    p_mask: float = 0.0

    def __post_init__(self):
        if self.m_p not in (0, 1) or self.m_f not in (0, 1):
            raise ValueError("masks are binary")


def _check_prob(p_mask: float) -> float:
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask must lie in [0, 1], got {p_mask}")
    return float(p_mask)


def sample_masks(p_mask: float, rng: np.random.Generator) -> MaskPair:
    """Draw m_p and m_f independently; each is kept (=1) with probability 1 - p_mask."""
    p_mask = _check_prob(p_mask)
    u = rng.random(2)
    return MaskPair(int(u[0] >= p_mask), int(u[1] >= p_mask), p_mask)


def sample_mask_batch(p_mask: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, 2)`` int array of per-sample (m_p, m_f) draws, same law as :func:`sample_masks`."""
    p_mask = _check_prob(p_mask)
    return (rng.random((n, 2)) >= p_mask).astype(np.int64)


def apply_mask(frames, m):
    """Keep ``frames`` when m == 1, zero them when m == 0. Works for numpy and torch."""
    if m not in (0, 1):
        raise ValueError("mask must be 0 or 1")
    return frames if m == 1 else frames * 0


_TASKS = {
    (1, 0): TaskKind.FUTURE_PREDICTION,
    (0, 1): TaskKind.PAST_PREDICTION,
    (0, 0): TaskKind.UNCONDITIONAL,
    (1, 1): TaskKind.INTERPOLATION,
}
_MASKS = {task: masks for masks, task in _TASKS.items()}


def task_of_masks(m: MaskPair) -> TaskKind:
    return _TASKS[(m.m_p, m.m_f)]


def masks_for_task(task: TaskKind) -> MaskPair:
    m_p, m_f = _MASKS[TaskKind(task)]
    return MaskPair(m_p, m_f)


def effective_task(m_p: int, m_f: int, layout: BlockLayout) -> TaskKind:
    """Task actually posed once empty conditioning blocks are accounted for.

    A block with zero frames carries no information whatever its mask bit, so
    it counts as masked.
    """
    return _TASKS[(m_p if layout.p > 0 else 0, m_f if layout.f > 0 else 0)]


def regime_masks(regime: MaskingRegime, p_mask: float) -> set[tuple[int, int]]:
    """Every (m_p, m_f) a training regime can emit with non-zero probability."""
    regime = MaskingRegime(regime)
    p_mask = _check_prob(p_mask)
    bits = {b for b in (0, 1) if (b == 1 and p_mask < 1.0) or (b == 0 and p_mask > 0.0)}
    if regime is MaskingRegime.NONE:
        return {(1, 1)}
    if regime is MaskingRegime.PAST_ONLY:
        return {(b, 1) for b in bits}
    return {(a, b) for a in bits for b in bits}


def regime_capabilities(regime: MaskingRegime, p_mask: float, layout: BlockLayout) -> set[TaskKind]:
    """Tasks a model trained under ``regime`` has seen, and may therefore be asked to do."""
    return {effective_task(a, b, layout) for a, b in regime_masks(regime, p_mask)}
