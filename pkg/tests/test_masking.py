import numpy as np
import pytest
import torch
from scipy import stats

from mcvd.masking import (BlockLayout, MaskingRegime, MaskPair, TaskKind, apply_mask, effective_task,
                          masks_for_task, regime_capabilities, sample_mask_batch, sample_masks, task_of_masks)


def test_degenerate_probabilities():
    rng = np.random.default_rng(0)
    assert all(sample_masks(0.0, rng) == MaskPair(1, 1, 0.0) for _ in range(500))
    assert all(sample_masks(1.0, rng) == MaskPair(0, 0, 1.0) for _ in range(500))


def test_half_probability_frequencies():
    rng = np.random.default_rng(1)
    n = 10_000
    counts = {t: 0 for t in TaskKind}
    for _ in range(n):
        counts[task_of_masks(sample_masks(0.5, rng))] += 1
    freqs = np.array(list(counts.values())) / n
    assert np.all(np.abs(freqs - 0.25) < 0.02)
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_masks_independent_and_keep_probability():
    m = sample_mask_batch(0.3, 200_000, np.random.default_rng(2))
    keep = m.mean(0)
    assert np.all(np.abs(keep - 0.7) < 0.005)
    joint = np.mean(m[:, 0] * m[:, 1])
    assert abs(joint - 0.49) < 0.005


def test_seeded_sequences_reproduce():
    a = [sample_masks(0.5, np.random.default_rng(7)) for _ in range(3)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_masks(0.5, r1) for _ in range(50)] == [sample_masks(0.5, r2) for _ in range(50)]
    assert a[0] == a[1] == a[2]


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_probability_range_checked(p):
    with pytest.raises(ValueError):
        sample_masks(p, np.random.default_rng(0))


def test_apply_mask():
    x = torch.arange(6.0).reshape(1, 2, 3)
    assert apply_mask(x, 1) is x
    assert torch.equal(apply_mask(x, 0), torch.zeros_like(x))
    assert torch.equal(apply_mask(apply_mask(x, 0), 1), torch.zeros_like(x))
    arr = np.ones((2, 2))
    assert np.array_equal(apply_mask(arr, 0), np.zeros((2, 2)))


@pytest.mark.parametrize("masks, task", [
    ((1, 1), TaskKind.INTERPOLATION),
    ((0, 0), TaskKind.UNCONDITIONAL),
    ((1, 0), TaskKind.FUTURE_PREDICTION),
    ((0, 1), TaskKind.PAST_PREDICTION),
])
def test_task_table(masks, task):
    assert task_of_masks(MaskPair(*masks)) is task
    assert (masks_for_task(task).m_p, masks_for_task(task).m_f) == masks


def test_task_mapping_is_bijective():
    tasks = {task_of_masks(MaskPair(a, b)) for a in (0, 1) for b in (0, 1)}
    assert tasks == set(TaskKind)


def test_layout_validation():
    with pytest.raises(ValueError):
        BlockLayout(1, 0, 1)
    with pytest.raises(ValueError):
        BlockLayout(-1, 2, 0)
    assert BlockLayout(2, 4, 1).window == 7


def test_effective_task_for_empty_future():
    lay = BlockLayout(2, 4, 0)
    assert effective_task(1, 1, lay) is TaskKind.FUTURE_PREDICTION
    assert effective_task(0, 1, lay) is TaskKind.UNCONDITIONAL


def test_regime_capabilities():
    with_future = BlockLayout(2, 4, 2)
    no_future = BlockLayout(2, 4, 0)
    assert regime_capabilities(MaskingRegime.PAST_FUTURE, 0.5, with_future) == set(TaskKind)
    assert regime_capabilities(MaskingRegime.PAST_ONLY, 0.5, no_future) == {
        TaskKind.FUTURE_PREDICTION, TaskKind.UNCONDITIONAL}
    assert regime_capabilities(MaskingRegime.NONE, 0.5, no_future) == {TaskKind.FUTURE_PREDICTION}
    assert regime_capabilities(MaskingRegime.PAST_FUTURE, 0.0, with_future) == {TaskKind.INTERPOLATION}
    assert regime_capabilities(MaskingRegime.PAST_FUTURE, 1.0, with_future) == {TaskKind.UNCONDITIONAL}
