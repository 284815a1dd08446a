import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scan_xai.errors import DomainError
from scan_xai.masking import gradient_mask, percentile_threshold, sample_training_percentile


@pytest.mark.parametrize("p, expected", [(50, 2.5), (0, 1.0), (100, 4.0), (25, 1.75)])
def test_percentile_examples(p, expected):
    assert float(percentile_threshold(torch.tensor([1.0, 2.0, 3.0, 4.0]), p)) == expected


@pytest.mark.parametrize("p", [0, 13.7, 50, 99.9, 100])
def test_percentile_constant(p):
    assert float(percentile_threshold(torch.full((4,), 5.0), p)) == 5.0


@pytest.mark.parametrize("p", [-0.1, 100.5, float("nan")])
def test_percentile_rejects_out_of_range(p):
    with pytest.raises(DomainError):
        percentile_threshold(torch.arange(4.0), p)


def test_percentile_rejects_empty():
    with pytest.raises(DomainError):
        percentile_threshold(torch.empty(0), 50)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(0, 100))
def test_percentile_matches_numpy(values, p):
    got = float(percentile_threshold(torch.tensor(values, dtype=torch.float64), p))
    assert got == pytest.approx(float(np.percentile(np.array(values), p)), rel=1e-12, abs=1e-9)


def test_batched_threshold_rows_independent():
    g = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    p = torch.tensor([10.0, 50.0, 95.0])
    theta = percentile_threshold(g, p)
    for i in range(3):
        assert float(theta[i]) == pytest.approx(float(percentile_threshold(g[i], float(p[i]))))


def test_mask_p_zero_keeps_everything():
    f, g = torch.randn(8, 4, 4), torch.randn(8, 4, 4)
    m = gradient_mask(f, g, 0)
    assert bool((m.mask == 1).all())
    assert torch.equal(m.values, f)


def test_mask_all_equal_gradients_keep_everything():
    f = torch.randn(4, 3, 3)
    for p in (0, 50, 95, 100):
        assert bool((gradient_mask(f, torch.ones(4, 3, 3), p).mask == 1).all())


def test_mask_p95_against_sort_oracle():
    rng = np.random.default_rng(0)
    g = rng.permutation(1000).astype(np.float64).reshape(10, 10, 10)
    theta = np.percentile(g, 95)
    expected = int((g >= theta).sum())
    m = gradient_mask(torch.ones(10, 10, 10, dtype=torch.float64), torch.from_numpy(g), 95)
    assert int(m.mask.sum()) == expected == 50


def test_mask_shape_mismatch():
    with pytest.raises(DomainError):
        gradient_mask(torch.zeros(2, 3, 3), torch.zeros(2, 4, 4), 50)


def test_per_channel_mask_thresholds_each_channel():
    g = torch.arange(2 * 16, dtype=torch.float64).view(2, 4, 4)
    m = gradient_mask(torch.ones_like(g), g, 75, per_channel=True)
    assert m.mask.view(2, -1).sum(1).tolist() == [4.0, 4.0]


def _instances(n=1000, seed=0):
    """Randomised gradient maps: continuous, heavily tied, and mixed."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
        kind = i % 3
        if kind == 0:
            g = rng.normal(size=shape)
        elif kind == 1:
            g = rng.integers(-2, 3, size=shape).astype(np.float64)
        else:
            g = np.where(rng.random(shape) < 0.5, 0.0, rng.normal(size=shape))
        yield torch.from_numpy(g), float(rng.uniform(0, 100)), float(rng.uniform(0, 100))


def test_mask_properties_over_randomised_instances():
    """Retained count, ties, nesting, idempotence and order-statistic invariance."""
    for g, p1, p2 in _instances():
        f = torch.randn(g.shape, dtype=torch.float64)
        m = gradient_mask(f, g, p1)
        theta = np.percentile(g.numpy(), p1)
        # retained count: exactly the elements at or above the threshold, ties included
        assert int(m.mask.sum()) == int((g.numpy() >= theta).sum())
        # values are f on kept entries, exact zeros elsewhere
        assert torch.equal(m.values, f * m.mask)
        assert bool((m.values[m.mask == 0] == 0).all())
        # (100 - p)% of elements kept, up to one element, when there are no ties
        if len(torch.unique(g)) == g.numel():
            assert abs(int(m.mask.sum()) - (100 - p1) / 100 * g.numel()) <= 1 + 1e-9
        # idempotence
        again = gradient_mask(m.values, g, p1)
        assert torch.equal(again.values, m.values)
        # nesting: the higher percentile keeps a subset
        lo, hi = sorted((p1, p2))
        m_lo, m_hi = gradient_mask(f, g, lo).mask, gradient_mask(f, g, hi).mask
        assert bool((m_hi <= m_lo).all())
        # strictly increasing transforms leave the mask unchanged
        for transform in (lambda x: 3 * x + 1, torch.exp, lambda x: torch.atan(x) + x ** 3):
            assert torch.equal(gradient_mask(f, transform(g), p1).mask, m.mask)


def test_sample_training_percentile():
    rng = np.random.default_rng(123)
    draws = sample_training_percentile(rng, size=100_000)
    assert draws.min() >= 70 and draws.max() <= 100
    assert abs(draws.mean() - 85) < 0.1
    again = sample_training_percentile(np.random.default_rng(123), size=100_000)
    assert np.array_equal(draws, again)


def test_sample_training_percentile_custom_bounds():
    d = sample_training_percentile(np.random.default_rng(0), size=10, bounds=(95, 95))
    assert np.all(d == 95)
    with pytest.raises(DomainError):
        sample_training_percentile(np.random.default_rng(0), bounds=(80, 70))
