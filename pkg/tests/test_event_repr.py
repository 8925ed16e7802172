import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtl.event_io import EventStream, window_events
from dtl.event_repr import (
    ReprKind,
    embed,
    input_channels,
    raw_counts,
    to_multichannel,
    to_six_channel,
    to_voxel_grid,
)

H, W = 6, 5


def make_window(t, x, y, p, t_start=0.0, duration=0.05, height=H, width=W):
    order = np.argsort(t, kind="stable")
    s = EventStream(width, height, np.asarray(t)[order], np.asarray(x)[order], np.asarray(y)[order], np.asarray(p)[order])
    return window_events(s, t_start, duration)


def random_window(seed, n, duration=0.05):
    rng = np.random.default_rng(seed)
    return make_window(
        rng.uniform(0, duration, n), rng.integers(0, W, n), rng.integers(0, H, n), rng.choice([-1, 1], n), duration=duration
    )


def test_multichannel_single_event():
    w = make_window([0.0], [2], [3], [1])
    data = to_multichannel(w, bins=2).data
    assert data.shape == (4, H, W)
    assert data[0, 3, 2] == 1.0
    assert data.sum() == 1.0


def test_multichannel_percentile_divisor():
    w = make_window([0.001, 0.002], [1, 1], [1, 1], [1, 1])
    assert raw_counts(w, 2, H, W)[0, 1, 1] == 2
    assert to_multichannel(w, bins=2).data[0, 1, 1] == 1.0


def test_multichannel_negative_polarity_channel():
    data = to_multichannel(make_window([0.01], [0], [0], [-1]), bins=1).data
    assert data.shape == (2, H, W)
    assert data[1, 0, 0] == 1.0 and data[0].sum() == 0


def test_multichannel_bin_routing():
    # normalized times 0.1, 0.3, 0.6, 0.99 with 4 bins -> bins 0, 1, 2, 3
    w = make_window([0.005, 0.015, 0.03, 0.0495], [0, 1, 2, 3], [0, 0, 0, 0], [1, 1, -1, -1])
    counts = raw_counts(w, 4, H, W)
    assert counts[0, 0, 0] == 1 and counts[2, 0, 1] == 1 and counts[5, 0, 2] == 1 and counts[7, 0, 3] == 1


def test_voxel_on_grid_event():
    # t* = 1 with 3 bins means normalized time 0.5
    data = to_voxel_grid(make_window([0.025], [1], [1], [1]), bins=3).data
    assert data[1, 1, 1] == pytest.approx(1.0)
    assert np.abs(data).sum() == pytest.approx(1.0)


def test_voxel_half_way():
    data = to_voxel_grid(make_window([0.025], [0], [0], [1]), bins=2).data
    np.testing.assert_allclose(data[:, 0, 0], [0.5, 0.5])


def test_voxel_negative_polarity():
    data = to_voxel_grid(make_window([0.01], [0], [0], [-1]), bins=4).data
    assert data.sum() == pytest.approx(-1.0)
    assert np.all(data <= 0)


def test_voxel_needs_two_bins():
    with pytest.raises(ValueError):
        to_voxel_grid(make_window([], [], [], []), bins=1)


def test_six_channel_single_event():
    data = to_six_channel(make_window([0.02], [1], [2], [1])).data
    assert data[0, 2, 1] == 1.0
    assert data[1, 2, 1] == pytest.approx(0.4)
    assert data[2, 2, 1] == 0.0


def test_six_channel_two_events_population_std():
    data = to_six_channel(make_window([0.01, 0.03], [1, 1], [2, 2], [1, 1])).data
    assert data[1, 2, 1] == pytest.approx(0.4)
    assert data[2, 2, 1] == pytest.approx(0.2)


def test_six_channel_negative_stats():
    data = to_six_channel(make_window([0.01, 0.03], [0, 0], [0, 0], [-1, -1])).data
    assert data[4, 0, 0] == pytest.approx(0.4)
    assert data[5, 0, 0] == pytest.approx(0.2)
    assert np.all(data[:3] == 0)


@pytest.mark.parametrize("kind", list(ReprKind))
def test_empty_window_is_zero(kind):
    t = embed(make_window([], [], [], []), kind, bins=4)
    assert t.data.shape == (input_channels(kind, 4), H, W)
    assert not t.data.any()


@pytest.mark.parametrize("kind", list(ReprKind))
def test_geometry_mismatch(kind):
    w = make_window([0.01], [0], [0], [1])
    fn = {ReprKind.MULTICHANNEL: to_multichannel, ReprKind.VOXEL_GRID: to_voxel_grid}.get(kind)
    with pytest.raises(ValueError):
        if fn is None:
            to_six_channel(w, height=H + 1, width=W)
        else:
            fn(w, 4, H + 1, W)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200), st.integers(1, 6))
def test_count_conservation(seed, n, bins):
    w = random_window(seed, n)
    assert raw_counts(w, bins, H, W).sum() == n
    mc = to_multichannel(w, bins).data
    assert mc.min() >= 0 and mc.max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200), st.integers(2, 6))
def test_voxel_weight_mass(seed, n, bins):
    w = random_window(seed, n)
    grid = to_voxel_grid(w, bins).data
    # each event's weights share its sign, so per-event |weights| sum to 1
    pos = to_voxel_grid(make_window(w.t[w.p > 0], w.x[w.p > 0], w.y[w.p > 0], w.p[w.p > 0]), bins).data
    neg = to_voxel_grid(make_window(w.t[w.p < 0], w.x[w.p < 0], w.y[w.p < 0], w.p[w.p < 0]), bins).data
    assert pos.sum() - neg.sum() == pytest.approx(n)
    np.testing.assert_allclose(pos + neg, grid, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 100), st.integers(0, 100))
def test_voxel_linearity(seed, n1, n2):
    rng = np.random.default_rng(seed)
    a = [rng.uniform(0, 0.05, n1), rng.integers(0, W, n1), rng.integers(0, H, n1), rng.choice([-1, 1], n1)]
    b = [rng.uniform(0, 0.05, n2), rng.integers(0, W, n2), rng.integers(0, H, n2), rng.choice([-1, 1], n2)]
    union = [np.concatenate([u, v]) for u, v in zip(a, b)]
    g = to_voxel_grid(make_window(*union), 4).data
    np.testing.assert_allclose(g, to_voxel_grid(make_window(*a), 4).data + to_voxel_grid(make_window(*b), 4).data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 200))
def test_six_channel_ranges(seed, n):
    data = to_six_channel(random_window(seed, n)).data
    assert data.min() >= 0 and data.max() <= 1
    assert np.all((data[[1, 2, 4, 5]] == 0) | (data[[0, 0, 3, 3]] > 0))


@pytest.mark.parametrize("kind", list(ReprKind))
def test_determinism(kind):
    w = random_window(11, 300)
    a, b = embed(w, kind).data, embed(w, kind).data
    assert a.tobytes() == b.tobytes()
