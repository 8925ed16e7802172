import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtl import synth as S


def one_shape_scene(velocity=(10.0, 0.0), **kw):
    shape = S.ShapeSpec("circle", (20.0, 30.0), 5.0, 0.8, velocity, 3.0)
    return S.SceneSpec(seed=1, shapes=(shape,), background_gray=0.3, **kw)


def test_render_t0_positions():
    spec = one_shape_scene()
    frame = S.render(spec, 0.0)
    assert frame.labels[30, 20] == S.CLASS_IDS["circle"]
    assert frame.depth[30, 20] == 3.0
    assert frame.intensity.shape == (1, 64, 64)
    assert frame.intensity.min() >= -1 and frame.intensity.max() <= 1


def test_render_kinematics():
    spec = one_shape_scene()
    assert S.shape_center(spec.shapes[0], 0.5, 64, 64) == (25.0, 30.0)
    a, b = S.render(spec, 0.0).labels, S.render(spec, 0.5).labels
    np.testing.assert_array_equal(np.roll(a, 5, axis=1), b)


def test_render_wraps_around():
    spec = one_shape_scene(velocity=(92.0, 0.0))
    assert S.shape_center(spec.shapes[0], 0.5, 64, 64)[0] == pytest.approx(2.0)
    labels = S.render(spec, 0.5).labels
    assert labels[30, 2] == 1 and labels[30, 62] == 1 and labels[30, 20] == 0


def test_occlusion_nearer_wins():
    far = S.ShapeSpec("square", (32.0, 32.0), 8.0, 0.8, (0.0, 0.0), 6.0)
    near = S.ShapeSpec("circle", (32.0, 32.0), 4.0, 0.3, (0.0, 0.0), 2.0)
    for order in ((far, near), (near, far)):
        f = S.render(S.SceneSpec(seed=0, shapes=order), 0.0)
        assert f.labels[32, 32] == S.CLASS_IDS["circle"] and f.depth[32, 32] == 2.0
        assert f.labels[32, 39] == S.CLASS_IDS["square"] and f.depth[32, 39] == 6.0
        assert f.labels[0, 0] == 0 and f.depth[0, 0] == S.BACKGROUND_DEPTH


def test_spec_invariants():
    with pytest.raises(ValueError):
        S.ShapeSpec("hexagon", (0, 0), 3, 0.5, (0, 0), 2)
    with pytest.raises(ValueError):
        S.ShapeSpec("circle", (0, 0), 3, 0.95, (0, 0), 2)
    with pytest.raises(ValueError):
        S.SceneSpec(seed=0, shapes=(S.ShapeSpec("circle", (0, 0), 3, 0.5, (0, 0), 12.0),))


def test_static_scene_no_events():
    spec = one_shape_scene(velocity=(0.0, 0.0), duration=0.5)
    assert len(S.simulate_events(spec)) == 0


def test_three_threshold_crossings():
    c = 0.15
    frames = np.zeros((2, 1, 2))
    frames[1, 0, 0] = 3 * c
    frames[1, 0, 1] = -2.5 * c
    stream, ref = S.events_from_log_frames(frames, np.array([0.0, 0.01]), c, 2, 1)
    at0 = stream.x == 0
    assert at0.sum() == 3 and np.all(stream.p[at0] == 1)
    np.testing.assert_allclose(stream.t[at0], [0.01 / 3, 0.02 / 3, 0.01], atol=1e-6)
    assert (~at0).sum() == 2 and np.all(stream.p[~at0] == -1)
    assert ref[0, 1] == pytest.approx(-2 * c)


def test_decreasing_intensity_negative_events():
    spec = one_shape_scene(duration=0.2)
    stream = S.simulate_events(spec)
    # the bright disc leaves pixels on its trailing edge, which get darker
    trailing = (stream.y == 30) & (stream.x == 16)
    assert trailing.any() and np.all(stream.p[trailing] == -1)


def test_make_dataset_counts_and_windows():
    spec = S.random_scene(4, duration=5.0)
    samples = S.make_dataset(spec, 0.05)
    assert len(samples) == 100
    for s in samples:
        assert np.all((s.window.t >= s.window.t_start) & (s.window.t < s.window.t_end))
        assert s.frame.timestamp == pytest.approx(s.window.t_end)
    with pytest.raises(ValueError):
        S.make_dataset(spec, 0.03)


def test_make_dataset_deterministic():
    spec = S.random_scene(8, duration=0.5)
    a, b = S.make_dataset(spec), S.make_dataset(spec)
    for u, v in zip(a, b):
        assert u.window.t.tobytes() == v.window.t.tobytes()
        assert u.frame.intensity.tobytes() == v.frame.intensity.tobytes()


def test_random_scene_has_every_kind():
    for seed in range(20):
        spec = S.random_scene(seed)
        assert sorted(s.kind for s in spec.shapes) == sorted(S.KINDS)
        assert all(abs(s.gray - spec.background_gray) >= 0.15 for s in spec.shapes)
        assert all(0 < s.depth < spec.background_depth for s in spec.shapes)


def test_low_frame_rate_rejected():
    with pytest.raises(ValueError):
        S.frame_times(one_shape_scene(fps=1.0))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_event_integration_consistency(seed):
    spec = S.random_scene(seed, duration=0.3)
    logs = S.render_log_frames(spec)
    stream, ref = S.events_from_log_frames(logs, S.frame_times(spec), spec.threshold, spec.width, spec.height)
    total = np.zeros(spec.height * spec.width)
    np.add.at(total, stream.y * spec.width + stream.x, stream.p * spec.threshold)
    change = (logs[-1] - logs[0]).reshape(-1)
    assert np.all(np.abs(change - total) < spec.threshold)
    assert np.all(np.abs(logs[-1] - ref) < spec.threshold)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_event_count_monotone_in_speed(seed):
    spec = S.random_scene(seed, duration=0.3)
    counts = [len(S.simulate_events(spec.scaled(f))) for f in (0.0, 0.5, 1.0, 2.0)]
    assert counts[0] == 0
    assert counts == sorted(counts)


def test_log_intensity_offset():
    assert S.log_intensity(np.array(-1.0)) == pytest.approx(math.log(0.01))
    assert S.log_intensity(np.array(1.0)) == pytest.approx(math.log(1.01))
