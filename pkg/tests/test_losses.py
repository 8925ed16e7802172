import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtl import diffnum as dn
from dtl import losses as L
from dtl.diffnum import Tensor


def brute_affinity(F, eps=1e-12):
    c, h, w = F.shape
    out = np.zeros((h * w, 9))
    for y in range(h):
        for x in range(w):
            a = F[:, y, x]
            k = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    b = F[:, min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                    na, nb = math.sqrt(sum(v * v for v in a)), math.sqrt(sum(v * v for v in b))
                    out[y * w + x, k] = 0.0 if na < eps or nb < eps else sum(p * q for p, q in zip(a, b)) / (na * nb)
                    k += 1
    return out


def brute_feature_transfer(A, B):
    total = 0.0
    for a_row, b_row in zip(A, B):
        for u, v in zip(a_row, b_row):
            total += (u - v) ** 2
    return total / A.size


# analytic values


def test_ce_uniform_two_class():
    assert L.cross_entropy(Tensor(np.zeros((2, 1, 1))), np.zeros((1, 1), int)).item() == pytest.approx(-math.log(0.5), abs=1e-6)


def test_ce_perfect_prediction():
    logits = np.array([[[800.0]], [[0.0]]])
    assert L.cross_entropy(Tensor(logits), np.zeros((1, 1), int)).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_all_ignored():
    with pytest.raises(L.EmptySupervision):
        L.cross_entropy(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 255))


def test_ce_ignores_pixels_and_checks_range():
    logits = np.zeros((2, 1, 2))
    logits[0, 0, 1] = 5.0
    labels = np.array([[0, 255]])
    assert L.cross_entropy(Tensor(logits), labels).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        L.cross_entropy(Tensor(logits), np.array([[2, 0]]))


def test_eit_examples():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 4, 4))
    assert L.eit_reconstruction(Tensor(x), x).item() == 0.0
    assert L.eit_reconstruction(Tensor(np.full((1, 1, 1), 0.5)), np.ones((1, 1, 1))).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        L.eit_reconstruction(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))


def test_kl_examples():
    p = np.array([1.0, 0.0]).reshape(2, 1, 1)
    q = np.array([0.5, 0.5]).reshape(2, 1, 1)
    assert L.kl_per_pixel(p, q).item() == pytest.approx(math.log(2), abs=1e-6)
    assert abs(L.kl_per_pixel(q, q).item()) <= 1e-10
    finite = L.kl_per_pixel(q, p).item()
    assert np.isfinite(finite) and finite > 0


def test_kl_rejects_unnormalized():
    with pytest.raises(ValueError):
        L.kl_per_pixel(np.full((2, 1, 1), 0.6), np.full((2, 1, 1), 0.5))
    with pytest.raises(ValueError):
        L.kl_per_pixel(np.full((2, 1, 1), 0.5), np.full((3, 1, 1), 1 / 3))


def test_semantic_consistency_order_and_asymmetry():
    rng = np.random.default_rng(1)
    p = dn.softmax(Tensor(rng.normal(size=(3, 2, 2)) * 2), axis=0).data
    q = dn.softmax(Tensor(rng.normal(size=(3, 2, 2)) * 2), axis=0).data
    assert L.semantic_consistency(p, p).item() == pytest.approx(0.0, abs=1e-10)
    assert L.semantic_consistency(p, q).item() == pytest.approx(L.kl_per_pixel(p, q).item())
    assert L.semantic_consistency(p, q).item() != pytest.approx(L.semantic_consistency(q, p).item())


def test_semantic_consistency_depth():
    d = np.random.default_rng(2).uniform(1, 5, (1, 3, 3))
    assert L.semantic_consistency(d, d, task="depth").item() == 0.0
    assert L.semantic_consistency(d, d + 0.5, task="depth").item() == pytest.approx(0.5)


def test_affinity_constant_map():
    g = L.affinity_graph(Tensor(np.full((3, 4, 5), 0.7)))
    np.testing.assert_allclose(g.values.data, 1.0)
    assert g.values.shape == (20, 9)


def test_affinity_orthogonal_and_diagonal():
    F = np.zeros((2, 1, 2))
    F[:, 0, 0] = (1, 0)
    F[:, 0, 1] = (0, 1)
    assert L.affinity_graph(Tensor(F)).values.data[0, 5] == pytest.approx(0.0)
    F[:, 0, 1] = (1, 1)
    assert L.affinity_graph(Tensor(F)).values.data[0, 5] == pytest.approx(1 / math.sqrt(2), abs=1e-7)


def test_affinity_zero_node():
    F = np.zeros((2, 2, 2))
    F[:, 0, 0] = (1, 2)
    v = L.affinity_graph(Tensor(F)).values.data
    assert v[0, 4] == pytest.approx(1.0)
    assert v[3, 4] == 0.0 and v[0, 8] == 0.0


def test_feature_transfer_examples():
    g1 = L.AffinityGraph(1, 1, 1, Tensor(np.array([[1.0]])))
    g2 = L.AffinityGraph(1, 1, 1, Tensor(np.array([[0.5]])))
    assert L.feature_transfer(g1, g2).item() == pytest.approx(0.25, abs=1e-6)
    assert L.feature_transfer(g1, g1).item() == 0.0
    with pytest.raises(ValueError):
        L.feature_transfer(L.affinity_graph(Tensor(np.ones((2, 3, 3)))), L.affinity_graph(Tensor(np.ones((2, 4, 3)))))


def test_feature_transfer_gradient_sides():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    dn.backward(L.feature_transfer(L.affinity_graph(a), L.affinity_graph(b)))
    assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0
    a.zero_grad(), b.zero_grad()
    dn.backward(L.feature_transfer(L.affinity_graph(a), L.affinity_graph(b), stop_gradient=True))
    assert np.abs(a.grad).sum() == 0 and np.abs(b.grad).sum() > 0


def test_prediction_transfer_examples():
    teacher = np.array([0.5, 0.5]).reshape(2, 1, 1)
    student = np.array([60.0, -60.0]).reshape(2, 1, 1)
    assert L.prediction_transfer(Tensor(student), teacher).item() == pytest.approx(math.log(2), abs=1e-6)
    logits = np.random.default_rng(4).normal(size=(3, 2, 2))
    probs = dn.softmax(Tensor(logits), axis=0).data
    assert L.prediction_transfer(Tensor(logits), probs).item() == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        L.prediction_transfer(Tensor(np.zeros((3, 1, 1))), teacher)


def test_prediction_transfer_depth():
    assert L.prediction_transfer(Tensor(np.full((1, 2, 2), 3.0)), np.full((1, 2, 2), 2.0), task="depth").item() == 1.0


def test_total_loss_examples():
    parts = L.total_loss(1.0, 1.0, 1.0, 1.0, 1.0, (1, 1, 0.1, 1))
    assert parts.total == pytest.approx(4.1, abs=1e-6)
    assert L.total_loss(0.0, 0.0, 0.0, 0.0, 0.0).total == 0.0
    assert L.total_loss(0.7, 2.0, 3.0, 4.0, 5.0, (0, 0, 0, 0)).total == 0.7
    assert L.DEFAULT_LAMBDAS == (1.0, 1.0, 0.1, 1.0)


def test_total_loss_rejects_non_finite():
    with pytest.raises(L.DivergenceError):
        L.total_loss(1.0, float("nan"))
    with pytest.raises(ValueError):
        L.total_loss(1.0, lambdas=(1, -1, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=5, max_size=5), st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_total_loss_identity(parts, lambdas):
    b = L.total_loss(*parts, lambdas=lambdas)
    ref = parts[0] + sum(l * p for l, p in zip(lambdas, parts[1:]))
    assert abs(b.total - ref) <= 1e-12 * max(1.0, abs(ref))


# oracle equivalence on random 4x4x3 maps


def test_affinity_and_fl_match_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        Fa, Fb = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
        if rng.random() < 0.2:
            Fa[:, rng.integers(4), rng.integers(4)] = 0.0
        A, B = brute_affinity(Fa), brute_affinity(Fb)
        ga, gb = L.affinity_graph(Tensor(Fa)), L.affinity_graph(Tensor(Fb))
        np.testing.assert_allclose(ga.values.data, A, atol=1e-9, rtol=0)
        assert abs(L.feature_transfer(ga, gb).item() - brute_feature_transfer(A, B)) <= 1e-9


# properties


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_affinity_range_and_scale_invariance(seed, c):
    F = np.random.default_rng(seed).normal(size=(4, 3, 5))
    g = L.affinity_graph(Tensor(F)).values.data
    assert np.all(np.abs(g) <= 1 + 1e-12)
    np.testing.assert_allclose(g[:, 4], 1.0, atol=1e-12)
    np.testing.assert_allclose(L.affinity_graph(Tensor(F * c)).values.data, g, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_non_negative_and_fl_symmetric(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 4, 4)) * 3
    labels = rng.integers(0, 3, (2, 4, 4))
    assert L.cross_entropy(Tensor(logits), labels).item() >= 0
    p = dn.softmax(Tensor(rng.normal(size=(3, 4, 4)) * 4), axis=0).data
    q = dn.softmax(Tensor(rng.normal(size=(3, 4, 4)) * 4), axis=0).data
    assert L.kl_per_pixel(p, q).item() >= -1e-12
    assert abs(L.kl_per_pixel(p, p).item()) <= 1e-10
    assert L.eit_reconstruction(Tensor(rng.uniform(-1, 1, (1, 4, 4))), rng.uniform(-1, 1, (1, 4, 4))).item() >= 0
    ga = L.affinity_graph(Tensor(rng.normal(size=(3, 4, 4))))
    gb = L.affinity_graph(Tensor(rng.normal(size=(3, 4, 4))))
    assert L.feature_transfer(ga, gb).item() >= 0
    assert L.feature_transfer(ga, gb).item() == pytest.approx(L.feature_transfer(gb, ga).item(), abs=1e-15)
    assert L.feature_transfer(ga, ga).item() == 0.0


def test_batched_losses_match_per_sample_mean():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 4, 5, 5))
    labels = rng.integers(0, 4, (3, 5, 5))
    batched = L.cross_entropy(Tensor(logits), labels).item()
    single = np.mean([L.cross_entropy(Tensor(logits[i]), labels[i]).item() for i in range(3)])
    assert batched == pytest.approx(single, abs=1e-12)
    F = rng.normal(size=(3, 2, 4, 4))
    G = rng.normal(size=(3, 2, 4, 4))
    batched = L.feature_transfer(L.affinity_graph(Tensor(F)), L.affinity_graph(Tensor(G))).item()
    single = np.mean([L.feature_transfer(L.affinity_graph(Tensor(F[i])), L.affinity_graph(Tensor(G[i]))).item() for i in range(3)])
    assert batched == pytest.approx(single, abs=1e-12)
