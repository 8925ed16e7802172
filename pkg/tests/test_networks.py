import json
import sys
from pathlib import Path

import numpy as np
import pytest

from dtl import diffnum as dn
from dtl import networks as nw
from dtl.diffnum import Tensor

GOLDEN = Path(__file__).parent / "golden"
sys.path.insert(0, str(GOLDEN))
import make_network_golden  # noqa: E402


@pytest.fixture(scope="module")
def params():
    return nw.init_params(nw.model_manifest(8, 4), 0)


def test_shapes(params):
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (8, 64, 64)))
    latent = nw.encoder_forward(params, x)
    assert latent.shape == (64, 16, 16)
    eel = nw.eel_decoder_forward(params, latent)
    assert eel.logits.shape == (4, 64, 64) and eel.penultimate.shape == (64, 16, 16)
    eit = nw.eit_decoder_forward(params, eel.penultimate)
    assert eit.image.shape == (1, 64, 64)
    assert eit.penultimate.shape == eel.penultimate.shape
    assert np.all(np.abs(eit.image.data) < 1)


def test_batched_matches_single(params):
    x = np.random.default_rng(1).uniform(0, 1, (2, 8, 16, 16))
    batched = nw.eel_forward(params, Tensor(x)).logits.data
    for i in range(2):
        np.testing.assert_allclose(nw.eel_forward(params, Tensor(x[i])).logits.data, batched[i], atol=1e-12)


def test_zero_input_zero_latent():
    p = nw.init_params(nw.eel_manifest(8, 4), 3)
    assert not nw.encoder_forward(p, Tensor(np.zeros((8, 16, 16)))).data.any()


def test_zero_weight_eit_is_identity_then_zero():
    p = {k: Tensor(np.zeros(v.shape)) for k, v in nw.init_params(nw.eit_manifest(), 0).items()}
    feat = Tensor(np.random.default_rng(2).normal(size=(64, 4, 4)))
    out = nw.eit_decoder_forward(p, feat)
    np.testing.assert_array_equal(out.penultimate.data, feat.data)
    assert not out.image.data.any()


def test_depth_positive():
    p = nw.init_params(nw.eel_manifest(8, 1), 4)
    depth = nw.eel_forward(p, Tensor(np.random.default_rng(3).normal(size=(8, 16, 16)) * 5), "depth").depth
    assert depth.shape == (1, 16, 16) and np.all(depth.data > 0)


def test_shape_errors(params):
    with pytest.raises(ValueError):
        nw.encoder_forward(params, Tensor(np.zeros((8, 18, 16))))
    with pytest.raises(ValueError):
        nw.encoder_forward(params, Tensor(np.zeros((3, 16, 16))))
    with pytest.raises(ValueError):
        nw.eel_decoder_forward(params, Tensor(np.zeros((32, 4, 4))))
    with pytest.raises(ValueError):
        nw.eit_decoder_forward(params, Tensor(np.zeros((16, 4, 4))))


def test_teacher_probabilities_and_frozen():
    teacher = nw.freeze(nw.init_params(nw.eel_manifest(1, 4), 5))
    img = Tensor(np.random.default_rng(4).uniform(-1, 1, (1, 16, 16)), requires_grad=True)
    probs = nw.teacher_forward(teacher, img)
    np.testing.assert_allclose(probs.data.sum(axis=0), 1.0, atol=1e-12)
    dn.backward((probs * np.random.default_rng(5).normal(size=probs.shape)).sum())
    assert np.abs(img.grad).sum() > 0
    assert all(not t.requires_grad and t.grad is None for t in teacher.values())
    again = nw.teacher_forward(teacher, Tensor(img.data))
    assert again.data.tobytes() == probs.data.tobytes()


def test_eel_ignores_eit_params(params):
    x = Tensor(np.random.default_rng(6).uniform(0, 1, (8, 16, 16)))
    full = nw.eel_forward(params, x).logits.data
    eel_only = {k: v for k, v in params.items() if not k.startswith("eit.")}
    assert nw.eel_forward(eel_only, x).logits.data.tobytes() == full.tobytes()


def test_manifest_paths_unique():
    paths = [p for p, _ in nw.model_manifest(8, 4)]
    assert len(paths) == len(set(paths))
    assert set(nw.init_params(nw.model_manifest(8, 4), 0)) == set(paths)


def test_init_is_seeded():
    a = nw.init_params(nw.model_manifest(8, 4), 9)
    b = nw.init_params(nw.model_manifest(8, 4), 9)
    c = nw.init_params(nw.model_manifest(8, 4), 10)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)
    assert all(not a[k].data.any() for k in a if k.endswith(".bias"))


def test_golden_checksums():
    frozen = json.loads((GOLDEN / "network_checksums.json").read_text())
    got = make_network_golden.compute()
    assert set(got) == set(frozen)
    for key, value in frozen.items():
        assert got[key] == pytest.approx(value, rel=1e-10, abs=1e-10), key
