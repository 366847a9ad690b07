import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hvqtrans.errors import ConfigurationError, InputError, UndefinedMetricError
from hvqtrans.scoring import (
    auroc,
    calibrate,
    patch_labels,
    pixel_map,
    read_score_map,
    recon_score,
    score_map,
    write_score_map,
)

from oracles import pairwise_auroc


def test_recon_score_examples():
    a = torch.randn(4, 3)
    assert recon_score(a, a).eq(0).all()
    assert recon_score(torch.tensor([[0.0, 0]]), torch.tensor([[3.0, 4]])).tolist() == [25.0]
    b = torch.randn(4, 3, dtype=torch.float64)
    a = a.double()
    assert torch.allclose(recon_score(3 * a, 3 * b), 9 * recon_score(a, b))
    with pytest.raises(ConfigurationError):
        recon_score(torch.zeros(2, 3), torch.zeros(3, 3))


def test_calibrate_examples():
    s = np.array([1.0, 2.0])
    assert calibrate(s, [], 0.1).tolist() == [1.0, 2.0]
    assert calibrate(s, [np.ones(2)], 0.0).tolist() == [1.0, 2.0]
    assert calibrate(np.zeros(3), [np.ones(3), np.ones(3)], 1.0).tolist() == [2.0, 2.0, 2.0]
    np.testing.assert_allclose(calibrate(s, [np.array([10.0, 0.0])], 0.1), [2.0, 2.0])
    with pytest.raises(ConfigurationError):
        calibrate(s, [np.ones(3)], 0.1)
    with pytest.raises(ConfigurationError):
        calibrate(s, [], -1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 9999), lam=st.floats(0, 5), bump=st.floats(0, 10))
def test_calibrate_monotone(seed, lam, bump):
    rng = np.random.default_rng(seed)
    s, p = rng.random(6), rng.random(6)
    q = p.copy()
    q[rng.integers(6)] += bump
    assert np.all(calibrate(s, [q], lam) >= calibrate(s, [p], lam))


def test_pixel_map_constant_field():
    pm = pixel_map(np.full(196, 2.5), (14, 14), (224, 224))
    assert pm.shape == (224, 224)
    np.testing.assert_allclose(pm, 2.5, atol=1e-6)


def test_pixel_map_hot_patch():
    s = np.zeros(16)
    s[1 * 4 + 2] = 1.0  # row 1, col 2
    pm = pixel_map(s, (4, 4), (64, 64))
    r, c = np.unravel_index(pm.argmax(), pm.shape)
    assert 16 <= r < 32 and 32 <= c < 48


def test_score_map_image_score_is_max():
    rng = np.random.default_rng(0)
    sm = score_map(rng.random(64), (8, 8), (128, 128))
    assert sm.image_score == sm.pixel_map.max()
    assert (sm.pixel_map >= 0).all()
    with pytest.raises(ConfigurationError):
        pixel_map(np.zeros(10), (3, 3), (48, 48))


def test_auroc_examples():
    assert auroc([0.1, 0.9], [0, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1] * 3) == 0.5
    assert auroc([0.2, 0.8, 0.4, 0.6], [0, 1, 1, 0]) == 0.75
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(InputError):
        auroc([0.1], [0, 1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(2, 100))
def test_auroc_matches_pairwise_oracle(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 8, n) / 4.0  # plenty of ties
    assert auroc(scores, labels) == pairwise_auroc(scores, labels)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 10), b=st.floats(-5, 5))
def test_auroc_invariant_under_increasing_maps(seed, a, b):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, rng.integers(0, 2, 30)]
    s = rng.normal(size=32)
    base = auroc(s, y)
    assert auroc(a * s + b, y) == pytest.approx(base, abs=1e-12)
    assert auroc(np.exp(s), y) == pytest.approx(base, abs=1e-12)


def test_auroc_oracle_scores_and_null():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 1000)
    assert auroc(y + rng.normal(0, 1e-3, 1000), y) == 1.0
    assert abs(auroc(rng.permutation(rng.random(1000)), y) - 0.5) < 0.05


def test_patch_labels():
    m = np.zeros((32, 32), np.uint8)
    m[0:4, 20:24] = 1
    lab = patch_labels(m, (2, 2))
    assert lab.tolist() == [0, 1, 0, 0]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_score_map_binary_roundtrip(tmp_path, dtype):
    arr = np.random.default_rng(1).random((5, 7)).astype(dtype)
    write_score_map(tmp_path / "m.bin", arr)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"HVQS"
    back = read_score_map(tmp_path / "m.bin")
    assert back.dtype == dtype and np.array_equal(back, arr)


def test_score_map_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(InputError):
        read_score_map(tmp_path / "x.bin")
