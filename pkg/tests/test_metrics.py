import json
import math

import numpy as np
import pytest

from facemime.metrics import (MetricReport, cosine, dispersion_ratio, l1_distance,
                              offset_recovery_cosines, psnr, ssim)


def test_l1_constant_offset():
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.1)
    assert math.isclose(l1_distance(a, b), 0.1, rel_tol=1e-9)


def test_psnr_twenty_db_at_mse_hundredth():
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.1)  # mse 0.01 -> 10*log10(1/0.01) = 20
    assert math.isclose(psnr(a, b), 20.0, rel_tol=1e-9)


def test_psnr_capped_for_identical_images():
    a = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(a, a.copy()) == 99.0
    almost = a + 1e-9
    assert psnr(a, almost) == 99.0  # cap also applies to vanishing error


def test_psnr_max_val_scaling():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 25.5)
    assert math.isclose(psnr(a, b, max_val=255.0), 20.0, rel_tol=1e-9)


def naive_gaussian_filter(img, sigma=1.5, truncate=3.5):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, radius, mode="symmetric")
    tmp = np.zeros_like(pad)
    for i in range(pad.shape[0]):
        tmp[i] = np.convolve(pad[i], k, mode="same")
    out = np.zeros_like(pad)
    for j in range(pad.shape[1]):
        out[:, j] = np.convolve(tmp[:, j], k, mode="same")
    return out[radius:-radius, radius:-radius]


def naive_ssim_plane(x, y):
    c1, c2 = 0.01**2, 0.03**2
    f = naive_gaussian_filter
    ux, uy = f(x), f(y)
    vx = f(x * x) - ux * ux
    vy = f(y * y) - uy * uy
    vxy = f(x * y) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    pad = 5
    return float(s[pad:-pad, pad:-pad].mean())


def test_ssim_matches_naive_reimplementation():
    rng = np.random.default_rng(3)
    x = rng.random((32, 32))
    y = np.clip(x + 0.2 * rng.standard_normal((32, 32)), 0, 1)
    assert math.isclose(ssim(x, y), naive_ssim_plane(x, y), abs_tol=1e-6)


def test_ssim_basic_properties():
    rng = np.random.default_rng(4)
    a = rng.random((3, 32, 32))
    assert math.isclose(ssim(a, a.copy()), 1.0, abs_tol=1e-9)
    noisy = np.clip(a + 0.3 * rng.standard_normal(a.shape), 0, 1)
    s = ssim(a, noisy)
    assert s < 0.95
    assert math.isclose(s, ssim(noisy, a), abs_tol=1e-12)


def test_ssim_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((17, 17)))


def test_cosine_reference_points():
    assert math.isclose(cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])), 1.0)
    assert math.isclose(cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])), 0.0)
    assert math.isclose(cosine(np.array([1.0, 0.0]), np.array([-1.0, 0.0])), -1.0)
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_recovery_cosines_per_layer():
    true = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[2.0, 2.0]])]
    perfect = offset_recovery_cosines([t.copy() for t in true], true)
    assert all(math.isclose(c, 1.0) for c in perfect)
    scaled = offset_recovery_cosines([0.5 * t for t in true], true)
    assert all(math.isclose(c, 1.0) for c in scaled)  # cosine ignores gain
    flipped = offset_recovery_cosines([-t for t in true], true)
    assert all(math.isclose(c, -1.0) for c in flipped)
    with pytest.raises(ValueError):
        offset_recovery_cosines([true[0]], true)


def test_dispersion_ratio_hand_example():
    ident_a = np.array([[0.0, 0.0], [0.0, 2.0]])   # centroid (0, 1), spread 1
    ident_b = np.array([[10.0, 0.0], [10.0, 2.0]])  # centroid (10, 1), spread 1
    # centroids are 5 from their mean -> ratio 1/5
    assert math.isclose(dispersion_ratio([ident_a, ident_b]), 0.2, rel_tol=1e-9)


def test_dispersion_ratio_degenerate_cases():
    tight = [np.array([[1.0, 1.0]] * 3), np.array([[5.0, 5.0]] * 3)]
    assert dispersion_ratio(tight) == 0.0
    collapsed = [np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([[0.0, 2.0], [2.0, 2.0]])]
    # identical centroids but nonzero spread
    assert dispersion_ratio([collapsed[0], collapsed[0].copy()]) == float("inf")


def test_metric_report_serialization():
    r = MetricReport(l1=0.01, psnr=30.0)
    r.extras["n_frames"] = 12
    d = r.to_dict()
    assert d == {"l1": 0.01, "psnr": 30.0, "n_frames": 12}
    assert "ssim" not in d
    back = json.loads(r.to_json())
    assert back["psnr"] == 30.0
    table = r.table()
    assert "psnr" in table and "30.0000" in table
