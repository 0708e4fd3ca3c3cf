import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.spatial.transform import Rotation

from hdrsplat import losses
from hdrsplat.metrics import (InsufficientOverlap, ate, crf_curve_error, exposure_correlation, psnr, ssim,
                              table_curve, umeyama)


def test_psnr_definition_and_identity():
    a = np.full((8, 8, 3), 0.5)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_image_metrics_symmetric_and_match_loss_ssim():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert abs(ssim(a, b) - losses.ssim(torch.as_tensor(a), torch.as_tensor(b)).item()) < 1e-9


def random_similarity(rng):
    return float(rng.uniform(0.2, 5.0)), Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), \
        rng.normal(size=3) * 3


def test_ate_zero_for_identical_and_similar_trajectories():
    rng = np.random.default_rng(1)
    times = np.arange(10) * 0.1
    ref = rng.normal(size=(10, 3))
    assert ate(times, ref, times, ref).mean == pytest.approx(0.0, abs=1e-12)
    s, r, t = random_similarity(rng)
    rep = ate(times, s * ref @ r.T + t, times, ref)
    assert rep.mean < 1e-10 and rep.std < 1e-10
    assert rep.scale == pytest.approx(1 / s)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31))
def test_ate_invariant_to_similarity_of_estimate(seed):
    rng = np.random.default_rng(seed)
    times = np.arange(8) * 0.1
    ref = rng.normal(size=(8, 3))
    est = ref + rng.normal(scale=0.1, size=(8, 3))
    s, r, t = random_similarity(rng)
    a = ate(times, est, times, ref)
    b = ate(times, s * est @ r.T + t, times, ref)
    assert np.allclose(a.residuals, b.residuals, atol=1e-9)


def test_umeyama_not_worse_than_grid_search():
    rng = np.random.default_rng(3)
    ref = rng.normal(size=(5, 3))
    est = ref.copy()
    est[2] += np.array([0.8, -0.5, 0.3])  # outlier
    s, r, t = umeyama(est, ref)
    closed = ((ref - (s * est @ r.T + t)) ** 2).sum()

    # brute force over rotations and scales; translation is optimal in closed form for each pair
    best = math.inf
    for ang in itertools.product(np.linspace(-0.3, 0.3, 13), repeat=3):
        rot = Rotation.from_rotvec(ang).as_matrix()
        for scale in np.linspace(0.8, 1.2, 21):
            moved = scale * est @ rot.T
            shift = (ref - moved).mean(0)
            best = min(best, ((ref - moved - shift) ** 2).sum())
    assert closed <= best + 1e-12


def test_ate_needs_three_matches():
    with pytest.raises(InsufficientOverlap):
        ate([0.0, 1.0, 5.0], np.zeros((3, 3)), [0.0, 1.0, 2.0], np.zeros((3, 3)), tol=0.1)


def test_ate_matches_nearest_times():
    ref_t = np.arange(6) * 0.1
    ref = np.random.default_rng(0).normal(size=(6, 3))
    est_t = ref_t[[1, 3, 4, 5]] + 0.01
    rep = ate(est_t, ref[[1, 3, 4, 5]], ref_t, ref, tol=0.05)
    assert rep.mean < 1e-12


def test_correlation_scale_invariance_and_reversal():
    rng = np.random.default_rng(4)
    gt = rng.uniform(0.01, 0.08, 20)
    rep = exposure_correlation(3.7 * gt, gt)
    assert rep.pearson == pytest.approx(1.0) and rep.spearman == pytest.approx(1.0)
    assert rep.kendall_tau_b == pytest.approx(1.0)
    rev = exposure_correlation(1 / gt, gt)
    assert rev.spearman == pytest.approx(-1.0)


def tau_b_by_pairs(x, y):
    conc = disc = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx, dy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif dx == dy:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / math.sqrt((conc + disc + tx) * (conc + disc + ty))


def test_tau_b_with_tie_matches_pair_enumeration():
    est = np.array([0.02, 0.05, 0.03, 0.05, 0.07, 0.01])
    gt = np.array([0.021, 0.04, 0.035, 0.06, 0.05, 0.012])
    assert exposure_correlation(est, gt).kendall_tau_b == pytest.approx(tau_b_by_pairs(est, gt), abs=1e-12)


def test_constant_sequence_is_degenerate():
    rep = exposure_correlation(np.full(5, 0.03), np.linspace(0.01, 0.05, 5))
    assert rep.degenerate and math.isnan(rep.pearson)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0))
def test_correlation_bounds_and_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.01, 0.1, (2, 10))
    r1, r2 = exposure_correlation(a, b), exposure_correlation(scale * a, b)
    for f in ("pearson", "spearman", "kendall_tau_b"):
        assert -1 - 1e-12 <= getattr(r1, f) <= 1 + 1e-12
        assert getattr(r1, f) == pytest.approx(getattr(r2, f), abs=1e-9)


def gamma_table(gamma, z):
    return np.repeat(np.exp(z / gamma)[:, None], 3, axis=1)


def test_crf_error_zero_for_equal_and_shifted_curves():
    z = np.linspace(-10, 0, 500)
    curve = table_curve(np.linspace(-15, 5, 4001), gamma_table(2.2, np.linspace(-15, 5, 4001)))
    assert crf_curve_error(curve, z, gamma_table(2.2, z)).error < 1e-6

    def shifted(zz):
        return curve(zz - 1.3)
    rep = crf_curve_error(shifted, z, gamma_table(2.2, z))
    assert rep.error < 1e-6 and rep.shifts == pytest.approx([1.3] * 3, abs=1e-4)


def test_crf_error_between_gammas_matches_integral():
    a, b, g1, g2 = -9.0, 0.0, 2.2, 2.4
    z = np.linspace(a, b, 20001)

    def curve(zz):
        return np.exp(zz / g1)
    rep = crf_curve_error(curve, z, gamma_table(g2, z))
    # mean alignment in closed form: mean of exp((z+d)/g1) equals mean of exp(z/g2)
    m2 = g2 * (math.exp(b / g2) - math.exp(a / g2)) / (b - a)
    d = g1 * math.log(m2 * (b - a) / (g1 * (math.exp(b / g1) - math.exp(a / g1))))
    expected = quad(lambda x: abs(math.exp((x + d) / g1) - math.exp(x / g2)), a, b, limit=200)[0] / (b - a)
    # the metric averages grid samples, which differs from the integral by O(1/n)
    assert rep.shifts[0] == pytest.approx(d, abs=1e-4)
    assert rep.error == pytest.approx(expected, abs=5e-5)
    assert rep.error > 1e-3
