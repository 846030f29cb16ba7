import os

import numpy as np
import pytest

from collapselab import FamilySpec, build_family, geodesic_ball
from collapselab.operators import gradient, metric_inner, region_sup
from collapselab.spectral import (
    EigenPair,
    cheng_yau_ratio,
    eigenpairs,
    load_eigen_cache,
    save_eigen_cache,
)


def torus_spectrum_oracle(eps: float, sigma: float = 0.0, count: int = 12, nmax: int = 8):
    """Closed-form flat/twisted torus eigenvalues, sorted with multiplicity."""
    vals = []
    for p in range(-nmax, nmax + 1):
        for q in range(-nmax, nmax + 1):
            if sigma == 0.0:
                vals.append(4 * np.pi**2 * (p**2 + q**2 / eps**2))
            else:
                for n in range(-nmax, nmax + 1):
                    vals.append(4 * np.pi**2 * ((p - sigma * n) ** 2 + q**2 + n**2 / eps**2))
    return np.sort(vals)[:count]


def test_collapsed_spectrum_oracle(flat_eig_torus):
    pairs = eigenpairs(flat_eig_torus, 10)
    exact = torus_spectrum_oracle(0.1, count=10)
    for p, e in zip(pairs, exact):
        assert abs(p.theta - e) <= 1e-2 * max(e, 1.0)


def test_unit_spectrum_oracle(unit_torus):
    pairs = eigenpairs(unit_torus, 10)
    exact = torus_spectrum_oracle(1.0, count=10)
    for p, e in zip(pairs, exact):
        assert abs(p.theta - e) <= 1e-2 * max(e, 1.0)


def test_spectrum_convergence_order():
    exact = torus_spectrum_oracle(0.1, count=10)
    errs = []
    for res in ((128, 16), (256, 32)):
        M = build_family(FamilySpec(kind="flat-product-torus", epsilon=0.1, resolution=res))
        pairs = eigenpairs(M, 10)
        errs.append(max(abs(p.theta - e) / max(e, 1.0) for p, e in zip(pairs, exact)))
    assert np.log2(errs[0] / errs[1]) >= 1.8


def test_twisted_spectrum_oracle(twisted_torus):
    sigma = (np.pi / 2) / (2 * np.pi)
    pairs = eigenpairs(twisted_torus, 5)
    exact = torus_spectrum_oracle(0.25, sigma=sigma, count=5)
    for p, e in zip(pairs, exact):
        assert abs(p.theta - e) <= 1e-2 * max(e, 1.0)


def test_ground_state_constant(flat_eig_torus):
    pairs = eigenpairs(flat_eig_torus, 3)
    assert abs(pairs[0].theta) <= 1e-8
    u0 = pairs[0].u
    assert np.max(np.abs(u0 - u0.mean())) <= 1e-8 * max(1.0, np.abs(u0).max())


def test_fiber_mode_absent_below_threshold(flat_eig_torus):
    # lowest fiber-oscillating mode sits at 4 pi^2 / eps^2 ~ 3948
    pairs = eigenpairs(flat_eig_torus, 4, theta_max=100.0)
    assert all(p.theta <= 100.0 for p in pairs)
    assert [round(p.theta, 1) for p in pairs if p.theta > 1.0] == [39.5, 39.5]


def test_eigen_orthogonality(flat_eig_torus):
    pairs = eigenpairs(flat_eig_torus, 8)
    w = flat_eig_torus.node_weights().ravel()
    U = np.stack([p.u.ravel() for p in pairs])
    gram = (U * w) @ U.T / w.sum()
    assert np.max(np.abs(gram - np.eye(len(pairs)))) <= 1e-8


def test_residual_invariant_and_normalization(flat_eig_torus):
    from collapselab.operators import l2_average

    pairs = eigenpairs(flat_eig_torus, 6)
    for p in pairs:
        assert p.residual <= 1e-8 * (1.0 + p.theta)
        assert l2_average(flat_eig_torus, p.u) == pytest.approx(1.0, abs=1e-10)
    thetas = [p.theta for p in pairs]
    assert thetas == sorted(thetas)


def test_clusters_group_degenerate_pairs(flat_eig_torus):
    pairs = eigenpairs(flat_eig_torus, 5)
    assert pairs[1].cluster == pairs[2].cluster
    assert pairs[0].cluster != pairs[1].cluster


def test_k_bound_reproducibility(flat_eig_torus):
    # K := sup(|u| + r |grad u|) bit-reproducible across solves
    def k_bound():
        pair = eigenpairs(flat_eig_torus, 2)[1]
        g = gradient(flat_eig_torus, pair.u)
        gn = np.sqrt(np.maximum(metric_inner(flat_eig_torus, g, g), 0.0))
        return region_sup(np.abs(pair.u) + 0.25 * gn)

    a, b = k_bound(), k_bound()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_dirichlet_ball_mode(flat_torus):
    ball = geodesic_ball(flat_torus, (0, 0), 0.25)
    pairs = eigenpairs(flat_torus, 2, region=ball)
    assert pairs[0].theta > 0  # no constant mode with Dirichlet condition
    outside = ~(ball.members & ~ball.boundary)
    assert np.max(np.abs(pairs[0].u[outside])) == 0.0


def test_cheng_yau_base_mode(flat_eig_torus):
    pos = flat_eig_torus.positions()
    u = np.sin(2 * np.pi * pos[..., 0])
    ball = geodesic_ball(flat_eig_torus, (0, 0), 0.25)
    assert cheng_yau_ratio(flat_eig_torus, u, ball) == pytest.approx(np.pi / 2, rel=1e-2)


def test_cheng_yau_constant_zero(flat_eig_torus):
    ball = geodesic_ball(flat_eig_torus, (0, 0), 0.25)
    u = np.ones(flat_eig_torus.grid.shape)
    assert cheng_yau_ratio(flat_eig_torus, u, ball) == 0.0


def test_cheng_yau_zero_field_errors(flat_eig_torus):
    ball = geodesic_ball(flat_eig_torus, (0, 0), 0.25)
    with pytest.raises(ValueError, match="identically zero"):
        cheng_yau_ratio(flat_eig_torus, np.zeros(flat_eig_torus.grid.shape), ball)


def test_cheng_yau_eigenmode_matches_base_mode(flat_eig_torus):
    # the first nonzero cluster consists of sin/cos(2 pi x) mixtures
    pair = eigenpairs(flat_eig_torus, 2)[1]
    ball = geodesic_ball(flat_eig_torus, (0, 0), 0.25)
    assert cheng_yau_ratio(flat_eig_torus, pair.u, ball) == pytest.approx(np.pi / 2, rel=2e-2)


def test_eigen_cache_roundtrip(tmp_path, flat_eig_torus):
    pairs = eigenpairs(flat_eig_torus, 5)
    path = tmp_path / "pairs.eigc"
    save_eigen_cache(path, flat_eig_torus, pairs)
    loaded = load_eigen_cache(path, flat_eig_torus)
    assert loaded is not None
    for a, b in zip(pairs, loaded):
        assert a.theta == b.theta
        assert np.array_equal(a.u, b.u)
        assert a.cluster == b.cluster


def test_eigen_cache_detects_corruption(tmp_path, flat_eig_torus):
    pairs = eigenpairs(flat_eig_torus, 5)
    path = tmp_path / "pairs.eigc"
    save_eigen_cache(path, flat_eig_torus, pairs)
    data = bytearray(path.read_bytes())
    # flip the exponent byte of one eigenvector entry (header is 24 bytes,
    # thetas 5*8; offset lands inside u[0])
    data[24 + 40 + 8 * 100 + 7] ^= 0x7F
    path.write_bytes(bytes(data))
    assert load_eigen_cache(path, flat_eig_torus) is None


def test_eigen_cache_wrong_shape_rejected(tmp_path, flat_eig_torus, flat_torus):
    pairs = eigenpairs(flat_eig_torus, 3)
    path = tmp_path / "pairs.eigc"
    save_eigen_cache(path, flat_eig_torus, pairs)
    assert load_eigen_cache(path, flat_torus) is None


def test_count_out_of_range(flat_eig_torus):
    with pytest.raises(ValueError, match="count"):
        eigenpairs(flat_eig_torus, 0)
