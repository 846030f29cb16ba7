import dataclasses

import numpy as np
import pytest

from collapselab import FamilySpec, build_family, geodesic_ball
from collapselab.operators import interp_scalar, metric_inner, region_sup
from collapselab.splitting import (
    SplittingMap,
    certify,
    classify_regular,
    coordinate_boundary_data,
    harmonic_coordinates,
    jacobian_stats,
    morse_test_map,
    quantities_FG,
    solve_harmonic,
)
from collapselab.flow import tangential_part


def test_flat_global_coordinate_exact(flat_torus, flat_coordinates):
    pos = flat_torus.positions()
    assert np.max(np.abs(flat_coordinates.values[0] - pos[..., 0])) == 0.0
    assert flat_coordinates.residuals[0] <= 1e-10


def test_empty_map_rejected(flat_torus):
    with pytest.raises(ValueError, match="k = 0"):
        SplittingMap(flat_torus, (), ())


def test_flat_ball_dirichlet_returns_coordinate(flat_torus, flat_ball):
    data = coordinate_boundary_data(flat_torus, flat_ball)
    phi = solve_harmonic(flat_ball, data)
    assert phi.residuals[0] <= 1e-10
    inside = flat_ball.members
    assert np.nanmax(np.abs(phi.values[0][inside] - data[0][0][inside])) <= 1e-10


def test_warped_ball_dirichlet_differs_from_coordinate(warped_torus):
    ball = geodesic_ball(warped_torus, (32, 0), 0.4)
    data = coordinate_boundary_data(warped_torus, ball)
    phi = solve_harmonic(ball, data)
    assert phi.residuals[0] <= 1e-8
    interior = ball.members & ~ball.boundary
    dev = np.nanmax(np.abs(phi.values[0][interior] - data[0][0][interior]))
    assert dev > 1e-3


def test_warped_global_solve_matches_quadrature_oracle(warped_torus, warped_coordinates):
    # oracle: phi' = c / w with c = 1 / int dx/w = sqrt(1 - delta^2)
    from scipy.integrate import quad

    c_oracle = 1.0 / quad(lambda x: 1.0 / (1.0 + 0.3 * np.sin(2 * np.pi * x)), 0.0, 1.0)[0]
    assert c_oracle == pytest.approx(np.sqrt(1 - 0.09), rel=1e-10)
    g = warped_coordinates.gradients()[0]
    gn = np.sqrt(metric_inner(warped_torus, g, g))
    assert gn.max() == pytest.approx(c_oracle / 0.7, rel=1e-3)
    assert gn.min() == pytest.approx(c_oracle / 1.3, rel=1e-3)
    assert warped_coordinates.residuals[0] <= 1e-8


def test_jacobian_identity_flat(flat_coordinates):
    stats = jacobian_stats(flat_coordinates)
    assert np.max(np.abs(stats.gram[..., 0, 0] - 1.0)) <= 1e-12
    assert np.max(np.abs(stats.lam - 1.0)) <= 1e-12
    assert np.max(np.abs(stats.Lam - 1.0)) <= 1e-12
    assert np.max(np.abs(stats.absdet - 1.0)) <= 1e-12


def test_jacobian_identity_twisted(twisted_torus):
    phi = harmonic_coordinates(twisted_torus)
    assert phi.k == 2
    stats = jacobian_stats(phi)
    eye_dev = np.max(np.abs(stats.gram - np.eye(2)))
    assert eye_dev <= 1e-10
    assert np.max(np.abs(stats.absdet - 1.0)) <= 1e-10


def test_determinant_identity(warped_coordinates, twisted_torus):
    for phi in (warped_coordinates, harmonic_coordinates(twisted_torus)):
        stats = jacobian_stats(phi)
        det = np.linalg.det(stats.gram)
        assert np.nanmax(np.abs(stats.absdet**2 - det)) <= 1e-12 * max(1.0, np.nanmax(det))


def test_classify_regular_all_regular(flat_coordinates):
    stats = jacobian_stats(flat_coordinates)
    mask = classify_regular(stats, stats.default_threshold())
    assert mask.regular.all()
    assert mask.singular_fraction == 0.0


def test_classify_regular_degenerate_threshold(flat_coordinates):
    stats = jacobian_stats(flat_coordinates)
    mask = classify_regular(stats, float(np.nanmax(stats.lam)) * 2.0)
    assert not mask.regular.any()
    assert mask.singular_fraction == 1.0


def test_threshold_must_be_positive(flat_coordinates):
    stats = jacobian_stats(flat_coordinates)
    with pytest.raises(ValueError, match="positive"):
        classify_regular(stats, 0.0)


def test_morse_map_singular_fraction_refines():
    # critical circles at x = 1/4, 3/4 hit grid columns: fraction = 2/n exactly
    fractions = []
    for n in (64, 128, 256):
        M = build_family(FamilySpec(kind="flat-product-torus", epsilon=0.5, resolution=(n, 16)))
        mm = morse_test_map(M)
        stats = jacobian_stats(mm)
        mask = classify_regular(stats, stats.default_threshold())
        fractions.append(mask.singular_fraction)
        assert mask.singular_fraction == pytest.approx(2.0 / n, abs=1e-12)
    assert fractions[0] > fractions[1] > fractions[2]
    order = np.log2(fractions[0] / fractions[1])
    assert order >= 0.9


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


def test_certificate_flat_exact_splitting(flat_torus, flat_coordinates, flat_ball):
    cert = certify(flat_coordinates, flat_ball)
    assert cert.sup_grad == pytest.approx(1.0, abs=1e-12)
    assert cert.gram_dev <= 1e-10
    assert cert.hess_energy <= 1e-10
    assert cert.range_ok
    assert cert.psi <= 1e-10
    assert cert.epsilon_hat == pytest.approx(0.1, rel=1e-6)
    d = cert.to_json_dict()
    assert set(d) == {"supGrad", "gramDev", "hessEnergy", "rangeOk", "psi", "epsilonHat"}


def test_certificate_unit_torus_identity():
    M = build_family(FamilySpec(kind="flat-product-torus", epsilon=1.0, resolution=(64, 64)))
    phi = harmonic_coordinates(M)
    ball = geodesic_ball(M, (0, 0), 0.25)
    cert = certify(phi, ball)
    assert cert.psi <= 1e-10
    assert cert.epsilon_hat == pytest.approx(1.0, rel=1e-6)


def test_certificate_warped_regression_locked(warped_torus, warped_coordinates):
    ball = geodesic_ball(warped_torus, (32, 0), 0.25)
    cert = certify(warped_coordinates, ball)
    assert cert.psi > 0.0
    assert np.isfinite(cert.psi)
    # pinned by the first run of this pipeline at resolution (128, 16)
    assert cert.gram_dev == pytest.approx(0.3802108135566320, rel=1e-6)
    assert cert.hess_energy == pytest.approx(0.2326881447757396, rel=1e-6)
    assert cert.psi == pytest.approx(0.4823775956403237, rel=1e-6)
    assert cert.sup_grad == pytest.approx(1.3624592008426575, rel=1e-6)


# ---------------------------------------------------------------------------
# F and G
# ---------------------------------------------------------------------------


def _synthetic_k2_map(M):
    pos = M.positions()
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    v1 = x + 0.05 * np.sin(2 * np.pi * (x + z))
    v2 = y + 0.05 * np.cos(2 * np.pi * y) * np.sin(2 * np.pi * z)
    return SplittingMap(
        M, (v1, v2), (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])), residuals=(np.nan, np.nan)
    )


def _field_pair(M, phi):
    pos = M.positions()
    u = np.sin(2 * np.pi * pos[..., M.dim - 1]) + 0.3 * np.sin(2 * np.pi * pos[..., 0])
    stats = jacobian_stats(phi)
    mask = classify_regular(stats, stats.default_threshold())
    from collapselab.operators import gradient

    grad_u = gradient(M, u)
    grad_t, _ = tangential_part(M, stats, mask.regular & stats.valid, grad_u)
    return stats, mask.regular & stats.valid, grad_u, grad_t


def test_fg_vanish_for_exact_splitting(flat_torus, flat_coordinates):
    M = flat_torus
    stats, mask, grad_u, grad_t = _field_pair(M, flat_coordinates)
    F, G = quantities_FG(flat_coordinates, stats, mask, grad_u, grad_t)
    assert np.nanmax(np.abs(F)) <= 1e-10
    assert np.nanmax(np.abs(G)) <= 1e-10


def _rotate_map(phi, Q):
    stack = np.stack(phi.values, axis=-1) @ Q.T
    winds = np.stack(phi.windings, axis=0)
    new_winds = Q @ winds
    return SplittingMap(
        phi.manifold,
        tuple(stack[..., a] for a in range(phi.k)),
        tuple(new_winds[a] for a in range(phi.k)),
        domain=phi.domain,
        residuals=phi.residuals,
    )


def _random_orthogonal(rng, k):
    if k == 1:
        return np.array([[rng.choice([-1.0, 1.0])]])
    mat = rng.standard_normal((k, k))
    q, r = np.linalg.qr(mat)
    return q * np.sign(np.diag(r))


@pytest.mark.parametrize("k", [1, 2])
def test_orthogonal_invariance_20_rotations(k, warped_torus, warped_coordinates, twisted_torus):
    if k == 1:
        M, phi = warped_torus, warped_coordinates
    else:
        M = twisted_torus
        phi = _synthetic_k2_map(M)
    stats, mask, grad_u, grad_t = _field_pair(M, phi)
    F0, G0 = quantities_FG(phi, stats, mask, grad_u, grad_t)
    J0 = stats.absdet
    rng = np.random.default_rng(42)
    scale_F = max(1.0, np.nanmax(np.abs(F0)))
    scale_G = max(1.0, np.nanmax(np.abs(G0)))
    for _ in range(20):
        Q = _random_orthogonal(rng, k)
        phi_q = _rotate_map(phi, Q)
        stats_q = jacobian_stats(phi_q)
        grad_t_q, _ = tangential_part(M, stats_q, mask, grad_u)
        Fq, Gq = quantities_FG(phi_q, stats_q, mask, grad_u, grad_t_q)
        assert np.nanmax(np.abs(stats_q.absdet - J0)) <= 1e-10 * max(1.0, np.nanmax(J0))
        assert np.nanmax(np.abs(Fq - F0)) <= 1e-10 * scale_F
        assert np.nanmax(np.abs(Gq - G0)) <= 1e-10 * scale_G


def test_fg_direct_inverse_oracle(warped_torus, warped_coordinates):
    # direct evaluation of the defining sums with an explicit Gram inverse,
    # valid at well-conditioned points only; k = 1 closed form
    M = warped_torus
    phi = warped_coordinates
    stats, mask, grad_u, grad_t = _field_pair(M, phi)
    F, G = quantities_FG(phi, stats, mask, grad_u, grad_t)
    grad_phi = phi.gradients()[0]
    hess_phi = phi.hessians()[0]
    J = stats.gram[..., 0, 0]
    inner_u = metric_inner(M, grad_u, grad_phi)
    hess_tt = np.einsum("...ij,...i,...j->...", hess_phi, grad_t, grad_t)
    hess_tp = np.einsum("...ij,...i,...j->...", hess_phi, grad_t, grad_phi)
    F_direct = (1.0 / J) * inner_u * hess_tt * np.sqrt(J)
    G_direct = (1.0 / J) * hess_tp * np.sqrt(J)
    good = mask & (stats.lam > 0.3 * np.nanmax(stats.lam))
    scale = max(1.0, np.nanmax(np.abs(F_direct[good])))
    assert np.nanmax(np.abs((F - F_direct)[good])) <= 1e-10 * scale
    assert np.nanmax(np.abs((G - G_direct)[good])) <= 1e-10 * max(1.0, np.nanmax(np.abs(G_direct[good])))


def test_fg_bound_chain_every_regular_node(warped_torus, warped_coordinates):
    # |F| <= k (1+C0)^{k-1} K^3 r^-3 sum|Hess_Phi|, |G| <= k (1+C0)^{k-1} K r^-1 sum|Hess_Phi|
    M = warped_torus
    phi = warped_coordinates
    r = 0.25
    stats, mask, grad_u, grad_t = _field_pair(M, phi)
    F, G = quantities_FG(phi, stats, mask, grad_u, grad_t)
    from collapselab.estimates import w22_k_bound

    pos = M.positions()
    u = np.sin(2 * np.pi * pos[..., 1]) + 0.3 * np.sin(2 * np.pi * pos[..., 0])
    K = w22_k_bound(M, u, np.ones(M.grid.shape, bool), r)
    sup_grad = max(
        region_sup(np.sqrt(metric_inner(M, g, g))) for g in phi.gradients()
    )
    C0 = max(sup_grad - 1.0, 0.0)
    hess_sum = sum(phi.hessian_norms())
    k = phi.k
    rhs_F = k * (1 + C0) ** (k - 1) * K**3 / r**3 * hess_sum
    rhs_G = k * (1 + C0) ** (k - 1) * K / r * hess_sum
    ok = mask
    assert np.all(np.abs(F[ok]) <= rhs_F[ok] * (1 + 1e-9) + 1e-12)
    assert np.all(np.abs(G[ok]) <= rhs_G[ok] * (1 + 1e-9) + 1e-12)


def test_jacobian_density_derivative_along_curves(warped_torus, warped_coordinates):
    # |d/ds |J_k|(gamma)| <= k (1+C0)^{k-1} |gamma'| sum|Hess_Phi| by finite differences
    M = warped_torus
    phi = warped_coordinates
    stats = jacobian_stats(phi)
    sup_grad = region_sup(np.sqrt(metric_inner(M, phi.gradients()[0], phi.gradients()[0])))
    C0 = max(sup_grad - 1.0, 0.0)
    hess_sum = sum(phi.hessian_norms())
    # discretization allowance: the bilinear interpolant's slope deviates from
    # the smooth density by O(h |J|''), which dominates where both sides vanish
    h_max = max(M.grid.spacings)
    d2j = max(
        float(np.max(np.abs(np.roll(stats.absdet, -1, ax) - 2 * stats.absdet + np.roll(stats.absdet, 1, ax))))
        / M.grid.spacings[ax] ** 2
        for ax in range(M.dim)
    )
    rng = np.random.default_rng(11)
    for _ in range(5):
        a, b, cx, cy = rng.uniform(0.05, 0.2, 4)
        s = np.linspace(0.0, 1.0, 400, endpoint=False)
        curve = np.stack(
            [cx + a * np.cos(2 * np.pi * s), cy + b * np.sin(4 * np.pi * s)], axis=-1
        )
        jvals = interp_scalar(M, stats.absdet, M.grid.wrap(curve))
        ds = s[1] - s[0]
        dj = (np.roll(jvals, -1) - np.roll(jvals, 1)) / (2 * ds)
        mid_speed = (np.roll(curve, -1, axis=0) - np.roll(curve, 1, axis=0)) / (2 * ds)
        from collapselab.operators import interp_metric

        gmid = interp_metric(M, M.grid.wrap(curve))
        speed = np.sqrt(np.einsum("ni,nij,nj->n", mid_speed, gmid, mid_speed))
        bound = (
            phi.k
            * (1 + C0) ** (phi.k - 1)
            * speed
            * interp_scalar(M, hess_sum, M.grid.wrap(curve))
        )
        slack = speed * h_max * d2j
        assert np.all(np.abs(dj) <= bound * 1.05 + slack + 1e-10)
