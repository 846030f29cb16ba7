"""Tangential gradient projection and fiber-constrained flow dynamics.

The integral curves of the tangential gradient stay inside one fiber of the
splitting map; discrete integration enforces this with a Newton reprojection
onto the level set after every step.  The module also measures the fiberwise
a priori constants (lambda, Lambda, C0, K) and checks the exponential
lower bound and the a priori sup bound with all constants measured from the
discrete fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifold import DiscreteManifold, FiberTrace, graph_distances
from .operators import (
    chart_gradient,
    gradient,
    hessian,
    hessian_norm,
    interp_scalar,
    metric_inner,
    region_sup,
)
from .splitting import JacobianStats, RegularMask, SplittingMap

__all__ = [
    "TangentialField",
    "FlowTrajectory",
    "FiberBoundReport",
    "ExponentialBoundCheck",
    "tangential_part",
    "tangential_projection",
    "integrate_flow",
    "integrate_flow_ensemble",
    "verify_exponential_bound",
    "fiber_apriori_check",
    "FlowEscapeError",
]


class FlowEscapeError(RuntimeError):
    """Raised when a trajectory leaves the regular region; carries the last valid state."""

    def __init__(self, message: str, trajectory: "FlowTrajectory | None" = None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class TangentialField:
    """Splitting of grad u into fiber-tangential and normal parts (regular nodes)."""

    manifold: DiscreteManifold
    u: np.ndarray
    phi: SplittingMap
    stats: JacobianStats
    mask: np.ndarray            # regular nodes where the split is defined
    grad_u: np.ndarray
    grad_t: np.ndarray          # NaN on singular nodes
    grad_perp: np.ndarray
    speed_sq: np.ndarray        # |grad^T u|^2, NaN on singular nodes
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def hessian_u(self) -> np.ndarray:
        if "hess_u" not in self._cache:
            self._cache["hess_u"] = hessian(self.manifold, self.u)
        return self._cache["hess_u"]

    def hessian_u_norm(self) -> np.ndarray:
        if "hess_u_norm" not in self._cache:
            self._cache["hess_u_norm"] = hessian_norm(self.manifold, self.hessian_u())
        return self._cache["hess_u_norm"]


def tangential_part(
    M: DiscreteManifold, stats: JacobianStats, mask: np.ndarray, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Split a vector field into fiber-tangential and grad-Phi-span parts.

    Assembled in the pointwise eigenbasis of the Gram matrix:
    ``X_perp = sum_a <X, phi_a> / lambda_a * grad phi_a``; entries outside the
    regular mask are NaN.
    """
    from .splitting import _rotated_quantities

    m = M.dim
    shape = stats.lam.shape
    idx, eigs, rot_grads, _ = _rotated_quantities(stats.phi, stats, mask)
    g = M.metric.reshape(-1, m, m)[idx]
    Xn = X.reshape(-1, m)[idx]
    inner = np.einsum("ni,nij,naj->na", Xn, g, rot_grads)
    coef = inner / eigs
    perp = np.einsum("na,nam->nm", coef, rot_grads)
    tang = Xn - perp
    out_t = np.full((int(np.prod(shape)), m), np.nan)
    out_p = np.full((int(np.prod(shape)), m), np.nan)
    out_t[idx] = tang
    out_p[idx] = perp
    return out_t.reshape(shape + (m,)), out_p.reshape(shape + (m,))


def tangential_projection(
    M: DiscreteManifold,
    u: np.ndarray,
    phi: SplittingMap,
    stats: JacobianStats,
    mask: RegularMask | np.ndarray,
) -> TangentialField:
    """Tangential/normal split of grad u over the regular nodes."""
    regular = mask.regular if isinstance(mask, RegularMask) else np.asarray(mask, dtype=bool)
    grad_u = gradient(M, u)
    grad_t, grad_perp = tangential_part(M, stats, regular & stats.valid, grad_u)
    speed_sq = metric_inner(M, np.where(np.isnan(grad_t), 0.0, grad_t), grad_t)
    speed_sq = np.where(np.isnan(grad_t[..., 0]), np.nan, speed_sq)
    return TangentialField(
        manifold=M,
        u=np.asarray(u, dtype=float),
        phi=phi,
        stats=stats,
        mask=regular & stats.valid,
        grad_u=grad_u,
        grad_t=grad_t,
        grad_perp=grad_perp,
        speed_sq=speed_sq,
    )


# ---------------------------------------------------------------------------
# flow integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowTrajectory:
    """Sampled integral curve of the tangential gradient inside one fiber."""

    x0: tuple[int, ...]
    level: np.ndarray
    times: np.ndarray
    positions: np.ndarray      # (n, m) wrapped chart coordinates
    u_values: np.ndarray
    speed_sq: np.ndarray
    drift: np.ndarray          # max |Phi(gamma) - level| per sample

    def to_csv(self, path: str | Path) -> None:
        m = self.positions.shape[1]
        coord_names = ["x", "y", "z"][:m]
        header = ",".join(["t", *coord_names, "u", "tangential_speed_sq", "drift"])
        data = np.column_stack(
            [self.times, self.positions, self.u_values, self.speed_sq, self.drift]
        )
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def _field_interpolators(field: TangentialField):
    M = field.manifold
    grad_t = np.where(np.isnan(field.grad_t), np.nan, field.grad_t)

    def velocity(pts: np.ndarray) -> np.ndarray:
        wrapped = M.grid.wrap(pts)
        comps = [interp_scalar(M, grad_t[..., c], wrapped) for c in range(M.dim)]
        return np.stack(comps, axis=-1)

    return velocity


def default_stability_rate(field: TangentialField) -> float:
    """Estimated sup of |d/dt log |grad^T u|^2| along the flow, from node fields."""
    M = field.manifold
    W = field.speed_sq
    V = field.grad_t
    ok = field.mask & np.isfinite(W)
    if not ok.any():
        raise ValueError("tangential field has no regular nodes")
    wmax = float(np.nanmax(W))
    if wmax <= 0:
        return 0.0
    dW = chart_gradient(M, np.where(ok, W, 0.0))
    advect = np.abs(np.einsum("...i,...i->...", np.where(np.isnan(V), 0.0, V), dW))
    floor = 1e-9 * wmax
    rate = np.where(ok & (W > floor), advect / np.maximum(W, floor), 0.0)
    return float(np.nanmax(rate))


def integrate_flow(
    field: TangentialField,
    x0: tuple[int, ...],
    T: float,
    dt: float,
    stability_rate: float | None = None,
) -> FlowTrajectory:
    """RK4 integration of ``gamma' = grad^T u`` with Newton reprojection.

    The step size must resolve the field's exponential rate:
    ``dt * rate <= 0.1``.  Every step is reprojected onto the level set
    ``{Phi = Phi(x0)}`` (tolerance 1e-10, at most 5 Newton iterations); if
    reprojection fails the error carries the last valid partial trajectory.
    """
    M = field.manifold
    if not field.mask[x0]:
        raise ValueError(f"start node {x0} is not regular")
    rate = default_stability_rate(field) if stability_rate is None else float(stability_rate)
    if dt * rate > 0.1 * (1 + 1e-9):
        raise ValueError(
            f"step size violation: dt * rate = {dt * rate:.3g} > 0.1; reduce dt below {0.1 / rate:.3g}"
        )
    n_steps = int(np.ceil(T / dt - 1e-12))
    pos = M.positions()[x0].astype(float)[None, :]
    level = field.phi.evaluate(pos)[0]
    velocity = _field_interpolators(field)

    times = [0.0]
    path = [M.grid.wrap(pos)[0].copy()]
    drifts = [0.0]
    x = pos.copy()

    def vel(pts, t_now):
        v = velocity(pts)
        if not np.all(np.isfinite(v)):
            raise FlowEscapeError(
                f"flow left the regular region at t = {t_now:.6g}",
                _assemble_trajectory(field, x0, level, times, path, drifts),
            )
        return v

    for i in range(n_steps):
        t_now = i * dt
        k1 = vel(x, t_now)
        k2 = vel(x + 0.5 * dt * k1, t_now)
        k3 = vel(x + 0.5 * dt * k2, t_now)
        k4 = vel(x + dt * k3, t_now)
        x_new = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        try:
            x_new = field.phi.project_to_level(x_new, level)
        except RuntimeError as exc:
            raise FlowEscapeError(
                f"reprojection failed at t = {(i + 1) * dt:.6g}: {exc}",
                _assemble_trajectory(field, x0, level, times, path, drifts),
            ) from exc
        x = x_new
        times.append((i + 1) * dt)
        path.append(M.grid.wrap(x)[0].copy())
        drifts.append(float(np.max(np.abs(field.phi.level_residual(x, level)))))
    return _assemble_trajectory(field, x0, level, times, path, drifts)


def _assemble_trajectory(field, x0, level, times, path, drifts) -> FlowTrajectory:
    M = field.manifold
    pts = np.asarray(path)
    u_vals = interp_scalar(M, field.u, pts)
    w_vals = interp_scalar(M, np.where(np.isnan(field.speed_sq), 0.0, field.speed_sq), pts)
    return FlowTrajectory(
        x0=tuple(int(i) for i in np.atleast_1d(x0)),
        level=np.asarray(level, dtype=float),
        times=np.asarray(times),
        positions=pts,
        u_values=u_vals,
        speed_sq=w_vals,
        drift=np.asarray(drifts),
    )


def integrate_flow_ensemble(
    field: TangentialField,
    starts: np.ndarray,
    T: float,
    dt: float,
    stability_rate: float | None = None,
) -> np.ndarray:
    """Final positions of the flow from many start points (no per-step records)."""
    M = field.manifold
    rate = default_stability_rate(field) if stability_rate is None else float(stability_rate)
    if dt * rate > 0.1 * (1 + 1e-9):
        raise ValueError(f"step size violation: dt * rate = {dt * rate:.3g} > 0.1")
    n_steps = int(np.ceil(T / dt - 1e-12))
    x = np.array(starts, dtype=float)
    levels = field.phi.evaluate(x)
    velocity = _field_interpolators(field)
    for _ in range(n_steps):
        k1 = velocity(x)
        k2 = velocity(x + 0.5 * dt * k1)
        k3 = velocity(x + 0.5 * dt * k2)
        k4 = velocity(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        x = field.phi.project_to_level(x, levels)
    return x


# ---------------------------------------------------------------------------
# fiberwise bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiberBoundReport:
    """Measured a priori constants and the sup bound on one regular fiber."""

    level: np.ndarray
    lam: float                 # inf of least Jacobian eigenvalue on the fiber
    Lam: float                 # sup of largest Jacobian eigenvalue
    c0: float                  # max_b sup_fiber r^2 |Hess_Phi^b|^2
    K: float                   # sup over the 2 eps r neighborhood of r|grad u| + r^2|Hess u|
    delta0: float              # sup_fiber |grad^T u|
    eps_hat: float
    r: float
    k: int
    lhs: float                 # r * delta0
    rhs: float                 # 2 (1 + lam^-1 sqrt(Lam k) c0)^(1/2) K sqrt(eps_hat)
    passed: bool
    margin: float              # rhs / lhs (inf when lhs = 0)
    counterexample: bool       # time-bound contradiction flag (== not passed)

    def to_json_dict(self) -> dict:
        return {
            "level": [float(v) for v in np.atleast_1d(self.level)],
            "lambda": self.lam,
            "Lambda": self.Lam,
            "C0": self.c0,
            "K": self.K,
            "delta0": self.delta0,
            "epsilonHat": self.eps_hat,
            "r": self.r,
            "k": self.k,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "pass": bool(self.passed),
            "margin": self.margin,
            "counterexample": bool(self.counterexample),
        }


def flow_rate_bound(report: FiberBoundReport) -> float:
    """Exponential rate C = 2 (1 + lam^-1 sqrt(Lam k) C0) K / r^2 of the decay bound."""
    return 2.0 * (1.0 + np.sqrt(report.Lam * report.k) * report.c0 / report.lam) * report.K / report.r**2


def fiber_apriori_check(
    fiber: FiberTrace,
    field: TangentialField,
    eps_hat: float,
    r: float,
) -> FiberBoundReport:
    """Measure the fiberwise a priori bound ``r sup|grad^T u| <= RHS``.

    All constants come from the discrete fields: the Jacobian eigenvalue
    range and Hessian sup on the fiber samples, and K on the Dijkstra
    ``2 eps r``-neighborhood of the fiber.
    """
    M = field.manifold
    if not fiber.regular:
        raise ValueError("fiber is not regular; a priori constants are undefined")
    pts = M.grid.wrap(fiber.points)
    stats = field.stats
    lam = float(np.min(interp_scalar(M, np.where(stats.valid, stats.lam, np.nan), pts)))
    Lam = float(np.max(interp_scalar(M, np.where(stats.valid, stats.Lam, np.nan), pts)))
    if not np.isfinite(lam) or lam <= 0:
        raise ValueError("fiber touches the singular region; lambda not positive")
    c0 = 0.0
    for hn in field.phi.hessian_norms():
        c0 = max(c0, float(np.max(interp_scalar(M, hn, pts) ** 2)) * r**2)
    # neighborhood B(fiber, 2 eps r) by multi-source Dijkstra from the samples
    flat_sources = _nearest_nodes(M, pts)
    dist = graph_distances(M, flat_sources).reshape(M.grid.shape)
    region = dist <= 2.0 * eps_hat * r + 1e-12
    gn = np.sqrt(np.maximum(metric_inner(M, field.grad_u, field.grad_u), 0.0))
    hn_u = field.hessian_u_norm()
    if not np.all(np.isfinite(gn[region])) or not np.all(np.isfinite(hn_u[region])):
        raise ValueError("fiber neighborhood exits the computed domain of u")
    K = region_sup(r * gn + r**2 * hn_u, region)
    speed = np.sqrt(np.maximum(interp_scalar(M, np.where(field.mask, field.speed_sq, np.nan), pts), 0.0))
    if not np.all(np.isfinite(speed)):
        raise ValueError("fiber neighborhood exits the regular region of the tangential field")
    delta0 = float(np.max(speed))
    k = field.phi.k
    rhs = 2.0 * np.sqrt(1.0 + np.sqrt(Lam * k) * c0 / lam) * K * np.sqrt(eps_hat)
    lhs = r * delta0
    passed = bool(lhs <= rhs)
    margin = float(rhs / lhs) if lhs > 0 else np.inf
    return FiberBoundReport(
        level=fiber.level,
        lam=lam,
        Lam=Lam,
        c0=c0,
        K=float(K),
        delta0=delta0,
        eps_hat=float(eps_hat),
        r=float(r),
        k=k,
        lhs=float(lhs),
        rhs=float(rhs),
        passed=passed,
        margin=margin,
        counterexample=not passed,
    )


def _nearest_nodes(M: DiscreteManifold, pts: np.ndarray) -> np.ndarray:
    grid = M.grid
    h = np.asarray(grid.spacings)
    ij = np.round(grid.wrap(pts) / h).astype(int) % np.asarray(grid.shape)
    flat = np.ravel_multi_index(tuple(ij.T), grid.shape)
    return np.unique(flat)


@dataclass(frozen=True)
class ExponentialBoundCheck:
    margin: float
    rate: float
    passed: bool


def verify_exponential_bound(
    traj: FlowTrajectory, report: FiberBoundReport, tol: float = 1e-3
) -> ExponentialBoundCheck:
    """Check ``|grad^T u|^2(gamma(t)) >= exp(-C t) |grad^T u|^2(gamma(0))``.

    Returns the minimum sampled ratio against the exponential floor; the
    check passes when it stays above ``1 - tol``.
    """
    C = flow_rate_bound(report)
    w0 = traj.speed_sq[0]
    if w0 <= 0:
        return ExponentialBoundCheck(margin=np.inf, rate=C, passed=True)
    floor = np.exp(-C * traj.times) * w0
    ratio = traj.speed_sq / floor
    margin = float(np.min(ratio))
    return ExponentialBoundCheck(margin=margin, rate=C, passed=bool(margin >= 1.0 - tol))
