"""Laplace-Beltrami eigenpairs and the measured Cheng-Yau ratio.

Eigenproblems solve the symmetric pencil ``L u = theta mass u`` by
shift-invert Lanczos with a sparse factorization and a deterministic
(seeded) start vector, so repeated runs are bit-reproducible.  Eigenvalues
follow the ``Delta = -div grad`` convention (theta >= 0, constants in the
kernel on closed charts).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .manifold import DiscreteManifold, GeodesicBall, ball_region
from .operators import gradient, l2_average, laplacian_matrix, metric_inner, region_sup

__all__ = [
    "EigenPair",
    "eigenpairs",
    "cheng_yau_ratio",
    "save_eigen_cache",
    "load_eigen_cache",
]

RESIDUAL_TOL = 1e-8
CLUSTER_REL_GAP = 1e-6


@dataclass(frozen=True)
class EigenPair:
    """One eigenpair ``Delta u = theta u`` with L2-average-normalized u."""

    theta: float
    u: np.ndarray
    residual: float
    cluster: int = 0


def _solver_scale(L, mass) -> float:
    return float(np.max(L.diagonal() / mass))


def eigenpairs(
    M: DiscreteManifold,
    count: int,
    theta_max: float | None = None,
    region: np.ndarray | GeodesicBall | None = None,
    seed: int = 0,
) -> list[EigenPair]:
    """Lowest eigenpairs of the Laplace-Beltrami operator.

    ``region`` switches to the Dirichlet problem on a ball (or boolean mask);
    with ``theta_max`` given, the count grows until the spectrum is exhausted
    up to the threshold and all eigenvalues <= theta_max are returned.
    """
    mask = region.members & ~region.boundary if isinstance(region, GeodesicBall) else region
    if theta_max is not None:
        k = max(count, 8)
        while True:
            pairs = eigenpairs(M, k, None, region=region, seed=seed)
            if pairs[-1].theta > theta_max or len(pairs) >= _n_dof(M, mask) - 2:
                return [p for p in pairs if p.theta <= theta_max]
            k = min(2 * k, _n_dof(M, mask) - 2)

    L, mass = laplacian_matrix(M, mask)
    n = L.shape[0]
    if not (0 < count <= n - 2):
        raise ValueError(f"count must lie in [1, {n - 2}]")
    Mmat = diags(mass).tocsc()
    sigma = -max(1e-6 * _solver_scale(L, mass), 1e-9)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    try:
        theta, vecs = eigsh(L.tocsc(), k=count, M=Mmat, sigma=sigma, which="LM", v0=v0, tol=0)
    except ArpackNoConvergence as exc:
        raise RuntimeError(
            f"eigensolver failed to converge: got {len(exc.eigenvalues)} of {count} pairs"
        ) from exc
    order = np.argsort(theta)
    theta = theta[order]
    vecs = vecs[:, order]

    total = float(mass.sum())
    shape = M.grid.shape if M.is_grid else (M.chart.n_nodes,)
    pairs: list[EigenPair] = []
    cluster = 0
    for i in range(count):
        th = float(max(theta[i], 0.0) if abs(theta[i]) < 1e-10 * _solver_scale(L, mass) else theta[i])
        v = vecs[:, i] * np.sqrt(total)  # M-orthonormal -> L2-average norm 1
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        res = float(np.sqrt(np.sum(mass * ((L @ v) / mass - th * v) ** 2) / total))
        if res > RESIDUAL_TOL * (1.0 + abs(th)):
            raise RuntimeError(
                f"eigenpair {i} residual {res:.3e} exceeds {RESIDUAL_TOL:.0e} * (1 + theta)"
            )
        if i > 0 and abs(th - pairs[-1].theta) >= CLUSTER_REL_GAP * max(abs(th), 1.0):
            cluster += 1
        full = np.zeros(int(np.prod(shape)))
        if mask is not None:
            full[np.flatnonzero(mask.ravel())] = v
        else:
            full = v
        pairs.append(EigenPair(theta=th, u=full.reshape(shape), residual=res, cluster=cluster))
    return pairs


def _n_dof(M: DiscreteManifold, mask: np.ndarray | None) -> int:
    if mask is None:
        return M.grid.n_nodes if M.is_grid else M.chart.n_nodes
    return int(np.asarray(mask).sum())


def cheng_yau_ratio(M: DiscreteManifold, u: np.ndarray, ball: GeodesicBall) -> float:
    """Measured gradient-estimate ratio ``r sup_B(p,r) |grad u| / sup_B(p,2r) |u|``."""
    u = np.asarray(u, dtype=float)
    outer = ball_region(M, ball.center, 2 * ball.radius)
    sup_u = region_sup(np.abs(u), outer.members)
    if sup_u == 0.0:
        raise ValueError("Cheng-Yau ratio undefined for u identically zero")
    g = gradient(M, u)
    gn = np.sqrt(np.maximum(metric_inner(M, g, g), 0.0))
    return float(ball.radius * region_sup(gn, ball.members) / sup_u)


# ---------------------------------------------------------------------------
# eigenpair cache
# ---------------------------------------------------------------------------
#
# Binary layout (all little-endian):
#   magic   4 bytes  b"EIGC"
#   version u32      1
#   m       u32      chart dimension
#   counts  m x u32  node counts per axis (V for meshes, m = 1 entry? no: m, then counts)
#   npairs  u32
#   theta   npairs x f8
#   u       npairs x N x f8   (C order, N = prod(counts))
#
# Loads validate shape metadata and recompute eigen-residuals; files that fail
# either check are reported as corrupt so callers rebuild.

_MAGIC = b"EIGC"
_VERSION = 1


def save_eigen_cache(path: str | Path, M: DiscreteManifold, pairs: list[EigenPair]) -> None:
    shape = M.grid.shape if M.is_grid else (M.chart.n_nodes,)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<I", len(pairs)))
        np.asarray([p.theta for p in pairs], dtype="<f8").tofile(fh)
        for p in pairs:
            np.asarray(p.u, dtype="<f8").ravel().tofile(fh)


def load_eigen_cache(path: str | Path, M: DiscreteManifold) -> list[EigenPair] | None:
    """Read a cache file; returns None (caller rebuilds) on any corruption."""
    path = Path(path)
    if not path.exists():
        return None
    shape = M.grid.shape if M.is_grid else (M.chart.n_nodes,)
    n = int(np.prod(shape))
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                return None
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _VERSION:
                return None
            (m,) = struct.unpack("<I", fh.read(4))
            counts = struct.unpack(f"<{m}I", fh.read(4 * m))
            if counts != tuple(shape):
                return None
            (npairs,) = struct.unpack("<I", fh.read(4))
            theta = np.fromfile(fh, dtype="<f8", count=npairs)
            us = np.fromfile(fh, dtype="<f8", count=npairs * n)
            if len(theta) != npairs or us.size != npairs * n:
                return None
        us = us.reshape(npairs, *shape)
    except (OSError, struct.error, ValueError):
        return None
    L, mass = laplacian_matrix(M)
    total = float(mass.sum())
    pairs = []
    cluster = 0
    for i in range(npairs):
        v = us[i].ravel()
        res = float(np.sqrt(np.sum(mass * ((L @ v) / mass - theta[i] * v) ** 2) / total))
        if not np.isfinite(res) or res > 1e-6 * (1.0 + abs(theta[i])):
            return None  # corrupt payload: semantic checksum failed
        if i > 0 and abs(theta[i] - pairs[-1].theta) >= CLUSTER_REL_GAP * max(abs(theta[i]), 1.0):
            cluster += 1
        pairs.append(EigenPair(theta=float(theta[i]), u=us[i], residual=res, cluster=cluster))
    return pairs
