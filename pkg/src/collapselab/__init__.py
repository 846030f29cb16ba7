"""Numerical laboratory for collapsing manifolds and tangential-gradient estimates."""

from .manifold import (
    DiscreteManifold,
    FamilySpec,
    FiberTrace,
    GeodesicBall,
    PeriodicGrid,
    TriMesh,
    ball_region,
    build_family,
    epsilon_proxy,
    extract_fiber,
    geodesic_ball,
    load_off,
    ricci_lower_bound,
)
from .operators import (
    gradient,
    gradient_norm_sq,
    hessian,
    hessian_norm,
    l2_average,
    laplace,
    laplacian_matrix,
)

__version__ = "0.1.0"
