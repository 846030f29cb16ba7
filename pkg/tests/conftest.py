import numpy as np
import pytest

from collapselab import FamilySpec, build_family, geodesic_ball
from collapselab.splitting import harmonic_coordinates


@pytest.fixture(scope="session")
def flat_torus():
    return build_family(FamilySpec(kind="flat-product-torus", epsilon=0.1, resolution=(256, 32)))


@pytest.fixture(scope="session")
def flat_eig_torus():
    return build_family(FamilySpec(kind="flat-product-torus", epsilon=0.1, resolution=(128, 16)))


@pytest.fixture(scope="session")
def unit_torus():
    return build_family(FamilySpec(kind="flat-product-torus", epsilon=1.0, resolution=(128, 128)))


@pytest.fixture(scope="session")
def warped_torus():
    return build_family(
        FamilySpec(kind="warped-torus", epsilon=0.1, delta=0.3, resolution=(128, 16))
    )


@pytest.fixture(scope="session")
def twisted_torus():
    return build_family(
        FamilySpec(kind="twisted-3-torus", epsilon=0.25, twist=np.pi / 2, k=2, resolution=(24, 24, 16))
    )


@pytest.fixture(scope="session")
def flat_coordinates(flat_torus):
    return harmonic_coordinates(flat_torus)


@pytest.fixture(scope="session")
def warped_coordinates(warped_torus):
    return harmonic_coordinates(warped_torus)


@pytest.fixture(scope="session")
def flat_ball(flat_torus):
    return geodesic_ball(flat_torus, (0, 0), 0.25)
