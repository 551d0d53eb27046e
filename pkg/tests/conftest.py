import numpy as np
import pytest

from coatlamb.model import TableSet
from coatlamb.tables import (
    Axis,
    precompute_coat_transmission,
    precompute_escape_variance,
    precompute_inner_reflectance,
    precompute_refraction_jacobian,
)


@pytest.fixture(scope="session")
def unit_tables():
    """Small but real tables shared by the model/layered/render unit tests."""
    axes = {
        "cos_theta": Axis("cos_theta", 17, 0.0, 1.0),
        "alpha": Axis("alpha", 5, 0.0, 1.0),
        "eta": Axis("eta", 9, 0.25, 4.0, "log"),
        "tau": Axis("tau", 5, 0.0, 1.0),
    }
    coat = precompute_coat_transmission(axes, n_paths=8192, seed=31)
    refl, trans = precompute_inner_reflectance(axes, n_paths=16_384, seed=32)
    sig = precompute_escape_variance(axes, n_paths=20_000, seed=33)
    jax = {"eta": Axis("eta", 9, 0.25, 4.0, "log"), "alpha": Axis("alpha", 5, 0.0, 1.0)}
    jac, spread = precompute_refraction_jacobian(jax, n_paths=8192, seed=34)
    return TableSet(coat, refl, trans, sig, refraction_jacobian=jac, transmit_spread=spread)
