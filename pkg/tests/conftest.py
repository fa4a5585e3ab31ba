import numpy as np
import pytest

from rfsplat.scene import (AsgLobe, GaussianPrimitive, Kind, Scene,
                           TemporalEnvelope)


def make_lobe(v=(0.0, 0.0, 1.0), lambda_x=20.0, lambda_y=20.0, a_bar=0.5,
              psi=0.0, t_c=5.0, t_w=100.0) -> AsgLobe:
    return AsgLobe(v=np.asarray(v, dtype=float), lambda_x=lambda_x,
                   lambda_y=lambda_y, a_bar=a_bar, psi=psi,
                   envelope=TemporalEnvelope(t_c, t_w))


def make_primitive(mu0=(10.0, 0.0, 2.0), scale=(1.0, 1.0, 1.0),
                   rho=0.4, kind=Kind.STATIC, velocity=(0.0, 0.0, 0.0),
                   lobes=None) -> GaussianPrimitive:
    if lobes is None:
        direction = -np.asarray(mu0, dtype=float)
        n = np.linalg.norm(direction)
        direction = direction / n if n > 0 else np.array([0.0, 0.0, 1.0])
        lobes = [make_lobe(v=direction)]
    return GaussianPrimitive(
        mu0=np.asarray(mu0, dtype=float),
        scale=np.asarray(scale, dtype=float),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        rho=rho,
        velocity=np.asarray(velocity, dtype=float),
        kind=kind,
        lobes=lobes,
    )


def single_prim_scene(**kwargs) -> Scene:
    prim = make_primitive(**kwargs)
    return Scene.from_primitives([prim], eta=1.0, r_rx=1.0, t_span=(0.0, 10.0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
