import numpy as np
import pytest

from models.schemas import LabelMap, PhantomSpec, Volume
from services.phantom_service import PhantomGenerator


@pytest.fixture(scope="session")
def phantom():
    """Default untilted phantom with one metal crown."""
    return PhantomGenerator(PhantomSpec(metal=frozenset({11}))).generate()


@pytest.fixture(scope="session")
def tilted_phantom():
    return PhantomGenerator(PhantomSpec(tilt_deg=15.0, seed=3)).generate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume:
    return Volume(spacing=spacing, origin=origin, data=np.asarray(data, dtype=np.float32))


def make_labels(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> LabelMap:
    return LabelMap(spacing=spacing, origin=origin, data=np.asarray(data, dtype=np.uint16))
