import numpy as np
import pytest

import cascadeflow as cf
from cascadeflow.rng import stream


@pytest.fixture(scope="session")
def schedule():
    return cf.default_schedule()


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small grid, short span: 8x12 cells, 20 years, train + heldout scenarios."""
    train = cf.generate(
        cf.ScenarioSpec("toy-a", years=20, members=2, n_lat=8, n_lon=12, ramp=0.9),
        seed=0,
        role="train",
    )
    other = cf.generate(
        cf.ScenarioSpec("toy-b", years=20, members=1, n_lat=8, n_lon=12, ramp=0.3),
        seed=0,
        role="train",
    )
    held = cf.generate(
        cf.ScenarioSpec("toy-h", years=20, members=1, n_lat=8, n_lon=12, ramp=0.6),
        seed=0,
        role="heldout",
    )
    from cascadeflow.synth import merge

    return merge([train, other, held])


@pytest.fixture()
def rng():
    return stream(1234, "tests")


def random_grid(rng, c=1, t=4, h=4, w=6):
    lat = np.linspace(-80, 80, h)
    return cf.FieldGrid(rng.standard_normal((c, t, h, w)), lat)
