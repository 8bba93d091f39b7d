from pathlib import Path

import numpy as np
import pytest

from speckle_forge.pipeline import SynthSpec, synth
from speckle_forge.raster import write_raster


@pytest.fixture
def rng():
    return np.random.default_rng(20240831)


@pytest.fixture(scope="session")
def small_instance():
    """128x128 barrel-distorted pair, cheap enough for end-to-end tests."""
    return synth(
        SynthSpec(
            width=128,
            height=128,
            features=25,
            radius_min=3.0,
            radius_max=6.0,
            family="barrel",
            magnitude=6.0,
            seed=1,
        )
    )


@pytest.fixture(scope="session")
def small_pair_dir(tmp_path_factory, small_instance) -> Path:
    """The small instance written to disk as clean.pgm / distorted.pgm."""
    out = tmp_path_factory.mktemp("small_pair")
    write_raster(small_instance.clean, out / "clean.pgm")
    write_raster(small_instance.distorted, out / "distorted.pgm")
    return out
