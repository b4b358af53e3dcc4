import numpy as np
import pytest

from reperfq import phantom
from reperfq.core import Acquisition, Frame, Stage, View
from reperfq.phases import train


def make_acquisition(n=6, shape=(16, 16), value=0.5, view=View.AP, stage=Stage.PRE, times=True):
    frames = tuple(Frame(np.full(shape, value), float(i) if times else None) for i in range(n))
    return Acquisition(frames, view, stage, "p0")


@pytest.fixture
def acquisition():
    return make_acquisition()


@pytest.fixture(scope="session")
def trained_model():
    return train(phantom.corpus(40, seed=0), rng_seed=0)


@pytest.fixture(scope="session")
def atlases():
    return phantom.make_atlases(3)


@pytest.fixture(scope="session")
def vessel_frame():
    return phantom.vessel_image(128, seed=1)
