import numpy as np
import pytest

from dbreg.dualreg import RegConfig
from dbreg.geometry import CorruptionParams, generate_dataset
from dbreg.multires import MultiResConfig
from dbreg.overlap import OverlapConfig
from dbreg.training import PipelineConfig


@pytest.fixture(scope="session")
def tiny_net():
    ext = MultiResConfig(branches=2, stages=2, k=2, widths=(4, 6), out_dim=6, interp_k=2)
    return PipelineConfig(
        overlap=OverlapConfig(extractor=ext, blocks=1, heads=2, tau=0.5, floor=4),
        reg=RegConfig(extractor=ext, heads=2, common_blocks=1, branch_blocks=1,
                      sinkhorn_iters=60),
    )


@pytest.fixture(scope="session")
def tiny_params():
    return CorruptionParams(n_points=24, kind="composite")


@pytest.fixture(scope="session")
def tiny_dataset(tiny_params):
    return generate_dataset(7, 6, tiny_params)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
