import numpy as np
import pytest

from tabunas.search_space import (
    BlockSpec,
    ConvKind,
    ConvOp,
    HeadKind,
    LayerSpec,
    NetworkSpec,
    SkipOp,
    SpaceConfig,
    TaskHead,
    block_template,
)


@pytest.fixture(scope="session")
def cfg_default():
    return SpaceConfig()


@pytest.fixture(scope="session")
def cfg_small():
    return SpaceConfig(
        scale_range=(1, 2),
        layers_range=(1, 2),
        channel_ladder=(8, 16, 24),
    )


def build_uniform_spec(op_kind=ConvKind.VANILLA, kernel=3, se=0.0,
                       skip=SkipOp.NONE, channels=8, layers=1, scales=1,
                       head=None, in_channels=3, expansion=6):
    """A spec whose blocks all share one layer; handy for targeted cases."""
    head = head or TaskHead(HeadKind.REGRESS)
    op = ConvOp(op_kind, expansion) if op_kind is ConvKind.IBCONV else ConvOp(op_kind)
    layer = LayerSpec(op, kernel, se, skip, channels)
    blocks = {}
    for s in range(1, scales + 1):
        for j, kind in enumerate(block_template(s), start=1):
            blocks[(s, j)] = BlockSpec(layer, layers, kind)
    return NetworkSpec(scales, blocks, head, in_channels)


@pytest.fixture
def uniform_spec():
    return build_uniform_spec


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
