import pytest

from stgaze.model import EncoderConfig, ModelConfig


def micro_config(seed: int = 0, **overrides) -> ModelConfig:
    """Full 128 px inputs and 8×8 grid, but only a few channels everywhere."""
    base = dict(eye=EncoderConfig((4, 4, 4, 8)), face=EncoderConfig((2, 2, 2, 4)), sam_blocks=1, sam_heads=2,
                ffn_hidden=16, gru_hidden=8, head_hidden=8, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def micro():
    return micro_config
