import hypothesis
import numpy as np
import pytest
import torch

from lapformer.decoder import DecoderConfig
from lapformer.encoder import EncoderConfig
from lapformer.model import ModelConfig

hypothesis.settings.register_profile("default", deadline=None, max_examples=25)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=5)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def tiny_config(embed_dim=16, **decoder_flags) -> ModelConfig:
    """A small MiT-shaped model for fast structural tests."""
    enc = EncoderConfig(stage_depths=(1, 1, 1, 1), stage_channels=(8, 16, 32, 64), heads=(1, 2, 2, 4),
                        sr_ratios=(8, 4, 2, 1), drop_path_rate=0.0)
    dec = DecoderConfig(in_channels=enc.stage_channels, embed_dim=embed_dim, fsm_reduction=4,
                        **decoder_flags)
    return ModelConfig(variant="custom", encoder=enc, decoder=dec, input_size=(64, 64))


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
