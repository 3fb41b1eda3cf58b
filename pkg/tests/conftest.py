import numpy as np
import pytest

from mmlego.datagen import ModalitySpec, SyntheticSpec, generate
from mmlego.encoders import EncoderConfig
from mmlego.legoblock import BlockConfig, LegoBlock
from mmlego.training import TaskSpec


def tiny_config(**kw):
    base = dict(latent_shape=(4, 6), depth=2, attn_dim=5, head_dim=5, attn_dropout=0.0,
                fcnn_dropout=0.0)
    base.update(kw)
    return BlockConfig(**base)


def tiny_block(modality="tab", kind="snn", input_dim=3, task=None, seed=0, init_seed=0,
               config=None, **enc_kw):
    enc = EncoderConfig(kind, input_dim, enc_kw.pop("hidden_dims", (5,)), dropout=0.0,
                        gate_dim=enc_kw.pop("gate_dim", 4), attn_dropout=0.0, **enc_kw)
    return LegoBlock(modality, enc, config or tiny_config(), task or TaskSpec(), seed=seed,
                     init_seed=init_seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(n_samples=120, modalities=(ModalitySpec("tab", "tabular", 3, 2.0),
                                                    ModalitySpec("bag", "bag", 2, 2.0, (1, 4))),
                         factor_dim=3, seed=5)
    return generate(spec)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
