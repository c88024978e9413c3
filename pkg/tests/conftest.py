from __future__ import annotations

import numpy as np
import pytest

from mergelab.transformer import EncoderConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(T: int = 2, N: int = 2, k: int = 8, heads: int = 2, S: int = 5, vocab: int = 16) -> EncoderConfig:
    return EncoderConfig(num_blocks=N, dim=k, heads=heads, mlp_ratio=2.0, seq_len=S,
                         num_classes=(4,) * T, vocab_size=vocab)


def small_model(cfg: EncoderConfig, seed: int = 0):
    return init_params(cfg, np.random.default_rng(seed))


def perturbed(params, seed: int, scale: float = 0.05):
    rng = np.random.default_rng(seed)
    return type(params)({k: v + scale * rng.normal(size=v.shape) for k, v in params.items()})


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full default desk pipeline, shared by every measured test."""
    from mergelab.harness import Experiment, default_config

    out = tmp_path_factory.mktemp("desk")
    config = default_config(**{"experiment.out": str(out), "experiment.id": "desk"})
    exp = Experiment(config)
    exp.run()
    return exp


def pytest_collection_modifyitems(items):
    for item in items:
        if "desk_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.desk)
