# conftest.py
import pytest

from src.models.config import ModelConfig, ParallelismConfig
from src.services.config_io import hardware_preset, preset


@pytest.fixture
def large1() -> ModelConfig:
    return preset("bert_large_phase1")


@pytest.fixture
def large2() -> ModelConfig:
    return preset("bert_large_phase2")


@pytest.fixture
def base1() -> ModelConfig:
    return preset("bert_base_phase1")


@pytest.fixture
def mi100():
    return hardware_preset("mi100")


@pytest.fixture
def mi100_vector_fp16():
    return hardware_preset("mi100_vector_fp16")


@pytest.fixture
def tiny() -> ModelConfig:
    """Small enough for exhaustive checks, big enough to split two ways"""
    return ModelConfig(
        num_layers=2, hidden_dim=64, num_heads=4, intermediate_dim=256,
        seq_len=16, batch_size=8, vocab_size=100, max_positions=32,
    )


@pytest.fixture
def single() -> ParallelismConfig:
    return ParallelismConfig()


@pytest.fixture
def quiet(monkeypatch):
    # keep INFO lines out of captured CLI output
    monkeypatch.setenv("LOG_LEVEL", "ERROR")
