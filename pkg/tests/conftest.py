"""
공통 테스트 픽스처
"""
import os
import sys

import pytest
import torch

# 프로젝트 루트를 import 경로에 추가
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.bdlm_model import ModelConfig, init_params  # noqa: E402
from core.block_mask import BlockLayout  # noqa: E402
from core.decoder import DecodePolicy  # noqa: E402


def make_config(block_size: int = 4, **overrides) -> ModelConfig:
    values = dict(vocab_size=32, d_model=16, n_layers=2, n_heads=2, max_seq_len=96, block_size=block_size, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return make_config()


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


@pytest.fixture
def tiny_params64(tiny_params):
    return tiny_params.to(torch.float64)


@pytest.fixture
def tiny_layout() -> BlockLayout:
    return BlockLayout(block_size=4, prompt_blocks=2, output_blocks=3)


@pytest.fixture
def greedy_policy() -> DecodePolicy:
    return DecodePolicy(mode="dynamic", threshold=0.9, temperature=0.0, max_new_tokens=12)


@pytest.fixture
def sampling_policy() -> DecodePolicy:
    return DecodePolicy(mode="dynamic", threshold=0.5, temperature=1.0, max_new_tokens=12, seed=3)


def random_tokens(n: int, high: int = 14, seed: int = 0) -> torch.Tensor:
    return torch.randint(0, high, (n,), generator=torch.Generator().manual_seed(seed))
