"""
모델 순전파 / KV 캐시 테스트
"""
import pytest
import torch

from core.exceptions import ConfigError, LayoutError
from core.bdlm_model import (
    KvCache, ModelConfig, forward, forward_cached, init_params, param_count, param_shapes, prefill,
)
from core.block_mask import block_causal_mask
from conftest import make_config, random_tokens


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=16, mask_token_id=17)


def test_param_count_matches_shapes(tiny_config):
    total = sum(int(torch.tensor(shape).prod()) for shape in param_shapes(tiny_config).values())
    assert param_count(tiny_config) == total


def test_init_params_deterministic(tiny_config):
    a = init_params(tiny_config)
    b = init_params(tiny_config)
    for name in a.names():
        assert torch.equal(a[name], b[name])
    assert a.version == 1
    assert torch.count_nonzero(a["head.bias"]) == 0


def test_forward_shapes(tiny_params):
    tokens = random_tokens(8)
    logits = forward(tiny_params, tokens, torch.arange(8), block_causal_mask(2, 4))
    assert logits.shape == (8, 32)
    batched = forward(tiny_params, torch.stack([tokens, tokens]), torch.arange(8), block_causal_mask(2, 4))
    assert batched.shape == (2, 8, 32)
    assert torch.allclose(batched[0], logits, atol=1e-6)


def test_forward_rejects_long_positions(tiny_params):
    with pytest.raises(LayoutError):
        forward(tiny_params, random_tokens(4), torch.tensor([0, 1, 2, 200]), block_causal_mask(1, 4))
    with pytest.raises(LayoutError):
        forward(tiny_params, random_tokens(4), torch.arange(3), block_causal_mask(1, 4))


def test_forward_does_not_mutate_params(tiny_params):
    before = {name: tiny_params[name].clone() for name in tiny_params.names()}
    forward(tiny_params, random_tokens(8), torch.arange(8), block_causal_mask(2, 4))
    for name, tensor in before.items():
        assert torch.equal(tiny_params[name], tensor)


def test_earlier_blocks_ignore_later_blocks(tiny_params):
    mask = block_causal_mask(3, 4)
    tokens = random_tokens(12, seed=1)
    changed = tokens.clone()
    changed[8:] = (changed[8:] + 1) % 14
    a = forward(tiny_params, tokens, torch.arange(12), mask)
    b = forward(tiny_params, changed, torch.arange(12), mask)
    assert torch.allclose(a[:8], b[:8], atol=1e-6)
    assert not torch.allclose(a[8:], b[8:])


def test_cached_forward_matches_full_forward(tiny_params64):
    b = tiny_params64.config.block_size
    tokens = random_tokens(4 * b, seed=2)
    full = forward(tiny_params64, tokens, torch.arange(4 * b), block_causal_mask(4, b))
    cache = prefill(tiny_params64, KvCache.empty(tiny_params64), tokens[:3 * b])
    assert cache.length == 3 * b
    logits, same = forward_cached(tiny_params64, cache, tokens[3 * b:], torch.arange(3 * b, 4 * b))
    assert same.length == 3 * b
    assert torch.allclose(logits, full[3 * b:], atol=1e-10)


def test_cached_forward_commit_extends_cache(tiny_params):
    b = tiny_params.config.block_size
    cache = KvCache.empty(tiny_params)
    _, cache = forward_cached(tiny_params, cache, random_tokens(b), torch.arange(b), commit=True)
    assert cache.length == b
    assert cache.keys[0].shape == (tiny_params.config.n_heads, b, tiny_params.config.head_dim)


def test_cached_forward_rejects_overlap_and_gaps(tiny_params):
    b = tiny_params.config.block_size
    cache = prefill(tiny_params, KvCache.empty(tiny_params), random_tokens(b))
    with pytest.raises(LayoutError):
        forward_cached(tiny_params, cache, random_tokens(b), torch.arange(0, b))
    with pytest.raises(LayoutError):
        forward_cached(tiny_params, cache, random_tokens(b), torch.arange(b + 1, 2 * b + 1))


def test_prefill_requires_block_multiple(tiny_params):
    with pytest.raises(LayoutError):
        prefill(tiny_params, KvCache.empty(tiny_params), random_tokens(5))


def test_params_clone_and_compatibility(tiny_params):
    clone = tiny_params.clone(requires_grad=True)
    assert clone["tok_emb"].requires_grad
    assert not tiny_params["tok_emb"].requires_grad
    assert tiny_params.check_compatible(clone.tensors) is None
    other = init_params(make_config(d_model=8))
    assert tiny_params.check_compatible(other.tensors) is not None
    assert tiny_params.replaced(clone.tensors).version == tiny_params.version + 1
