"""
텐서 연산 테스트
"""
import math

import pytest
import torch

from core.exceptions import DimensionError, MaskContractError, NonFiniteError
from core.block_mask import block_causal_mask
from core.tensor_ops import (
    collect_gradients, cosine_lr, create_optim_state, grad_global_norm, masked_attention, matmul,
    optimizer_step, softmax_cross_entropy, stop_gradient,
)


def _qkv(lq=6, lk=6, d=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(2, lq, d, generator=g, dtype=dtype),
            torch.randn(2, lk, d, generator=g, dtype=dtype),
            torch.randn(2, lk, d, generator=g, dtype=dtype))


def test_matmul_dimension_mismatch():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(4, 5))


def test_masked_attention_rejects_empty_row():
    q, k, v = _qkv()
    bits = torch.ones(6, 6, dtype=torch.bool)
    bits[2] = False
    with pytest.raises(MaskContractError):
        masked_attention(q, k, v, bits)


def test_masked_attention_rejects_wrong_mask_shape():
    q, k, v = _qkv()
    with pytest.raises(DimensionError):
        masked_attention(q, k, v, torch.ones(5, 6, dtype=torch.bool))


def test_masked_attention_ignores_hidden_keys():
    q, k, v = _qkv()
    bits = torch.zeros(6, 6, dtype=torch.bool)
    bits[:, 0] = True
    out = masked_attention(q, k, v, bits)
    assert torch.allclose(out, v[:, :1].expand_as(out))


@pytest.mark.parametrize("tile", [1, 2, 4])
def test_tiled_attention_matches_dense(tile):
    q, k, v = _qkv(lq=8, lk=8)
    mask = block_causal_mask(4, 2)
    dense = masked_attention(q, k, v, mask)
    tiled = masked_attention(q, k, v, mask, tile_size=tile)
    assert torch.allclose(dense, tiled, atol=1e-12)


def test_masked_attention_gradcheck():
    q, k, v = (t.requires_grad_() for t in _qkv(lq=4, lk=4))
    bits = block_causal_mask(2, 2).bits
    assert torch.autograd.gradcheck(lambda a, b, c: masked_attention(a, b, c, bits), (q, k, v))


def test_cross_entropy_uniform_logits():
    logits = torch.zeros(5, 32)
    loss = softmax_cross_entropy(logits, torch.arange(5))
    assert math.isclose(float(loss), math.log(32), rel_tol=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(torch.zeros(2, 4), torch.tensor([0, 4]))


def test_cross_entropy_empty_is_zero_with_zero_grad():
    logits = torch.randn(3, 4, requires_grad=True)
    loss = softmax_cross_entropy(logits[:0], torch.zeros(0, dtype=torch.long))
    grads = collect_gradients(loss, {"logits": logits})
    assert float(loss) == 0.0
    assert torch.count_nonzero(grads["logits"]) == 0


def test_cross_entropy_stable_for_large_logits():
    logits = torch.tensor([[1000.0, 0.0, -1000.0]])
    loss = softmax_cross_entropy(logits, torch.tensor([0]))
    assert torch.isfinite(loss)
    assert float(loss) < 1e-6


def test_cross_entropy_gradcheck():
    logits = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([0, 5, 2, 2])
    weight = torch.tensor([1.0, 0.5, 2.0, 0.0], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: softmax_cross_entropy(x, targets, weight), (logits,))


def test_stop_gradient_blocks_backprop():
    x = torch.tensor([2.0], requires_grad=True)
    y = x * stop_gradient(x)
    y.backward()
    assert float(x.grad) == 2.0


def test_collect_gradients_fills_unused_with_zeros():
    a = torch.ones(3, requires_grad=True)
    b = torch.ones(2, 2, requires_grad=True)
    grads = collect_gradients((a * 2).sum(), {"a": a, "b": b})
    assert torch.equal(grads["a"], torch.full((3,), 2.0))
    assert torch.equal(grads["b"], torch.zeros(2, 2))


def test_grad_global_norm():
    assert math.isclose(grad_global_norm({"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}), 5.0)


def test_cosine_lr_schedule():
    assert math.isclose(cosine_lr(0, 100, 1.0), 1.0)
    assert cosine_lr(99, 100, 1.0) < 1e-9
    assert math.isclose(cosine_lr(0, 100, 1.0, warmup_steps=10), 0.1)
    assert cosine_lr(50, 100, 1.0) < cosine_lr(20, 100, 1.0)


def test_optimizer_step_descends_quadratic():
    params = {"w": torch.tensor([3.0, -2.0], requires_grad=True)}
    state = create_optim_state(params, lr=0.1)
    for _ in range(100):
        loss = (params["w"] ** 2).sum()
        optimizer_step(params, collect_gradients(loss, params), state)
    assert float((params["w"] ** 2).sum()) < 0.5
    assert state.step == 100


def test_optimizer_step_rejects_non_finite_and_keeps_state():
    params = {"w": torch.tensor([1.0, 2.0], requires_grad=True)}
    state = create_optim_state(params, lr=0.1)
    before = params["w"].detach().clone()
    with pytest.raises(NonFiniteError):
        optimizer_step(params, {"w": torch.tensor([float("nan"), 0.0])}, state)
    assert torch.equal(params["w"].detach(), before)
    assert state.step == 0


def test_optimizer_step_shape_mismatch():
    params = {"w": torch.zeros(2, requires_grad=True)}
    state = create_optim_state(params, lr=0.1)
    with pytest.raises(DimensionError):
        optimizer_step(params, {"w": torch.zeros(3)}, state)


def test_optimizer_moments_track_params():
    params = {"w": torch.zeros(2, requires_grad=True)}
    state = create_optim_state(params, lr=0.1)
    optimizer_step(params, {"w": torch.tensor([1.0, -1.0])}, state)
    m, v = state.moments(params["w"])
    assert m.shape == params["w"].shape and v.shape == params["w"].shape
    assert float(m.abs().sum()) > 0
