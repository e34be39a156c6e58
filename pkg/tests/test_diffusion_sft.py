"""
확산 SFT 목적함수 / 학습 루프 테스트
"""
import math

import pytest
import torch

from core.exceptions import NonFiniteError
from core.bdlm_model import ModelParams, init_params
from core.block_mask import BlockLayout
from core.diffusion_sft import (
    METRIC_COLUMNS, DiffusionSchedule, NoisyBatch, SFTConfig, forward_calls_sequential, make_noisy_batch,
    noise_block, sequential_sft_logits, sequential_sft_loss, sft_loss, sft_loss_logits, sft_train,
)
from core.tasks import gen_dataset, task_layout, training_pair
from core.tensor_ops import collect_gradients
from conftest import make_config

MASK = 17


def _batch(layout, n=3, seed=0):
    samples = gen_dataset(seed=seed, n=n, digits=1)
    pairs = [training_pair(s, layout) for s in samples]
    return make_noisy_batch(pairs, layout, torch.Generator().manual_seed(seed), MASK)


def test_schedule_weights():
    schedule = DiffusionSchedule(t_min=0.02)
    assert schedule.alpha(0.25) == 0.75
    assert schedule.mask_prob(0.25) == 0.25
    assert schedule.weight(0.5) == 2.0
    assert schedule.weight(0.001) == 50.0
    assert torch.allclose(schedule.weights(torch.tensor([0.5, 0.001])), torch.tensor([2.0, 50.0]))


def test_noise_block_extremes():
    g = torch.Generator().manual_seed(0)
    tokens = torch.arange(8)
    noisy, masked = noise_block(tokens, 1.0, g, MASK)
    assert bool(masked.all()) and bool((noisy == MASK).all())
    noisy, masked = noise_block(tokens, 0.0, g, MASK)
    assert not bool(masked.any()) and torch.equal(noisy, tokens)


def test_noise_block_always_masks_something_for_positive_t():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        _, masked = noise_block(torch.arange(4), 1e-6, g, MASK)
        assert int(masked.sum()) == 1


def test_noise_block_rejects_bad_level():
    with pytest.raises(ValueError):
        noise_block(torch.arange(4), 1.5, torch.Generator(), MASK)


def test_noisy_batch_keeps_prompt_clean():
    layout = task_layout(1, 4, 4)
    batch = _batch(layout, n=4)
    assert not bool(batch.masked[:, :layout.prompt_len].any())
    assert bool((batch.noisy[batch.masked] == MASK).all())
    assert torch.equal(batch.noisy[~batch.masked], batch.clean[~batch.masked])
    assert batch.t.shape == (4, layout.output_blocks)
    assert bool((batch.t > 0).all()) and bool((batch.t <= 1).all())


def test_sft_loss_matches_sequential_forwards(tiny_params64):
    layout = task_layout(1, 4, 4)
    batch = _batch(layout, n=3, seed=2)
    params = tiny_params64.clone(requires_grad=True)

    single = sft_loss(params, batch)
    sequential = sequential_sft_loss(params, batch)
    assert math.isclose(float(single), float(sequential), rel_tol=1e-9, abs_tol=1e-10)

    g_single = collect_gradients(single, params.tensors)
    g_sequential = collect_gradients(sequential, params.tensors)
    for name in params.names():
        assert torch.allclose(g_single[name], g_sequential[name], atol=1e-10), name
    assert forward_calls_sequential(batch) == 3 * layout.output_blocks


def test_sft_loss_with_tiles_matches_dense(tiny_params64):
    layout = task_layout(1, 4, 4)
    batch = _batch(layout, n=2, seed=4)
    dense = sft_loss(tiny_params64, batch)
    tiled = sft_loss(tiny_params64, batch, tile_size=4)
    assert math.isclose(float(dense), float(tiled), rel_tol=1e-10)


def test_sft_loss_zero_when_nothing_masked(tiny_params):
    layout = task_layout(1, 4, 4)
    batch = _batch(layout, n=2)
    batch.noisy = batch.clean.clone()
    batch.masked = torch.zeros_like(batch.masked)
    params = tiny_params.clone(requires_grad=True)
    loss = sft_loss(params, batch)
    assert float(loss) == 0.0
    grads = collect_gradients(loss, params.tensors)
    assert all(float(g.abs().sum()) == 0.0 for g in grads.values())


def test_sft_train_reduces_loss(tiny_params):
    layout = task_layout(1, 4, 4)
    samples = gen_dataset(seed=0, n=60, digits=1)
    initial = tiny_params["tok_emb"].clone()
    config = SFTConfig(steps=40, batch_size=8, lr=1e-2, warmup_steps=2, eval_every=20, eval_size=8)
    trained, metrics = sft_train(config, samples, tiny_params, layout, seed=0)

    assert list(metrics.columns) == METRIC_COLUMNS
    assert len(metrics) == 40
    assert metrics["loss"].iloc[-5:].mean() < metrics["loss"].iloc[:5].mean()
    assert metrics["eval_loss"].notna().sum() == 2
    assert trained.version == tiny_params.version + 1
    assert not trained["tok_emb"].requires_grad
    # 시작 파라미터는 그대로
    assert torch.equal(tiny_params["tok_emb"], initial)
    assert not torch.equal(trained["tok_emb"], initial)


def test_sft_train_writes_metrics(tmp_path, tiny_params):
    layout = task_layout(1, 4, 4)
    path = str(tmp_path / "sft_metrics.csv")
    sft_train(SFTConfig(steps=2, batch_size=2, eval_every=0, eval_size=2), gen_dataset(0, 10, 1),
              tiny_params, layout, metrics_path=path)
    with open(path, encoding="utf-8") as f:
        assert f.readline().strip() == ",".join(METRIC_COLUMNS)


def test_sft_train_empty_dataset(tiny_params):
    with pytest.raises(ValueError):
        sft_train(SFTConfig(steps=1), [], tiny_params, task_layout(1, 4, 4))


def test_sft_train_rejects_non_finite_loss(tiny_params):
    broken = tiny_params.clone()
    broken.tensors["head.bias"][0] = float("nan")
    with pytest.raises(NonFiniteError):
        sft_train(SFTConfig(steps=1, batch_size=2, eval_size=2), gen_dataset(0, 10, 1), broken,
                  task_layout(1, 4, 4))


def test_noise_block_mask_rate_at_half():
    g = torch.Generator().manual_seed(7)
    tokens = torch.arange(1000) % 14
    masked_total = 0
    for _ in range(100):
        noisy, masked = noise_block(tokens, 0.5, g, MASK)
        assert bool((noisy[masked] == MASK).all())
        masked_total += int(masked.sum())
    assert abs(masked_total / 100_000 - 0.5) <= 0.01


def _random_batch(layout, n, seed):
    g = torch.Generator().manual_seed(seed)
    pairs = []
    for _ in range(n):
        clean = torch.randint(0, 14, (layout.total_len,), generator=g).tolist()
        pairs.append((clean[:layout.prompt_len], clean[layout.prompt_len:]))
    return make_noisy_batch(pairs, layout, g, MASK)


@pytest.mark.parametrize("output_blocks", [1, 2, 3])
@pytest.mark.parametrize("block_size", [1, 2, 4])
def test_expanded_logits_match_sequential_forwards(block_size, output_blocks):
    params = init_params(make_config(block_size=block_size)).to(torch.float64)
    layout = BlockLayout(block_size=block_size, prompt_blocks=1, output_blocks=output_blocks)
    batch = _random_batch(layout, n=50, seed=100 * block_size + output_blocks)

    expanded = sft_loss_logits(params, batch)
    sequential = sequential_sft_logits(params, batch)
    assert expanded.shape == sequential.shape == (batch.masked_count, params.config.vocab_size)
    assert float((expanded - sequential).abs().max()) <= 1e-5


def _empty_batch(layout):
    return NoisyBatch(
        layout=layout,
        clean=torch.zeros((0, layout.total_len), dtype=torch.long),
        noisy=torch.zeros((0, layout.total_len), dtype=torch.long),
        masked=torch.zeros((0, layout.total_len), dtype=torch.bool),
        t=torch.zeros((0, layout.output_blocks), dtype=torch.float64),
    )


def test_sft_loss_on_empty_batch_is_zero(tiny_params):
    batch = _empty_batch(task_layout(1, 4, 4))
    params = tiny_params.clone(requires_grad=True)
    loss = sft_loss(params, batch)
    assert float(loss) == 0.0
    grads = collect_gradients(loss, params.tensors)
    assert all(float(g.abs().sum()) == 0.0 for g in grads.values())
    assert sft_loss_logits(params, batch).shape == (0, params.config.vocab_size)
    assert sequential_sft_logits(params, batch).shape == (0, params.config.vocab_size)


GRADCHECK_NAMES = ["tok_emb", "layers.0.attn.wq", "layers.1.mlp.w1", "layers.1.ln2.weight", "ln_f.bias",
                   "head.weight"]


def test_sft_loss_gradcheck():
    base = init_params(make_config(d_model=8, n_layers=2, n_heads=2)).to(torch.float64)
    batch = _batch(task_layout(1, 4, 4), n=2, seed=5)

    def loss_of(*inputs):
        tensors = dict(base.tensors)
        tensors.update(zip(GRADCHECK_NAMES, inputs))
        return sft_loss(ModelParams(config=base.config, tensors=tensors), batch)

    inputs = tuple(base[name].detach().clone().requires_grad_(True) for name in GRADCHECK_NAMES)
    assert torch.autograd.gradcheck(loss_of, inputs, eps=1e-6, atol=1e-6)
