"""
블록 디코딩 / 트레이스 재생 테스트
"""
import math

import pytest
import torch

from core.exceptions import ConfigError, LayoutError
from core.decoder import (
    DecodePolicy, StepRecord, Trajectory, _decode_steps, generate, generate_uncached, replay_logprobs,
    select_positions, trajectory_from_json, trajectory_to_json,
)
from core.tasks import Vocab
from conftest import random_tokens

PROMPT = [Vocab.BOS] + Vocab.encode("12+7=")


def _biased(params, token, value=50.0):
    biased = params.clone()
    biased.tensors["head.bias"][token] = value
    return biased


def _assert_partition(traj: Trajectory):
    b = traj.block_size
    start = len(traj.prompt)
    blocks = {}
    for record in traj.steps:
        assert record.positions, "빈 스텝"
        blocks.setdefault(record.block, []).extend(record.positions)
    for block, positions in blocks.items():
        assert sorted(positions) == list(range(block * b, (block + 1) * b))
    assert sum(len(p) for p in blocks.values()) == len(traj.output)
    assert min(blocks) * b == start


def test_policy_validation():
    with pytest.raises(ConfigError):
        DecodePolicy(mode="beam")
    with pytest.raises(ConfigError):
        DecodePolicy(threshold=0.0)
    with pytest.raises(ConfigError):
        DecodePolicy(temperature=-1.0)
    assert DecodePolicy().replace(threshold=0.5).threshold == 0.5


def test_select_positions():
    top1 = torch.tensor([0.95, 0.2, 0.99, 0.5])
    masked = torch.tensor([True, True, False, True])
    dynamic = select_positions(top1, masked, DecodePolicy(mode="dynamic", threshold=0.9))
    assert dynamic.tolist() == [True, False, False, False]
    static = select_positions(top1, masked, DecodePolicy(mode="static"))
    assert static.tolist() == [True, False, False, False]
    # 임계값을 넘는 위치가 없으면 가장 확신하는 위치 하나
    fallback = select_positions(top1, masked, DecodePolicy(mode="dynamic", threshold=0.99))
    assert fallback.tolist() == [True, False, False, False]


def test_static_decoding_one_token_per_step(tiny_params, greedy_policy):
    traj = generate(tiny_params, PROMPT, greedy_policy.replace(mode="static"))
    assert all(len(r.positions) == 1 for r in traj.steps)
    assert traj.num_steps == len(traj.output)
    _assert_partition(traj)


def test_dynamic_decoding_partitions_blocks(tiny_params, sampling_policy):
    traj = generate(tiny_params, PROMPT, sampling_policy)
    assert len(traj.prompt) % traj.block_size == 0
    assert len(traj.output) % traj.block_size == 0
    assert traj.finish in ("eos", "length")
    _assert_partition(traj)


def test_threshold_one_equals_static(tiny_params, greedy_policy):
    dynamic = generate(tiny_params, PROMPT, greedy_policy.replace(threshold=1.0))
    static = generate(tiny_params, PROMPT, greedy_policy.replace(mode="static"))
    assert dynamic.output == static.output
    assert dynamic.num_steps == static.num_steps


@pytest.mark.parametrize("temperature", [0.0, 1.0])
def test_cached_generation_matches_uncached(tiny_params64, temperature):
    policy = DecodePolicy(threshold=0.3, temperature=temperature, max_new_tokens=12, seed=5)
    cached = generate(tiny_params64, PROMPT, policy)
    uncached = generate_uncached(tiny_params64, PROMPT, policy)
    assert cached.output == uncached.output
    assert [r.positions for r in cached.steps] == [r.positions for r in uncached.steps]
    assert torch.allclose(cached.behavior_logprobs(), uncached.behavior_logprobs(), atol=1e-9)


def test_generation_deterministic_with_seed(tiny_params, sampling_policy):
    a = generate(tiny_params, PROMPT, sampling_policy)
    b = generate(tiny_params, PROMPT, sampling_policy)
    assert a.output == b.output
    assert a.behavior_logprobs().tolist() == b.behavior_logprobs().tolist()


def test_stops_after_block_with_eos(tiny_params, greedy_policy):
    traj = generate(_biased(tiny_params, Vocab.EOS), PROMPT, greedy_policy)
    assert traj.finish == "eos"
    assert len(traj.output) == traj.block_size
    assert traj.first_eos() == len(traj.prompt)
    assert traj.generated_tokens() == [Vocab.EOS]


def test_runs_to_length_without_eos(tiny_params, greedy_policy):
    traj = generate(_biased(tiny_params, 3), PROMPT, greedy_policy)
    assert traj.finish == "length"
    assert len(traj.output) == greedy_policy.max_new_tokens
    assert traj.first_eos() is None
    assert bool(traj.loss_token_mask().all())


def test_prompt_too_long(tiny_params, greedy_policy):
    with pytest.raises(LayoutError):
        generate(tiny_params, [1] * 200, greedy_policy)
    with pytest.raises(LayoutError):
        generate(tiny_params, [1] * 90, greedy_policy)


def test_prompt_blocks_fixes_prompt_region(tiny_params, greedy_policy):
    traj = generate(tiny_params, PROMPT, greedy_policy, prompt_blocks=3)
    assert len(traj.prompt) == 12
    assert traj.prompt[:6] == [Vocab.PAD] * 6


@pytest.mark.parametrize("temperature", [0.0, 1.0, 0.7])
def test_replay_matches_behavior_logprobs(tiny_params64, temperature):
    policy = DecodePolicy(threshold=0.2, temperature=temperature, max_new_tokens=12, seed=1)
    traj = generate(tiny_params64, PROMPT, policy)
    replayed = replay_logprobs(tiny_params64, traj)
    assert replayed.shape == (len(traj.output),)
    assert torch.allclose(replayed, traj.behavior_logprobs(), atol=1e-9)


def test_replay_float32_close_to_behavior(tiny_params, sampling_policy):
    traj = generate(tiny_params, PROMPT, sampling_policy)
    replayed = replay_logprobs(tiny_params, traj)
    assert torch.allclose(replayed.double(), traj.behavior_logprobs(), atol=1e-4)


def test_replay_is_differentiable(tiny_params, sampling_policy):
    traj = generate(tiny_params, PROMPT, sampling_policy)
    params = tiny_params.clone(requires_grad=True)
    replay_logprobs(params, traj).sum().backward()
    assert params["head.weight"].grad is not None
    assert float(params["head.weight"].grad.abs().sum()) > 0


def test_tokens_per_step_monotone_in_threshold():
    logits = torch.randn(16, 32, generator=torch.Generator().manual_seed(0)) * 3
    counts = []
    for tau in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        _, records = _decode_steps(lambda state: logits, 0, 16, 17, DecodePolicy(threshold=tau, temperature=0.0),
                                   torch.Generator())
        counts.append(len(records))
    assert counts == sorted(counts)
    assert counts[-1] == 16


def test_loss_token_mask_stops_at_first_eos():
    steps = [
        StepRecord(block=1, step=0, positions=[3, 2], tokens=[Vocab.EOS, 5], logprobs=[-0.1, -0.2]),
    ]
    traj = Trajectory(prompt=[14, 1], output=[5, Vocab.EOS], steps=steps, finish="eos", block_size=2)
    assert traj.first_eos() == 3
    assert traj.loss_token_mask().tolist() == [True, True]
    traj.output = [Vocab.EOS, 5]
    assert traj.loss_token_mask().tolist() == [False, True]


def test_trajectory_json_round_trip(tiny_params, sampling_policy):
    traj = generate(tiny_params, random_tokens(5).tolist(), sampling_policy)
    restored = trajectory_from_json(trajectory_to_json(traj))
    assert restored == traj
    assert trajectory_to_json(traj)["stats"]["steps"] == traj.num_steps


def test_replay_matches_behavior_over_mixed_policies(tiny_params):
    g = torch.Generator().manual_seed(11)
    static = DecodePolicy(mode="static", temperature=1.0, max_new_tokens=12)
    dynamic = DecodePolicy(mode="dynamic", threshold=0.5, temperature=0.7, max_new_tokens=12)
    modes = set()
    for i in range(200):
        a, b = torch.randint(0, 100, (2,), generator=g).tolist()
        prompt = [Vocab.BOS] + Vocab.encode(f"{a}+{b}=")
        policy = (static if i % 2 == 0 else dynamic).replace(seed=i)
        traj = generate(tiny_params, prompt, policy)
        replayed = replay_logprobs(tiny_params, traj)
        assert torch.allclose(replayed.double(), traj.behavior_logprobs(), atol=1e-4), (i, policy.mode)
        modes.add(policy.mode)
    assert modes == {"static", "dynamic"}


@pytest.mark.parametrize("confidence", [0.8, 0.95])
def test_generate_tokens_per_step_grows_as_threshold_drops(tiny_params, confidence):
    # 한 토큰의 top-1 확률이 모든 위치에서 약 confidence 가 되도록 바이어스
    value = math.log(confidence / (1 - confidence) * (tiny_params.config.vocab_size - 1))
    params = _biased(tiny_params, 5, value)
    prompts = [[Vocab.BOS] + Vocab.encode(text) for text in ("1+2=", "33+4=", "9+9=", "12+7=")]
    rates = []
    for tau in (0.99, 0.9, 0.7, 0.5):
        policy = DecodePolicy(threshold=tau, temperature=0.0, max_new_tokens=12)
        trajectories = [generate(params, prompt, policy) for prompt in prompts]
        rates.append(sum(t.tokens_per_step for t in trajectories) / len(trajectories))
    assert rates == sorted(rates)
    assert rates[0] == 1.0
    assert rates[-1] == 4.0
