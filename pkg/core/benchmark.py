"""
벤치마크 모듈 - 단일 패스 확장 순전파 vs 블록별 순차 순전파, 저장/재로드 루프 vs 상주 서비스 루프
"""
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from core.exceptions import BdlmError
from core.block_mask import BlockLayout, inference_mask, output_repeat_expansion, sft_repeat_expansion
from core.bdlm_model import ModelConfig, ModelParams, forward, init_params
from core.checkpoint import load_checkpoint, save_checkpoint
from core.diffusion_sft import noise_block
from core.dipo_trainer import (
    DiPOConfig, _generate_with_retry, _rollout_prompts, build_groups, dipo_gradients, rl_train_step,
)
from core.rollout_server import RolloutServer, ServiceConfig
from core.tasks import TaskSample
from core.tensor_ops import create_optim_state, optimizer_step
from rollout_services import LocalRolloutService
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("benchmark")

MASK_MODES = {"output_repeat": output_repeat_expansion, "full_repeat": sft_repeat_expansion}
MASK_COLUMNS = ["mode", "method", "B", "K", "forward_calls", "wall_ms", "max_abs_diff"]
LOOP_CATEGORIES = ["Load", "Rollout", "Train", "Update"]
LOOP_COLUMNS = ["loop", "run"] + LOOP_CATEGORIES + ["total_ms", "loads", "saves"]
MIN_UPDATE_SPEEDUP = 10.0


@dataclass
class BenchConfig:
    """
    벤치마크 설정
    """
    block_sizes: List[int] = field(default_factory=lambda: [1, 2, 4])
    output_blocks: List[int] = field(default_factory=lambda: [1, 2, 3])
    trials: int = 50
    tolerance: float = 1e-5
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    loop_runs: int = 3
    loop_prompts: int = 2
    loop_group_size: int = 2
    update_repeats: int = 5


def _bench_model(config: BenchConfig, block_size: int, vocab_size: int, seed: int) -> ModelParams:
    cfg = ModelConfig(vocab_size=vocab_size, d_model=config.d_model, n_layers=config.n_layers,
                      n_heads=config.n_heads, max_seq_len=128, block_size=block_size, seed=seed)
    return init_params(cfg).to(torch.float64)


def _sequential_logits(params: ModelParams, layout: BlockLayout, clean: torch.Tensor,
                       noisy: torch.Tensor, mask_id: int) -> Tuple[torch.Tensor, int]:
    b = layout.block_size
    rows = []
    for local in range(layout.output_blocks):
        k = layout.prompt_blocks + local
        start = k * b
        tokens = torch.cat([clean[:start], noisy[start:start + b]])
        logits = forward(params, tokens, torch.arange(start + b), inference_mask(layout, k))
        rows.append(logits[start:start + b][noisy[start:start + b] == mask_id])
    return torch.cat(rows), layout.output_blocks


def bench_mask(config: BenchConfig, seed: int = 0) -> pd.DataFrame:
    """
    확장 단일 순전파와 블록별 순차 순전파의 손실 위치 로짓 비교 및 시간 측정

    Returns:
        pd.DataFrame: mode, method, B, K, forward_calls, wall_ms, max_abs_diff

    Raises:
        BdlmError: 두 방법의 로짓 차이가 허용 오차를 넘는 경우
    """
    rows = []
    generator = torch.Generator().manual_seed(seed)
    for b in config.block_sizes:
        params = _bench_model(config, b, 32, seed)
        mask_id = params.config.mask_token_id
        for k in config.output_blocks:
            layout = BlockLayout(block_size=b, prompt_blocks=1, output_blocks=k)
            for mode, expand in MASK_MODES.items():
                timings = {"expanded": 0.0, "sequential": 0.0}
                calls = {"expanded": 0, "sequential": 0}
                max_diff = 0.0
                for _ in range(config.trials):
                    clean = torch.randint(0, mask_id, (layout.total_len,), generator=generator)
                    noisy = clean.clone()
                    for local in range(k):
                        start = (layout.prompt_blocks + local) * b
                        t = float(1.0 - torch.rand((), generator=generator))
                        noisy[start:start + b], _ = noise_block(clean[start:start + b], t, generator, mask_id)

                    with torch.no_grad():
                        started = time.perf_counter()
                        expanded = expand(layout, clean, noisy, mask_id)
                        fused = forward(params, expanded.tokens, expanded.positions, expanded.mask)[expanded.loss_index]
                        timings["expanded"] += time.perf_counter() - started
                        calls["expanded"] += 1

                        started = time.perf_counter()
                        sequential, n_calls = _sequential_logits(params, layout, clean, noisy, mask_id)
                        timings["sequential"] += time.perf_counter() - started
                        calls["sequential"] += n_calls

                    if fused.shape != sequential.shape:
                        raise BdlmError(f"손실 위치 수가 다릅니다 ({mode}, B={b}, K={k})")
                    max_diff = max(max_diff, float((fused - sequential).abs().max()) if fused.numel() else 0.0)

                if max_diff > config.tolerance:
                    error_msg = f"확장 로짓이 순차 로짓과 다릅니다 ({mode}, B={b}, K={k}, 최대 차이 {max_diff:.2e})"
                    logger.error(error_msg)
                    raise BdlmError(error_msg)
                for method in ("expanded", "sequential"):
                    rows.append({
                        "mode": mode,
                        "method": method,
                        "B": b,
                        "K": k,
                        "forward_calls": calls[method] / config.trials,
                        "wall_ms": timings[method] * 1000.0 / config.trials,
                        "max_abs_diff": max_diff,
                    })
                logger.info(f"마스크 벤치마크 {mode} B={b} K={k}: 최대 차이 {max_diff:.2e}")
    return pd.DataFrame(rows, columns=MASK_COLUMNS)


def _train_on_rollouts(params: ModelParams, state, refs, config: DiPOConfig,
                       samples: Sequence[TaskSample], result) -> None:
    groups = build_groups(samples, result.trajectories, config.group_size)
    _, grads, _ = dipo_gradients(params, groups, refs, config)
    optimizer_step(params.tensors, grads, state, lr=config.lr)


def _baseline_step(workdir: str, params: ModelParams, state, refs, config: DiPOConfig,
                   samples: Sequence[TaskSample], layout: BlockLayout,
                   step: int) -> Tuple[Dict[str, float], Dict[str, int]]:
    # 매 스텝: 서비스용 로드 → 롤아웃 → 학습용 로드 → 학습 → 저장
    path = os.path.join(workdir, "baseline.ckpt")
    timings = dict.fromkeys(LOOP_CATEGORIES, 0.0)
    counts = {"loads": 0, "saves": 0}

    started = time.perf_counter()
    server = RolloutServer.from_checkpoint(path, ServiceConfig(), config.rollout_policy)
    timings["Load"] += time.perf_counter() - started
    counts["loads"] += server.version()["loads"]

    started = time.perf_counter()
    policy = config.rollout_policy.replace(seed=step * 10_007)
    result = _generate_with_retry(LocalRolloutService(server), _rollout_prompts(samples, layout, config.group_size),
                                  policy, layout.prompt_blocks)
    timings["Rollout"] += time.perf_counter() - started
    server.close()

    started = time.perf_counter()
    loaded = load_checkpoint(path)
    with torch.no_grad():
        for name, tensor in params.tensors.items():
            tensor.copy_(loaded.tensors[name])
    timings["Load"] += time.perf_counter() - started
    counts["loads"] += 1

    started = time.perf_counter()
    _train_on_rollouts(params, state, refs, config, samples, result)
    timings["Train"] += time.perf_counter() - started

    started = time.perf_counter()
    save_checkpoint(params, path)
    timings["Update"] += time.perf_counter() - started
    counts["saves"] += 1
    return timings, counts


def measure_update_speedup(params: ModelParams, workdir: str, repeats: int = 5) -> Dict[str, float]:
    """
    제자리 업데이트 vs 저장+로드 지연 시간 (중앙값, 밀리초)

    저장+로드는 baseline 루프 한 스텝과 같이 저장 1회, 서비스 재로드 1회, 학습용 재로드 1회다.
    """
    server = RolloutServer(params, ServiceConfig())
    path = os.path.join(workdir, "speedup.ckpt")
    inplace, roundtrip = [], []
    for _ in range(repeats):
        started = time.perf_counter()
        server.update_weights(params)
        inplace.append(time.perf_counter() - started)

        started = time.perf_counter()
        save_checkpoint(params, path)
        RolloutServer.from_checkpoint(path, ServiceConfig()).close()
        load_checkpoint(path)
        roundtrip.append(time.perf_counter() - started)
    server.close()
    inplace_ms = float(np.median(inplace)) * 1000.0
    roundtrip_ms = float(np.median(roundtrip)) * 1000.0
    return {
        "inplace_update_ms": inplace_ms,
        "save_load_ms": roundtrip_ms,
        "speedup": roundtrip_ms / inplace_ms if inplace_ms > 0 else float("inf"),
    }


def bench_loop(params: ModelParams,
               samples: Sequence[TaskSample],
               layout: BlockLayout,
               dipo_config: DiPOConfig,
               config: BenchConfig,
               workdir: str,
               seed: int = 0) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """
    RL 한 스텝을 두 방식으로 실행해 Load/Rollout/Train/Update 소요 시간 비교

    baseline: 스텝마다 체크포인트 로드 2회 + 저장 1회
    persistent: 서비스는 시작 시 한 번만 로드되고 스텝마다 제자리 업데이트

    Returns:
        Tuple[pd.DataFrame, Dict[str, float]]: 실행별 분류 표와 업데이트 지연 비교
    """
    os.makedirs(workdir, exist_ok=True)
    config_rl = DiPOConfig(**{**dipo_config.to_dict(), "group_size": config.loop_group_size})
    generator = torch.Generator().manual_seed(seed)
    rows = []
    for run in range(config.loop_runs):
        idx = torch.randint(len(samples), (config.loop_prompts,), generator=generator).tolist()
        batch = [samples[i] for i in idx]

        # baseline
        baseline_params = params.clone(requires_grad=True)
        state = create_optim_state(baseline_params.tensors, lr=config_rl.lr, betas=config_rl.betas,
                                   max_grad_norm=config_rl.max_grad_norm)
        save_checkpoint(baseline_params, os.path.join(workdir, "baseline.ckpt"))
        timings, counts = _baseline_step(workdir, baseline_params, state, None, config_rl, batch, layout, run)
        rows.append({"loop": "baseline", "run": run, **{k: v * 1000.0 for k, v in timings.items()},
                     "total_ms": sum(timings.values()) * 1000.0, **counts})

        # persistent service
        persistent_params = params.clone(requires_grad=True)
        state = create_optim_state(persistent_params.tensors, lr=config_rl.lr, betas=config_rl.betas,
                                   max_grad_norm=config_rl.max_grad_norm)
        service = LocalRolloutService(RolloutServer(params, ServiceConfig(), config_rl.rollout_policy))
        loads_before = service.version()["loads"]
        _, report = rl_train_step(service, persistent_params, state, None, config_rl, batch, layout,
                                  step=run, seed=0)
        step_loads = service.version()["loads"] - loads_before
        service.close()
        persistent = {"Load": 0.0, "Rollout": report.rollout_ms, "Train": report.train_ms,
                      "Update": report.update_ms}
        rows.append({"loop": "persistent", "run": run, **persistent, "total_ms": sum(persistent.values()),
                     "loads": step_loads, "saves": 0})
        logger.info(f"루프 벤치마크 실행 {run}: baseline {rows[-2]['total_ms']:.1f}ms, "
                    f"persistent {rows[-1]['total_ms']:.1f}ms")
        if rows[-1]["total_ms"] >= rows[-2]["total_ms"]:
            logger.warning(f"루프 벤치마크 실행 {run}: 상주 서비스 루프가 baseline 보다 빠르지 않습니다 "
                           f"({rows[-1]['total_ms']:.1f}ms >= {rows[-2]['total_ms']:.1f}ms)")

    speedup = measure_update_speedup(params, workdir, config.update_repeats)
    logger.info(f"제자리 업데이트 {speedup['inplace_update_ms']:.2f}ms vs 저장+로드 {speedup['save_load_ms']:.2f}ms "
                f"({speedup['speedup']:.1f}배)")
    if speedup["speedup"] < MIN_UPDATE_SPEEDUP:
        logger.warning(f"제자리 업데이트 속도 향상이 {MIN_UPDATE_SPEEDUP:.0f}배 미만입니다: {speedup['speedup']:.1f}배")
    return pd.DataFrame(rows, columns=LOOP_COLUMNS), speedup
