"""
확산 SFT 모듈 - 순방향 마스킹 과정과 블록 단위 NELBO 학습 목적함수

블록마다 t ~ U(0,1] 를 뽑아 각 토큰을 확률 1−α(t) 로 [MASK] 로 바꾸고,
반복 확장 시퀀스 한 번의 순전파로 마스킹된 위치의 가중 교차 엔트로피를 계산한다.
"""
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import pandas as pd
import torch
from tqdm import tqdm

from core.exceptions import NonFiniteError
from core.block_mask import BlockLayout, sft_repeat_expansion, inference_mask
from core.bdlm_model import ModelParams, forward
from core.tensor_ops import (
    softmax_cross_entropy, collect_gradients, create_optim_state, optimizer_step, cosine_lr,
)
from core.tasks import TaskSample, training_pair
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("diffusion_sft")

METRIC_COLUMNS = ["step", "loss", "lr", "masked_frac", "wall_ms", "eval_loss"]


@dataclass
class DiffusionSchedule:
    """
    선형 유지 확률 α(t) = 1 − t 와 손실 가중치 w(t) = 1/t (t < t_min 에서 w(t_min) 로 고정)
    """
    t_min: float = 0.02

    def alpha(self, t: float) -> float:
        return 1.0 - t

    def mask_prob(self, t: float) -> float:
        return 1.0 - self.alpha(t)

    def weight(self, t: float) -> float:
        return 1.0 / max(t, self.t_min)

    def weights(self, t: torch.Tensor) -> torch.Tensor:
        return 1.0 / t.clamp(min=self.t_min)


@dataclass
class SFTConfig:
    """
    SFT 단계 설정
    """
    steps: int = 400
    batch_size: int = 32
    lr: float = 3e-3
    warmup_steps: int = 10
    min_lr: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    max_grad_norm: Optional[float] = 1.0
    t_min: float = 0.02
    eval_every: int = 50
    eval_size: int = 64
    log_every: int = 20

    def __post_init__(self):
        self.betas = tuple(self.betas)


@dataclass
class NoisyBatch:
    """
    마스킹된 학습 배치

    Attributes:
        layout (BlockLayout): 공통 레이아웃
        clean (torch.Tensor): [N, L] 깨끗한 프롬프트+출력
        noisy (torch.Tensor): [N, L] 출력 블록 일부가 MASK 로 바뀐 시퀀스
        masked (torch.Tensor): [N, L] 마스킹 지시자
        t (torch.Tensor): [N, output_blocks] 블록별 마스킹 수준
    """
    layout: BlockLayout
    clean: torch.Tensor
    noisy: torch.Tensor
    masked: torch.Tensor
    t: torch.Tensor
    mask_token_id: int = field(default=17)

    @property
    def size(self) -> int:
        return int(self.clean.shape[0])

    @property
    def masked_count(self) -> int:
        return int(self.masked.sum())


def noise_block(block_tokens: torch.Tensor,
                t: float,
                generator: torch.Generator,
                mask_token_id: int,
                schedule: Optional[DiffusionSchedule] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    블록의 각 토큰을 확률 1−α(t) 로 마스킹
    t > 0 인데 아무것도 마스킹되지 않으면 임의의 한 위치를 강제로 마스킹한다.

    Args:
        block_tokens (torch.Tensor): [B] 깨끗한 토큰
        t (float): 마스킹 수준 ∈ [0, 1]
        generator (torch.Generator): 난수 생성기
        mask_token_id (int): [MASK] 토큰 ID
        schedule (Optional[DiffusionSchedule]): 스케줄 (기본: 선형)

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: (마스킹된 블록, 마스킹 지시자)
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"마스킹 수준 t 는 [0, 1] 범위여야 합니다: {t}")
    schedule = schedule or DiffusionSchedule()
    block_tokens = torch.as_tensor(block_tokens, dtype=torch.long)
    n = int(block_tokens.shape[0])
    masked = torch.rand(n, generator=generator) < schedule.mask_prob(t)
    if t > 0 and not bool(masked.any()):
        masked[int(torch.randint(n, (1,), generator=generator))] = True
    noisy = torch.where(masked, torch.full_like(block_tokens, mask_token_id), block_tokens)
    return noisy, masked


def make_noisy_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
                     layout: BlockLayout,
                     generator: torch.Generator,
                     mask_token_id: int,
                     schedule: Optional[DiffusionSchedule] = None) -> NoisyBatch:
    """
    (프롬프트, 출력) 쌍 목록으로부터 마스킹 배치 생성
    출력 블록마다 t ~ U(0,1] 를 뽑고 프롬프트 블록은 깨끗하게 둔다.
    """
    schedule = schedule or DiffusionSchedule()
    b = layout.block_size
    clean_rows, noisy_rows, masked_rows, t_rows = [], [], [], []
    for prompt, output in pairs:
        clean = torch.tensor(list(prompt) + list(output), dtype=torch.long)
        noisy = clean.clone()
        masked = torch.zeros_like(clean, dtype=torch.bool)
        # torch.rand 는 [0, 1) 이므로 1 − u 는 (0, 1]
        ts = 1.0 - torch.rand(layout.output_blocks, generator=generator, dtype=torch.float64)
        for local in range(layout.output_blocks):
            start = (layout.prompt_blocks + local) * b
            block_noisy, block_masked = noise_block(
                clean[start:start + b], float(ts[local]), generator, mask_token_id, schedule
            )
            noisy[start:start + b] = block_noisy
            masked[start:start + b] = block_masked
        clean_rows.append(clean)
        noisy_rows.append(noisy)
        masked_rows.append(masked)
        t_rows.append(ts)
    return NoisyBatch(
        layout=layout,
        clean=torch.stack(clean_rows),
        noisy=torch.stack(noisy_rows),
        masked=torch.stack(masked_rows),
        t=torch.stack(t_rows),
        mask_token_id=mask_token_id,
    )


def _block_weights(batch: NoisyBatch, block_ids: torch.Tensor, schedule: DiffusionSchedule,
                   dtype: torch.dtype) -> torch.Tensor:
    # 위치별 소속 출력 블록의 w(t), 프롬프트 블록은 0
    local = (block_ids - batch.layout.prompt_blocks).clamp(min=0)
    weights = schedule.weights(batch.t)[:, local].to(dtype)
    return torch.where(block_ids[None, :] >= batch.layout.prompt_blocks, weights, torch.zeros_like(weights))


def _expanded_forward(params: ModelParams, batch: NoisyBatch,
                      tile_size: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    # 같은 레이아웃이므로 위치/마스크/블록 번호는 첫 확장과 공유
    expansions = [
        sft_repeat_expansion(batch.layout, batch.clean[i], batch.noisy[i], batch.mask_token_id)
        for i in range(batch.size)
    ]
    first = expansions[0]
    tokens = torch.stack([e.tokens for e in expansions])
    loss_mask = torch.stack([e.loss_mask for e in expansions])
    targets = torch.stack([e.targets for e in expansions])
    logits = forward(params, tokens, first.positions, first.mask, tile_size=tile_size)
    return logits, loss_mask, targets, first.block_ids


def sft_loss_logits(params: ModelParams,
                    batch: NoisyBatch,
                    tile_size: Optional[int] = None) -> torch.Tensor:
    """
    확장 단일 순전파의 손실 위치 로짓 [M, V]
    행 순서: 배치 행, 출력 블록, 블록 내 위치 (sequential_sft_logits 와 동일)
    """
    if batch.size == 0:
        return torch.zeros((0, params.config.vocab_size), dtype=params["head.weight"].dtype)
    logits, loss_mask, _, _ = _expanded_forward(params, batch, tile_size)
    return logits[loss_mask]


def sequential_sft_logits(params: ModelParams, batch: NoisyBatch) -> torch.Tensor:
    """
    출력 블록마다 개별 순전파(깨끗한 블록 0..k−1 + 마스킹된 블록 k)로 구한 손실 위치 로짓 [M, V]
    """
    layout = batch.layout
    b = layout.block_size
    rows = [torch.zeros((0, params.config.vocab_size), dtype=params["head.weight"].dtype)]
    for i in range(batch.size):
        for local in range(layout.output_blocks):
            k = layout.prompt_blocks + local
            start = k * b
            tokens = torch.cat([batch.clean[i, :start], batch.noisy[i, start:start + b]])
            logits = forward(params, tokens, torch.arange(start + b), inference_mask(layout, k))
            rows.append(logits[start:start + b][batch.masked[i, start:start + b]])
    return torch.cat(rows)


def sft_loss(params: ModelParams,
             batch: NoisyBatch,
             schedule: Optional[DiffusionSchedule] = None,
             tile_size: Optional[int] = None) -> torch.Tensor:
    """
    블록 단위 NELBO: 확장 시퀀스 한 번의 순전파로 마스킹 위치의 w(t)·CE 합 / 마스킹 토큰 수

    Args:
        params (ModelParams): 모델 파라미터
        batch (NoisyBatch): 마스킹 배치 (같은 레이아웃이므로 가시성 마스크 공유)
        schedule (Optional[DiffusionSchedule]): 손실 가중치 스케줄
        tile_size (Optional[int]): 어텐션 타일 크기

    Returns:
        torch.Tensor: 스칼라 손실 (빈 배치이거나 마스킹 위치가 없으면 0, 그래디언트 0)
    """
    schedule = schedule or DiffusionSchedule()
    if batch.size == 0:
        return params["head.bias"].sum() * 0.0
    logits, loss_mask, targets, block_ids = _expanded_forward(params, batch, tile_size)
    weights = _block_weights(batch, block_ids, schedule, logits.dtype)
    count = int(loss_mask.sum())
    total = softmax_cross_entropy(logits[loss_mask], targets[loss_mask], weights[loss_mask], reduction="sum")
    return total / max(count, 1)


def sequential_sft_loss(params: ModelParams,
                        batch: NoisyBatch,
                        schedule: Optional[DiffusionSchedule] = None) -> torch.Tensor:
    """
    블록별 개별 순전파로 계산한 같은 손실 (확장 순전파 검증용)

    출력 블록 k 마다 깨끗한 블록 0..k−1 과 마스킹된 블록 k 를 추론 마스크로 순전파한다.
    """
    schedule = schedule or DiffusionSchedule()
    layout = batch.layout
    b = layout.block_size
    total = None
    count = 0
    for i in range(batch.size):
        for local in range(layout.output_blocks):
            k = layout.prompt_blocks + local
            start = k * b
            masked = batch.masked[i, start:start + b]
            tokens = torch.cat([batch.clean[i, :start], batch.noisy[i, start:start + b]])
            logits = forward(params, tokens, torch.arange(start + b), inference_mask(layout, k))
            block_logits = logits[start:start + b][masked]
            weight = torch.full((int(masked.sum()),), schedule.weight(float(batch.t[i, local])),
                                dtype=logits.dtype)
            term = softmax_cross_entropy(block_logits, batch.clean[i, start:start + b][masked], weight,
                                         reduction="sum")
            total = term if total is None else total + term
            count += int(masked.sum())
    return total / max(count, 1)


def forward_calls_sequential(batch: NoisyBatch) -> int:
    """순차 오라클의 순전파 호출 수 (시퀀스당 출력 블록 수)"""
    return batch.size * batch.layout.output_blocks


def _sample_pairs(samples: List[TaskSample], layout: BlockLayout, n: int,
                  generator: torch.Generator) -> List[Tuple[List[int], List[int]]]:
    idx = torch.randint(len(samples), (n,), generator=generator).tolist()
    return [training_pair(samples[i], layout) for i in idx]


def evaluate_sft_loss(params: ModelParams, batch: NoisyBatch, schedule: DiffusionSchedule) -> float:
    """그래디언트 없이 고정 검증 배치의 손실"""
    with torch.no_grad():
        return float(sft_loss(params, batch, schedule))


def sft_train(config: SFTConfig,
              samples: List[TaskSample],
              params: ModelParams,
              layout: BlockLayout,
              seed: int = 0,
              held_out: Optional[List[TaskSample]] = None,
              metrics_path: Optional[str] = None) -> Tuple[ModelParams, pd.DataFrame]:
    """
    SFT 학습 루프: t 샘플링 → 마스킹 → 손실 → AdamW (코사인 학습률)

    Args:
        config (SFTConfig): SFT 설정
        samples (List[TaskSample]): 학습 샘플
        params (ModelParams): 시작 파라미터 (변경하지 않음)
        layout (BlockLayout): 과제 레이아웃
        seed (int): 배치 샘플링 시드
        held_out (Optional[List[TaskSample]]): 검증 손실용 샘플 (없으면 학습 샘플 사용)
        metrics_path (Optional[str]): 지표 CSV 경로

    Returns:
        Tuple[ModelParams, pd.DataFrame]: 학습된 파라미터와 지표 표

    Raises:
        ValueError: 데이터셋이 비어 있는 경우
        NonFiniteError: 손실이 유한하지 않은 경우
    """
    if not samples:
        error_msg = "SFT 데이터셋이 비어 있습니다."
        logger.error(error_msg)
        raise ValueError(error_msg)

    mask_id = params.config.mask_token_id
    schedule = DiffusionSchedule(t_min=config.t_min)
    generator = torch.Generator().manual_seed(seed)
    eval_generator = torch.Generator().manual_seed(seed + 1)
    eval_batch = make_noisy_batch(
        _sample_pairs(held_out or samples, layout, config.eval_size, eval_generator),
        layout, eval_generator, mask_id, schedule,
    )

    trained = params.clone(requires_grad=True)
    state = create_optim_state(trained.tensors, lr=config.lr, betas=config.betas,
                               weight_decay=config.weight_decay, max_grad_norm=config.max_grad_norm)
    logger.info(f"SFT 학습 시작: {config.steps} 스텝, 배치 {config.batch_size}, 학습 샘플 {len(samples)}개")

    rows = []
    progress = tqdm(range(config.steps), desc="SFT", disable=config.steps < 2)
    for step in progress:
        start = time.perf_counter()
        batch = make_noisy_batch(_sample_pairs(samples, layout, config.batch_size, generator),
                                 layout, generator, mask_id, schedule)
        loss = sft_loss(trained, batch, schedule)
        if not bool(torch.isfinite(loss)):
            error_msg = f"SFT 손실이 유한하지 않습니다 (스텝 {step}, 마스킹 토큰 {batch.masked_count}개)"
            logger.error(error_msg)
            raise NonFiniteError(error_msg)

        lr = cosine_lr(step, config.steps, config.lr, config.warmup_steps, config.min_lr)
        grads = collect_gradients(loss, trained.tensors)
        optimizer_step(trained.tensors, grads, state, lr=lr)
        wall_ms = (time.perf_counter() - start) * 1000.0

        eval_loss = None
        if config.eval_every and ((step + 1) % config.eval_every == 0 or step == config.steps - 1):
            eval_loss = evaluate_sft_loss(trained, eval_batch, schedule)
            logger.info(f"SFT 스텝 {step + 1}: 검증 손실 {eval_loss:.4f}")

        output_positions = batch.size * layout.output_len
        rows.append({
            "step": step,
            "loss": float(loss.detach()),
            "lr": lr,
            "masked_frac": batch.masked_count / output_positions,
            "wall_ms": wall_ms,
            "eval_loss": eval_loss,
        })
        progress.set_postfix(loss=f"{float(loss.detach()):.3f}")
        if config.log_every and step % config.log_every == 0:
            logger.debug(f"SFT 스텝 {step}: 손실 {float(loss.detach()):.4f}, lr {lr:.2e}")

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    if metrics_path:
        metrics.to_csv(metrics_path, index=False)
        logger.info(f"SFT 지표 저장 완료: {metrics_path}")

    result = trained.clone()
    result.version = params.version + 1
    logger.info(f"SFT 학습 완료: 최종 손실 {rows[-1]['loss']:.4f}" if rows else "SFT 학습 완료 (0 스텝)")
    return result, metrics
