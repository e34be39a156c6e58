"""
디코더 모듈 - KV 캐시 기반 블록 단위 생성 (정적/동적 임계값 디코딩)과 디코딩 트레이스 기록

블록 내부에서는 마스킹된 위치를 병렬로 예측하고, 한 스텝에
동적 모드는 top-1 확률이 임계값 τ 를 넘는 모든 위치를, 정적 모드는 가장 확신하는 한 위치를 드러낸다.
"""
from enum import Enum
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from core.exceptions import ConfigError, LayoutError
from core.block_mask import BlockLayout, inference_mask, trace_replay_expansion
from core.bdlm_model import ModelParams, KvCache, forward, forward_cached, prefill
from core.tasks import pad_prompt
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("decoder")


class DecodeMode(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class DecodePolicy:
    """
    디코딩 정책

    Attributes:
        mode (str): "static" (스텝당 1 토큰) 또는 "dynamic" (임계값)
        threshold (float): 동적 모드 임계값 τ ∈ (0, 1] (정적 모드에서는 무시)
        temperature (float): 샘플링 온도 (0 이면 argmax)
        max_new_tokens (int): 최대 생성 토큰 수 (블록 단위로 올림)
        seed (int): 샘플링 시드
    """
    mode: str = DecodeMode.DYNAMIC.value
    threshold: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in {m.value for m in DecodeMode}:
            raise ConfigError(f"decode.mode 는 static 또는 dynamic 이어야 합니다: {self.mode}")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError(f"decode.threshold 는 (0, 1] 범위여야 합니다: {self.threshold}")
        if self.temperature < 0:
            raise ConfigError(f"decode.temperature 는 0 이상이어야 합니다: {self.temperature}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"decode.max_new_tokens 는 1 이상이어야 합니다: {self.max_new_tokens}")

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "threshold": self.threshold,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "seed": self.seed,
        }

    def replace(self, **changes) -> "DecodePolicy":
        values = self.to_dict()
        values.update(changes)
        return DecodePolicy(**values)


@dataclass
class StepRecord:
    """
    한 디코딩 스텝의 기록 (위치는 시퀀스 절대 위치)
    """
    block: int
    step: int
    positions: List[int]
    tokens: List[int]
    logprobs: List[float]

    def to_dict(self) -> Dict:
        return {"block": self.block, "step": self.step, "positions": list(self.positions),
                "tokens": list(self.tokens), "logprobs": list(self.logprobs)}


@dataclass
class Trajectory:
    """
    생성 결과와 디코딩 트레이스

    Attributes:
        prompt (List[int]): 블록 정렬된 (PAD 왼쪽 채움) 프롬프트
        output (List[int]): 디코딩된 출력 블록 전체
        steps (List[StepRecord]): 순서대로의 스텝 기록
        finish (str): "eos" 또는 "length"
        block_size (int): 블록 크기
        temperature (float): 행동 로그 확률을 기록한 온도
        version (int): 생성에 사용된 가중치 버전
    """
    prompt: List[int]
    output: List[int]
    steps: List[StepRecord]
    finish: str
    block_size: int
    temperature: float = 1.0
    eos_token_id: int = 15
    version: int = 0

    @property
    def layout(self) -> BlockLayout:
        b = self.block_size
        return BlockLayout(block_size=b, prompt_blocks=len(self.prompt) // b,
                           output_blocks=len(self.output) // b)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def tokens_per_step(self) -> float:
        return len(self.output) / max(1, len(self.steps))

    @property
    def stats(self) -> Dict:
        return {"steps": self.num_steps, "tokens": len(self.output), "tokens_per_step": self.tokens_per_step}

    def first_eos(self) -> Optional[int]:
        """출력 내 첫 EOS 의 절대 위치 (없으면 None)"""
        for i, token in enumerate(self.output):
            if token == self.eos_token_id:
                return len(self.prompt) + i
        return None

    def generated_tokens(self) -> List[int]:
        """첫 EOS 까지(포함)의 출력 토큰"""
        eos = self.first_eos()
        return list(self.output) if eos is None else list(self.output[:eos - len(self.prompt) + 1])

    def decoded_positions(self) -> List[int]:
        """스텝 기록 순서로 평탄화한 디코딩 위치"""
        return [p for record in self.steps for p in record.positions]

    def behavior_logprobs(self) -> torch.Tensor:
        return torch.tensor([lp for record in self.steps for lp in record.logprobs], dtype=torch.float64)

    def loss_token_mask(self) -> torch.Tensor:
        """손실에 포함되는 토큰 (첫 EOS 위치 이하), 스텝 기록 순서"""
        eos = self.first_eos()
        positions = torch.tensor(self.decoded_positions(), dtype=torch.long)
        if eos is None:
            return torch.ones_like(positions, dtype=torch.bool)
        return positions <= eos

    def step_index(self) -> torch.Tensor:
        """평탄화한 토큰별 스텝 번호 (트레이젝토리 내 0..num_steps−1)"""
        return torch.tensor([i for i, record in enumerate(self.steps) for _ in record.positions],
                            dtype=torch.long)

    def to_dict(self) -> Dict:
        return {
            "prompt": list(self.prompt),
            "output": list(self.output),
            "steps": [record.to_dict() for record in self.steps],
            "finish": self.finish,
            "stats": self.stats,
            "block_size": self.block_size,
            "temperature": self.temperature,
            "eos_token_id": self.eos_token_id,
            "version": self.version,
        }


def trajectory_to_json(trajectory: Trajectory) -> Dict:
    return trajectory.to_dict()


def trajectory_from_json(data: Dict) -> Trajectory:
    return Trajectory(
        prompt=list(data["prompt"]),
        output=list(data["output"]),
        steps=[StepRecord(**record) for record in data["steps"]],
        finish=data["finish"],
        block_size=int(data["block_size"]),
        temperature=float(data.get("temperature", 1.0)),
        eos_token_id=int(data.get("eos_token_id", 15)),
        version=int(data.get("version", 0)),
    )


def select_positions(top1: torch.Tensor, masked: torch.Tensor, policy: DecodePolicy) -> torch.Tensor:
    """
    이번 스텝에 드러낼 위치 선택

    Args:
        top1 (torch.Tensor): [B] 온도 적용 전 top-1 확률
        masked (torch.Tensor): [B] 아직 마스킹된 위치
        policy (DecodePolicy): 디코딩 정책

    Returns:
        torch.Tensor: [B] 선택 여부 (항상 1개 이상)
    """
    candidates = torch.where(masked, top1, torch.full_like(top1, -1.0))
    best = torch.zeros_like(masked)
    best[int(candidates.argmax())] = True
    if policy.mode == DecodeMode.STATIC.value:
        return best
    chosen = masked & (top1 > policy.threshold)
    return chosen if bool(chosen.any()) else best


def _choose_tokens(logits: torch.Tensor, temperature: float,
                   generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    # 선택 위치들의 토큰과 (온도 적용) 로그 확률
    if temperature == 0:
        log_probs = torch.log_softmax(logits.double(), dim=-1)
        tokens = logits.argmax(dim=-1)
    else:
        log_probs = torch.log_softmax(logits.double() / temperature, dim=-1)
        tokens = torch.multinomial(log_probs.exp(), 1, generator=generator).squeeze(-1)
    return tokens, log_probs.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)


def _decode_steps(logits_fn: Callable[[torch.Tensor], torch.Tensor],
                  block: int,
                  block_size: int,
                  mask_token_id: int,
                  policy: DecodePolicy,
                  generator: torch.Generator) -> Tuple[torch.Tensor, List[StepRecord]]:
    state = torch.full((block_size,), mask_token_id, dtype=torch.long)
    masked = torch.ones(block_size, dtype=torch.bool)
    base = block * block_size
    records: List[StepRecord] = []
    while bool(masked.any()):
        logits = logits_fn(state)
        top1 = torch.softmax(logits.double(), dim=-1).max(dim=-1).values
        chosen = select_positions(top1, masked, policy)
        local = torch.nonzero(chosen).flatten()
        tokens, logprobs = _choose_tokens(logits[local], policy.temperature, generator)
        state[local] = tokens
        masked[local] = False
        records.append(StepRecord(
            block=block,
            step=len(records),
            positions=[base + int(i) for i in local],
            tokens=[int(t) for t in tokens],
            logprobs=[float(lp) for lp in logprobs],
        ))
    return state, records


def decode_block(params: ModelParams,
                 cache: KvCache,
                 policy: DecodePolicy,
                 generator: torch.Generator) -> Tuple[torch.Tensor, List[StepRecord], KvCache]:
    """
    캐시된 접두부 뒤의 한 블록을 완전히 디코딩하고 캐시에 커밋

    Args:
        params (ModelParams): 모델 파라미터
        cache (KvCache): 접두부 캐시 (길이는 B 의 배수)
        policy (DecodePolicy): 디코딩 정책
        generator (torch.Generator): 샘플링 난수 생성기

    Returns:
        Tuple[torch.Tensor, List[StepRecord], KvCache]: 블록 토큰, 스텝 기록, 커밋된 캐시
    """
    cfg = params.config
    b = cfg.block_size
    positions = torch.arange(cache.length, cache.length + b)

    def logits_fn(state: torch.Tensor) -> torch.Tensor:
        return forward_cached(params, cache, state, positions)[0]

    with torch.no_grad():
        state, records = _decode_steps(logits_fn, cache.length // b, b, cfg.mask_token_id, policy, generator)
        _, cache = forward_cached(params, cache, state, positions, commit=True)
    return state, records, cache


def _align_prompt(params: ModelParams, prompt: Sequence[int], policy: DecodePolicy,
                  prompt_blocks: Optional[int]) -> Tuple[List[int], int]:
    cfg = params.config
    b = cfg.block_size
    if len(prompt) > cfg.max_seq_len:
        error_msg = f"프롬프트 길이({len(prompt)})가 max_seq_len({cfg.max_seq_len})을 초과합니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    aligned = pad_prompt(prompt, b, prompt_blocks) if len(prompt) % b or prompt_blocks else list(prompt)
    n_blocks = -(-policy.max_new_tokens // b)
    if len(aligned) + n_blocks * b > cfg.max_seq_len:
        error_msg = f"프롬프트({len(aligned)}) + 생성({n_blocks * b})이 max_seq_len({cfg.max_seq_len})을 초과합니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    return aligned, n_blocks


def _finish(block_tokens: torch.Tensor, eos_token_id: int) -> bool:
    return bool((block_tokens == eos_token_id).any())


def generate(params: ModelParams,
             prompt: Sequence[int],
             policy: DecodePolicy,
             generator: Optional[torch.Generator] = None,
             prompt_blocks: Optional[int] = None) -> Trajectory:
    """
    블록 단위 생성: EOS 가 디코딩된 블록 또는 max_new_tokens 에서 멈춤

    Args:
        params (ModelParams): 모델 파라미터 (읽기 전용)
        prompt (Sequence[int]): 프롬프트 토큰 (B 의 배수가 아니면 PAD 로 왼쪽 채움)
        policy (DecodePolicy): 디코딩 정책
        generator (Optional[torch.Generator]): 샘플링 난수 생성기 (없으면 policy.seed)
        prompt_blocks (Optional[int]): 프롬프트 영역 블록 수 고정

    Returns:
        Trajectory: 출력과 디코딩 트레이스

    Raises:
        LayoutError: 프롬프트가 max_seq_len 보다 긴 경우
    """
    cfg = params.config
    aligned, n_blocks = _align_prompt(params, prompt, policy, prompt_blocks)
    generator = generator or torch.Generator().manual_seed(policy.seed)

    with torch.no_grad():
        cache = prefill(params, KvCache.empty(params), torch.tensor(aligned, dtype=torch.long))
    output: List[int] = []
    steps: List[StepRecord] = []
    finish = "length"
    for _ in range(n_blocks):
        block_tokens, records, cache = decode_block(params, cache, policy, generator)
        output.extend(int(t) for t in block_tokens)
        steps.extend(records)
        if _finish(block_tokens, cfg.eos_token_id):
            finish = "eos"
            break
    return Trajectory(prompt=aligned, output=output, steps=steps, finish=finish, block_size=cfg.block_size,
                      temperature=policy.temperature, eos_token_id=cfg.eos_token_id, version=params.version)


def generate_uncached(params: ModelParams,
                      prompt: Sequence[int],
                      policy: DecodePolicy,
                      generator: Optional[torch.Generator] = None,
                      prompt_blocks: Optional[int] = None) -> Trajectory:
    """
    캐시 없이 매 스텝 전체 접두부를 다시 계산하는 생성 (캐시 검증용)
    """
    cfg = params.config
    b = cfg.block_size
    aligned, n_blocks = _align_prompt(params, prompt, policy, prompt_blocks)
    generator = generator or torch.Generator().manual_seed(policy.seed)
    layout = BlockLayout(block_size=b, prompt_blocks=len(aligned) // b, output_blocks=n_blocks)

    sequence = torch.tensor(aligned, dtype=torch.long)
    steps: List[StepRecord] = []
    finish = "length"
    for local in range(n_blocks):
        block = layout.prompt_blocks + local
        mask = inference_mask(layout, block)
        prefix = sequence.clone()

        def logits_fn(state: torch.Tensor) -> torch.Tensor:
            tokens = torch.cat([prefix, state])
            return forward(params, tokens, torch.arange(tokens.shape[0]), mask)[-b:]

        with torch.no_grad():
            block_tokens, records = _decode_steps(logits_fn, block, b, cfg.mask_token_id, policy, generator)
        sequence = torch.cat([sequence, block_tokens])
        steps.extend(records)
        if _finish(block_tokens, cfg.eos_token_id):
            finish = "eos"
            break
    return Trajectory(prompt=aligned, output=sequence[len(aligned):].tolist(), steps=steps, finish=finish,
                      block_size=b, temperature=policy.temperature, eos_token_id=cfg.eos_token_id,
                      version=params.version)


def replay_logprobs(params: ModelParams,
                    trajectory: Trajectory,
                    temperature: Optional[float] = None,
                    tile_size: Optional[int] = None) -> torch.Tensor:
    """
    트레이스 재생: 각 디코딩 토큰의 log π(o_k | 스텝 직전 상태) 를 한 번의 순전파로 계산

    Args:
        params (ModelParams): 평가할 파라미터 (그래디언트 추적 가능)
        trajectory (Trajectory): 디코딩 트레이스
        temperature (Optional[float]): 온도 (없으면 기록된 온도, 0 이면 스케일링 없음)
        tile_size (Optional[int]): 어텐션 타일 크기

    Returns:
        torch.Tensor: 스텝 기록 순서의 토큰별 로그 확률

    Raises:
        TraceError: 트레이스 오류
    """
    temperature = trajectory.temperature if temperature is None else temperature
    expanded = trace_replay_expansion(trajectory.layout, trajectory, params.config.mask_token_id)
    logits = forward(params, expanded.tokens, expanded.positions, expanded.mask, tile_size=tile_size)
    picked = logits[expanded.loss_index]
    if temperature > 0:
        picked = picked / temperature
    log_probs = torch.log_softmax(picked, dim=-1)
    targets = expanded.targets[expanded.loss_index]
    return log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
