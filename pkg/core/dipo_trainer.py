"""
DiPO 강화학습 모듈 - 그룹 롤아웃, 그룹 정규화 어드밴티지, 트레이스 재생 기반 클리핑 정책 목적함수

비율은 ρ = exp(log π_θ − sg(log π_θ)) 이므로 값은 항상 1 이고 그래디언트는 ∇log π_θ 이다.
롤아웃 한 번에 옵티마이저 업데이트 한 번을 수행하고, 업데이트된 가중치를 롤아웃 서비스에 제자리로 밀어 넣는다.
"""
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from core.exceptions import ConfigError, NonFiniteError, ServiceError, TraceError
from core.block_mask import BlockLayout
from core.bdlm_model import ModelParams
from core.decoder import DecodePolicy, Trajectory, generate, replay_logprobs
from core.tensor_ops import (
    collect_gradients, create_optim_state, grad_global_norm, optimizer_step, stop_gradient, OptimState,
)
from core.tasks import TaskSample, pad_prompt, prompt_tokens, verify
from rollout_services import IRolloutService, RolloutServiceFactory
from core.rollout_server import ServiceConfig
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("dipo_trainer")

OBJECTIVES = ("token_clip", "token_clip_kl", "step_level", "trajectory_level")
REPORT_COLUMNS = ["step", "mean_reward", "pass_rate", "clip_frac", "kl", "grad_norm",
                  "rollout_ms", "train_ms", "update_ms"]
EVAL_COLUMNS = ["policy", "tau", "accuracy", "tokens_per_step", "avg_length", "n"]


@dataclass
class DiPOConfig:
    """
    DiPO 설정

    Attributes:
        group_size (int): 프롬프트당 롤아웃 수 G (≥ 2)
        clip_eps (float): 클리핑 ε ∈ (0, 1)
        kl_beta (float): KL 계수 β (≥ 0, token_clip_kl 에서만 사용)
        objective (str): token_clip | token_clip_kl | step_level | trajectory_level
        lr (float): 학습률
        steps (int): RL 스텝 수
        batch_prompts (int): 스텝당 프롬프트 수
        max_grad_norm (Optional[float]): 그래디언트 클리핑 노름
        rollout_policy (DecodePolicy): 롤아웃 디코딩 정책
        eval_every (int): 검증 세트 평가 주기 (0 이면 끔)
    """
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    objective: str = "token_clip"
    lr: float = 5e-4
    steps: int = 40
    batch_prompts: int = 16
    betas: Tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.0
    max_grad_norm: Optional[float] = 1.0
    rollout_policy: DecodePolicy = field(default_factory=lambda: DecodePolicy(temperature=1.0))
    eval_every: int = 10
    log_every: int = 1

    def __post_init__(self):
        if isinstance(self.rollout_policy, dict):
            self.rollout_policy = DecodePolicy(**self.rollout_policy)
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError(f"rl.group_size 는 2 이상이어야 합니다: {self.group_size}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"rl.clip_eps 는 (0, 1) 범위여야 합니다: {self.clip_eps}")
        if self.kl_beta < 0:
            raise ConfigError(f"rl.kl_beta 는 0 이상이어야 합니다: {self.kl_beta}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"rl.objective 는 {OBJECTIVES} 중 하나여야 합니다: {self.objective}")
        if self.kl_beta > 0 and self.objective != "token_clip_kl":
            logger.warning(f"kl_beta={self.kl_beta} 는 token_clip_kl 목적함수에서만 적용됩니다 (현재 {self.objective})")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["rollout_policy"] = self.rollout_policy.to_dict()
        data["betas"] = list(self.betas)
        return data


@dataclass
class RolloutGroup:
    """
    한 프롬프트의 롤아웃 그룹 (어드밴티지 합은 0)
    """
    sample: TaskSample
    trajectories: List[Trajectory]
    rewards: List[float]
    advantages: List[float]


@dataclass
class PolicyRefs:
    """
    참조 정책 (RL 시작 시 고정된 복사본)

    Attributes:
        ref_params (ModelParams): KL 항의 참조 정책
        old_params (Optional[ModelParams]): 중요도 비율의 분모 정책 (없으면 현재 정책의 정지 그래디언트)
    """
    ref_params: ModelParams
    old_params: Optional[ModelParams] = None

    @classmethod
    def freeze(cls, params: ModelParams) -> "PolicyRefs":
        return cls(ref_params=params.clone(requires_grad=False))


@dataclass
class TrainStepReport:
    """
    RL 스텝 보고 (소요 시간 분류: rollout / train / update)
    """
    step: int
    mean_reward: float
    pass_rate: float
    clip_frac: float
    kl: float
    grad_norm: float
    rollout_ms: float
    train_ms: float
    update_ms: float
    tokens_per_step: float = 0.0
    version: int = 0

    def to_row(self) -> Dict:
        return {column: getattr(self, column) for column in REPORT_COLUMNS}

    @property
    def wall_clock(self) -> Dict[str, float]:
        return {"rollout": self.rollout_ms, "train": self.train_ms, "update": self.update_ms}


def compute_advantages(rewards: Sequence[float]) -> List[float]:
    """
    그룹 정규화 어드밴티지 A_i = r_i − mean(r)
    """
    if not rewards:
        return []
    rewards = [float(r) for r in rewards]
    mean = sum(rewards) / len(rewards)
    return [r - mean for r in rewards]


def build_groups(samples: Sequence[TaskSample],
                 trajectories: Sequence[Optional[Trajectory]],
                 group_size: int) -> List[RolloutGroup]:
    """
    프롬프트 순서로 G 개씩 묶인 롤아웃을 검증해 그룹 구성

    Args:
        samples (Sequence[TaskSample]): 프롬프트 샘플
        trajectories (Sequence[Optional[Trajectory]]): 샘플 순서로 G 개씩 나열된 트레이젝토리 (실패 항목은 None)
        group_size (int): G

    Returns:
        List[RolloutGroup]: 보상과 어드밴티지가 채워진 그룹
    """
    if len(trajectories) != len(samples) * group_size:
        raise ValueError(f"트레이젝토리 수({len(trajectories)})가 프롬프트 수 × G({len(samples)}×{group_size})와 다릅니다.")
    groups = []
    for i, sample in enumerate(samples):
        members = [t for t in trajectories[i * group_size:(i + 1) * group_size] if t is not None]
        if len(members) < group_size:
            logger.warning(f"프롬프트 {sample.prompt} 의 롤아웃 {group_size - len(members)}개가 실패했습니다.")
        if not members:
            continue
        rewards = [verify(t.generated_tokens(), sample) for t in members]
        advantages = compute_advantages(rewards)
        if all(r == rewards[0] for r in rewards):
            logger.debug(f"보상이 모두 같은 그룹 (어드밴티지 0): {sample.prompt}")
        groups.append(RolloutGroup(sample=sample, trajectories=members, rewards=rewards, advantages=advantages))
    return groups


def _check_trace(trajectory: Trajectory) -> None:
    if trajectory is None or not trajectory.steps:
        error_msg = "디코딩 트레이스가 없는 트레이젝토리입니다."
        logger.error(error_msg)
        raise TraceError(error_msg)


def _normalizer(groups: Sequence[RolloutGroup], objective: str) -> float:
    if objective == "trajectory_level":
        return float(sum(len(g.trajectories) for g in groups))
    return float(sum(int(t.loss_token_mask().sum()) for g in groups for t in g.trajectories))


def _clipped(ratio: torch.Tensor, advantage: float, eps: float) -> torch.Tensor:
    return torch.minimum(ratio * advantage, ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)


def trajectory_objective(params: ModelParams,
                         trajectory: Trajectory,
                         advantage: float,
                         refs: Optional[PolicyRefs],
                         config: DiPOConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    트레이젝토리 하나의 정규화 전 목적함수 합과 진단값

    Returns:
        Tuple[torch.Tensor, Dict[str, float]]: (목적함수 합, {"tokens", "clipped", "kl_sum"})

    Raises:
        TraceError: 트레이스가 없는 경우
        NonFiniteError: 비율이 유한하지 않은 경우
    """
    _check_trace(trajectory)
    logprobs = replay_logprobs(params, trajectory)
    keep = trajectory.loss_token_mask()
    if refs is not None and refs.old_params is not None:
        with torch.no_grad():
            old_logprobs = replay_logprobs(refs.old_params, trajectory).to(logprobs.dtype)
    else:
        old_logprobs = stop_gradient(logprobs)
    delta = logprobs - old_logprobs
    ratio = torch.exp(delta)
    if not bool(torch.isfinite(ratio).all()):
        error_msg = "중요도 비율이 유한하지 않습니다."
        logger.error(error_msg)
        raise NonFiniteError(error_msg)

    eps = config.clip_eps
    steps = trajectory.step_index()
    if config.objective == "step_level":
        # 한 스텝에 디코딩된 토큰들의 결합 확률 비율
        n_steps = trajectory.num_steps
        step_delta = torch.zeros(n_steps, dtype=delta.dtype).index_add(0, steps[keep], delta[keep])
        active = torch.zeros(n_steps, dtype=torch.bool)
        active[steps[keep]] = True
        step_ratio = torch.exp(step_delta[active])
        objective = _clipped(step_ratio, advantage, eps).sum()
        outside = (step_ratio.detach() - 1.0).abs() > eps
        clipped = float(outside.sum())
    elif config.objective == "trajectory_level":
        n_steps = trajectory.num_steps
        token_terms = _clipped(ratio[keep], advantage, eps)
        step_sizes = torch.zeros(n_steps, dtype=delta.dtype).index_add(
            0, steps[keep], torch.ones_like(token_terms))
        step_sums = torch.zeros(n_steps, dtype=delta.dtype).index_add(0, steps[keep], token_terms)
        active = step_sizes > 0
        step_means = step_sums[active] / step_sizes[active]
        objective = step_means.sum() / max(1, int(active.sum()))
        clipped = float(((ratio[keep].detach() - 1.0).abs() > eps).sum())
    else:
        objective = _clipped(ratio[keep], advantage, eps).sum()
        clipped = float(((ratio[keep].detach() - 1.0).abs() > eps).sum())

    kl_sum = torch.zeros((), dtype=logprobs.dtype)
    if config.objective == "token_clip_kl" and refs is not None:
        with torch.no_grad():
            ref_logprobs = replay_logprobs(refs.ref_params, trajectory).to(logprobs.dtype)
        kl_delta = ref_logprobs[keep] - logprobs[keep]
        kl_sum = (torch.exp(kl_delta) - kl_delta - 1.0).sum()
        if config.kl_beta > 0:
            objective = objective - config.kl_beta * kl_sum

    return objective, {"tokens": float(keep.sum()), "clipped": clipped, "kl_sum": float(kl_sum.detach())}


def _summarize(totals: Dict[str, float], token_count: float) -> Dict[str, float]:
    return {
        "tokens": token_count,
        "clip_frac": totals["clipped"] / token_count if token_count else 0.0,
        "kl": totals["kl_sum"] / token_count if token_count else 0.0,
    }


def dipo_loss(params: ModelParams,
              groups: Sequence[RolloutGroup],
              refs: Optional[PolicyRefs],
              config: DiPOConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    DiPO 손실 −J (전체 그래프를 유지하는 버전)

    Args:
        params (ModelParams): 현재 정책 파라미터
        groups (Sequence[RolloutGroup]): 롤아웃 그룹
        refs (Optional[PolicyRefs]): 참조 정책 (token_clip_kl)
        config (DiPOConfig): DiPO 설정

    Returns:
        Tuple[torch.Tensor, Dict[str, float]]: 스칼라 손실과 진단값 (clip_frac, kl, tokens)
    """
    normalizer = _normalizer(groups, config.objective)
    token_count = float(sum(int(t.loss_token_mask().sum()) for g in groups for t in g.trajectories))
    total = torch.zeros((), dtype=params.dtype)
    anchor = params["head.bias"].sum() * 0.0
    totals = {"clipped": 0.0, "kl_sum": 0.0}
    for group in groups:
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            objective, stats = trajectory_objective(params, trajectory, advantage, refs, config)
            total = total + objective
            totals["clipped"] += stats["clipped"]
            totals["kl_sum"] += stats["kl_sum"]
    loss = -total / normalizer if normalizer else total * 0.0
    return loss + anchor, _summarize(totals, token_count)


def dipo_gradients(params: ModelParams,
                   groups: Sequence[RolloutGroup],
                   refs: Optional[PolicyRefs],
                   config: DiPOConfig) -> Tuple[float, Dict[str, torch.Tensor], Dict[str, float]]:
    """
    트레이젝토리마다 역전파해 그래디언트를 누적하는 DiPO 손실 (메모리 절약)

    Returns:
        Tuple[float, Dict[str, torch.Tensor], Dict[str, float]]: 손실 값, 이름별 그래디언트, 진단값
    """
    normalizer = _normalizer(groups, config.objective)
    token_count = float(sum(int(t.loss_token_mask().sum()) for g in groups for t in g.trajectories))
    grads = {name: torch.zeros_like(t) for name, t in params.tensors.items()}
    totals = {"clipped": 0.0, "kl_sum": 0.0}
    loss_value = 0.0
    for group in groups:
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            objective, stats = trajectory_objective(params, trajectory, advantage, refs, config)
            totals["clipped"] += stats["clipped"]
            totals["kl_sum"] += stats["kl_sum"]
            if not normalizer:
                continue
            loss = -objective / normalizer
            loss_value += float(loss.detach())
            for name, grad in collect_gradients(loss, params.tensors).items():
                grads[name] += grad
    return loss_value, grads, _summarize(totals, token_count)


def _rollout_prompts(samples: Sequence[TaskSample], layout: BlockLayout, group_size: int) -> List[List[int]]:
    prompts = []
    for sample in samples:
        prompt = pad_prompt(prompt_tokens(sample), layout.block_size, layout.prompt_blocks)
        prompts.extend([prompt] * group_size)
    return prompts


def _generate_with_retry(service: IRolloutService, prompts, policy: DecodePolicy, prompt_blocks: int):
    try:
        return service.generate_batch(prompts, policy, prompt_blocks)
    except ServiceError as e:
        logger.warning(f"롤아웃 요청 실패, 한 번 재시도합니다: {str(e)}")
    try:
        return service.generate_batch(prompts, policy, prompt_blocks)
    except ServiceError as e:
        error_msg = f"롤아웃 재시도 실패로 스텝을 중단합니다: {str(e)}"
        logger.error(error_msg)
        raise ServiceError(error_msg)


def rl_train_step(service: IRolloutService,
                  params: ModelParams,
                  state: OptimState,
                  refs: Optional[PolicyRefs],
                  config: DiPOConfig,
                  samples: Sequence[TaskSample],
                  layout: BlockLayout,
                  step: int = 0,
                  seed: int = 0) -> Tuple[ModelParams, TrainStepReport]:
    """
    RL 한 스텝: 롤아웃 → 보상 검증 → 어드밴티지 → DiPO 손실 → 옵티마이저 → 서비스 가중치 업데이트

    Args:
        service (IRolloutService): 롤아웃 서비스
        params (ModelParams): 학습 중인 파라미터 (requires_grad, 제자리 갱신)
        state (OptimState): 옵티마이저 상태
        refs (Optional[PolicyRefs]): 참조 정책
        config (DiPOConfig): DiPO 설정
        samples (Sequence[TaskSample]): 이번 스텝의 프롬프트
        layout (BlockLayout): 과제 레이아웃
        step (int): 스텝 번호 (롤아웃 시드에 사용)
        seed (int): 실행 시드

    Returns:
        Tuple[ModelParams, TrainStepReport]: 갱신된 파라미터와 스텝 보고
    """
    start = time.perf_counter()
    policy = config.rollout_policy.replace(seed=seed * 1_000_003 + step * 10_007)
    prompts = _rollout_prompts(samples, layout, config.group_size)
    result = _generate_with_retry(service, prompts, policy, layout.prompt_blocks)
    rollout_ms = (time.perf_counter() - start) * 1000.0

    versions = {v for v in result.versions if v is not None}
    if len(versions) > 1:
        logger.warning(f"한 롤아웃 배치에 여러 가중치 버전이 섞였습니다: {sorted(versions)}")

    start = time.perf_counter()
    groups = build_groups(samples, result.trajectories, config.group_size)
    _, grads, diagnostics = dipo_gradients(params, groups, refs, config)
    grad_norm = grad_global_norm(grads)
    optimizer_step(params.tensors, grads, state, lr=config.lr)
    train_ms = (time.perf_counter() - start) * 1000.0

    start = time.perf_counter()
    version = service.update_weights(params)
    params.version = version
    update_ms = (time.perf_counter() - start) * 1000.0

    rewards = [r for g in groups for r in g.rewards]
    trajectories = [t for g in groups for t in g.trajectories]
    total_steps = sum(t.num_steps for t in trajectories)
    report = TrainStepReport(
        step=step,
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
        pass_rate=float(np.mean([max(g.rewards) for g in groups])) if groups else 0.0,
        clip_frac=diagnostics["clip_frac"],
        kl=diagnostics["kl"],
        grad_norm=grad_norm,
        rollout_ms=rollout_ms,
        train_ms=train_ms,
        update_ms=update_ms,
        tokens_per_step=sum(len(t.output) for t in trajectories) / max(1, total_steps),
        version=version,
    )
    return params, report


def evaluate(params: ModelParams,
             samples: Sequence[TaskSample],
             policy: DecodePolicy,
             layout: BlockLayout) -> Dict[str, float]:
    """
    검증 세트 평가: 정확도, 스텝당 평균 디코딩 토큰 수, 평균 출력 길이

    Returns:
        Dict[str, float]: {"accuracy", "tokens_per_step", "avg_length", "n"}
    """
    correct = 0.0
    tokens = 0
    steps = 0
    lengths = []
    for sample in samples:
        prompt = pad_prompt(prompt_tokens(sample), layout.block_size, layout.prompt_blocks)
        trajectory = generate(params, prompt, policy, prompt_blocks=layout.prompt_blocks)
        generated = trajectory.generated_tokens()
        correct += verify(generated, sample)
        tokens += len(trajectory.output)
        steps += trajectory.num_steps
        lengths.append(len(generated))
    n = len(samples)
    return {
        "accuracy": correct / n if n else 0.0,
        "tokens_per_step": tokens / steps if steps else 0.0,
        "avg_length": float(np.mean(lengths)) if lengths else 0.0,
        "n": n,
    }


def tau_sweep(params: ModelParams,
              samples: Sequence[TaskSample],
              taus: Sequence[float],
              layout: BlockLayout,
              base_policy: Optional[DecodePolicy] = None,
              include_static: bool = True) -> pd.DataFrame:
    """
    임계값 τ 별 동적 디코딩 평가 (τ 마다 한 행, 정적 디코딩 한 행)
    """
    base_policy = base_policy or DecodePolicy(temperature=0.0)
    rows = []
    if include_static:
        metrics = evaluate(params, samples, base_policy.replace(mode="static"), layout)
        rows.append({"policy": "static", "tau": None, **metrics})
    for tau in taus:
        metrics = evaluate(params, samples, base_policy.replace(mode="dynamic", threshold=tau), layout)
        rows.append({"policy": "dynamic", "tau": tau, **metrics})
        logger.info(f"τ={tau}: 정확도 {metrics['accuracy']:.3f}, 스텝당 토큰 {metrics['tokens_per_step']:.2f}")
    return pd.DataFrame(rows, columns=EVAL_COLUMNS)


def rl_train(config: DiPOConfig,
             samples: List[TaskSample],
             params: ModelParams,
             layout: BlockLayout,
             service: Optional[IRolloutService] = None,
             held_out: Optional[List[TaskSample]] = None,
             eval_policy: Optional[DecodePolicy] = None,
             seed: int = 0,
             report_path: Optional[str] = None) -> Tuple[ModelParams, pd.DataFrame]:
    """
    온라인 DiPO 학습 루프 (롤아웃 서비스는 한 번만 로드)

    Args:
        config (DiPOConfig): DiPO 설정
        samples (List[TaskSample]): 학습 프롬프트
        params (ModelParams): 시작 파라미터 (변경하지 않음, 참조 정책으로 고정)
        layout (BlockLayout): 과제 레이아웃
        service (Optional[IRolloutService]): 롤아웃 서비스 (없으면 프로세스 내 서비스 생성)
        held_out (Optional[List[TaskSample]]): 주기적 평가용 검증 샘플
        eval_policy (Optional[DecodePolicy]): 평가 정책 (기본: greedy 동적)
        seed (int): 실행 시드
        report_path (Optional[str]): 학습 보고 CSV 경로

    Returns:
        Tuple[ModelParams, pd.DataFrame]: 학습된 파라미터와 스텝별 보고
    """
    if not samples:
        error_msg = "RL 프롬프트 데이터셋이 비어 있습니다."
        logger.error(error_msg)
        raise ValueError(error_msg)

    refs = PolicyRefs.freeze(params)
    trained = params.clone(requires_grad=True)
    owns_service = service is None
    if owns_service:
        factory = RolloutServiceFactory(ServiceConfig(transport="local"))
        service = factory.get_service("local", params=params, policy=config.rollout_policy)
    state = create_optim_state(trained.tensors, lr=config.lr, betas=config.betas,
                               weight_decay=config.weight_decay, max_grad_norm=config.max_grad_norm)
    generator = torch.Generator().manual_seed(seed)
    eval_policy = eval_policy or DecodePolicy(temperature=0.0)
    logger.info(f"DiPO 학습 시작: {config.steps} 스텝, 프롬프트 {config.batch_prompts}개 × G={config.group_size}, "
                f"목적함수 {config.objective}")

    rows = []
    try:
        progress = tqdm(range(config.steps), desc="DiPO", disable=config.steps < 2)
        for step in progress:
            idx = torch.randint(len(samples), (config.batch_prompts,), generator=generator).tolist()
            batch = [samples[i] for i in idx]
            trained, report = rl_train_step(service, trained, state, refs, config, batch, layout, step, seed)
            rows.append(report.to_row())
            progress.set_postfix(reward=f"{report.mean_reward:.3f}")
            if config.log_every and step % config.log_every == 0:
                logger.info(f"DiPO 스텝 {step}: 평균 보상 {report.mean_reward:.3f}, pass {report.pass_rate:.3f}, "
                            f"grad {report.grad_norm:.3f}, 스텝당 토큰 {report.tokens_per_step:.2f}")
            if held_out and config.eval_every and (step + 1) % config.eval_every == 0:
                metrics = evaluate(trained, held_out, eval_policy, layout)
                logger.info(f"DiPO 스텝 {step + 1} 검증 정확도: {metrics['accuracy']:.3f}")
        loads = service.version().get("loads")
        logger.info(f"DiPO 학습 완료 (서비스 모델 로드 {loads}회)")
    finally:
        if owns_service:
            service.close()

    report_df = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    if report_path:
        report_df.to_csv(report_path, index=False)
        logger.info(f"DiPO 보고 저장 완료: {report_path}")
    result = trained.clone()
    return result, report_df
