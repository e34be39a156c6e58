"""
텐서 연산 모듈 - 자동미분 기반 행렬곱/마스크 어텐션/교차 엔트로피, stop-gradient, AdamW 스텝

모든 연산은 입력 dtype 을 그대로 따르므로 float64 복사본으로 수치 미분 검증이 가능하다.
"""
import math
import random
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import torch

from core.exceptions import DimensionError, MaskContractError, NonFiniteError
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("tensor_ops")


def seed_everything(seed: int) -> torch.Generator:
    """
    난수 시드 고정 및 결정적 알고리즘 활성화

    Args:
        seed (int): 시드 값

    Returns:
        torch.Generator: 해당 시드로 초기화된 CPU 생성기
    """
    random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    행렬곱 (배치 차원 허용)

    Args:
        a (torch.Tensor): [..., m, k]
        b (torch.Tensor): [..., k, n]

    Returns:
        torch.Tensor: [..., m, n]

    Raises:
        DimensionError: 내부 차원이 다른 경우
    """
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        error_msg = f"행렬곱 차원 불일치: {tuple(a.shape)} · {tuple(b.shape)}"
        logger.error(error_msg)
        raise DimensionError(error_msg)
    return a @ b


def _mask_bits(mask) -> torch.Tensor:
    # MaskSpec 또는 bool 텐서 모두 허용
    bits = getattr(mask, "bits", mask)
    if not isinstance(bits, torch.Tensor) or bits.dtype != torch.bool:
        raise TypeError("mask 는 MaskSpec 또는 bool 텐서여야 합니다.")
    return bits


def _dense_attention(q, k, v, bits):
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-1, -2)) * scale
    scores = scores.masked_fill(~bits, float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    return probs @ v


def masked_attention(q: torch.Tensor,
                     k: torch.Tensor,
                     v: torch.Tensor,
                     mask,
                     tile_size: Optional[int] = None) -> torch.Tensor:
    """
    마스크 어텐션: softmax(qkᵀ/√d + bias)·v, 가려진 (쿼리, 키) 쌍의 bias 는 −∞

    Args:
        q (torch.Tensor): [..., Lq, d]
        k (torch.Tensor): [..., Lk, d]
        v (torch.Tensor): [..., Lk, dv]
        mask: MaskSpec 또는 [Lq, Lk] bool 텐서 (True = 보임)
        tile_size (Optional[int]): 지정 시 완전히 가려진 타일을 건너뛰는 경로 사용

    Returns:
        torch.Tensor: [..., Lq, dv]

    Raises:
        DimensionError: 헤드 차원 또는 마스크 범위 불일치
        MaskContractError: 보이는 키가 없는 쿼리 행이 존재
    """
    bits = _mask_bits(mask)
    lq, lk = q.shape[-2], k.shape[-2]
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        error_msg = f"어텐션 입력 차원 불일치: q={tuple(q.shape)}, k={tuple(k.shape)}, v={tuple(v.shape)}"
        logger.error(error_msg)
        raise DimensionError(error_msg)
    if tuple(bits.shape) != (lq, lk):
        error_msg = f"마스크 범위 불일치: mask={tuple(bits.shape)}, 필요={(lq, lk)}"
        logger.error(error_msg)
        raise DimensionError(error_msg)

    empty_rows = torch.nonzero(~bits.any(dim=-1)).flatten()
    if empty_rows.numel() > 0:
        error_msg = f"보이는 키가 없는 쿼리 행이 있습니다: {empty_rows[:8].tolist()}"
        logger.error(error_msg)
        raise MaskContractError(error_msg)

    if tile_size is None or tile_size >= max(lq, lk):
        return _dense_attention(q, k, v, bits)

    outputs = []
    for qs in range(0, lq, tile_size):
        q_bits = bits[qs:qs + tile_size]
        key_index = [
            torch.arange(ks, min(ks + tile_size, lk))
            for ks in range(0, lk, tile_size)
            if q_bits[:, ks:ks + tile_size].any()
        ]
        idx = torch.cat(key_index)
        outputs.append(_dense_attention(
            q[..., qs:qs + tile_size, :],
            k.index_select(-2, idx),
            v.index_select(-2, idx),
            q_bits.index_select(1, idx),
        ))
    return torch.cat(outputs, dim=-2)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """
    stop-gradient 연산자: 값은 그대로, 역전파 기여는 0
    """
    return x.detach()


def softmax_cross_entropy(logits: torch.Tensor,
                          targets: torch.Tensor,
                          weight: Optional[torch.Tensor] = None,
                          reduction: str = "mean") -> torch.Tensor:
    """
    가중 교차 엔트로피 −log softmax(logits)[target]

    Args:
        logits (torch.Tensor): [n, V]
        targets (torch.Tensor): [n] 토큰 ID
        weight (Optional[torch.Tensor]): [n] 행별 가중치 (≥ 0), None 이면 1
        reduction (str): "mean" (Σ w·nll / n) 또는 "sum" (Σ w·nll)

    Returns:
        torch.Tensor: 스칼라 손실 (행이 없으면 그래프에 연결된 0)

    Raises:
        IndexError: 타깃이 어휘 범위를 벗어난 경우
        ValueError: 음수 가중치 또는 알 수 없는 reduction
    """
    n, vocab = logits.shape
    targets = targets.long()
    if n == 0:
        return logits.sum() * 0.0
    if bool((targets < 0).any()) or bool((targets >= vocab).any()):
        error_msg = f"타깃 토큰이 어휘 범위 [0, {vocab}) 를 벗어났습니다."
        logger.error(error_msg)
        raise IndexError(error_msg)
    if weight is None:
        weight = torch.ones(n, dtype=logits.dtype)
    elif bool((weight < 0).any()):
        raise ValueError("교차 엔트로피 가중치는 0 이상이어야 합니다.")

    # 최댓값을 빼서 수치 안정화
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(shifted).sum(dim=-1))
    nll = log_norm - shifted.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    total = (weight.to(logits.dtype) * nll).sum()

    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / n
    raise ValueError(f"지원되지 않는 reduction 입니다: {reduction}")


def collect_gradients(loss: torch.Tensor,
                      named_params: Dict[str, torch.Tensor],
                      retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """
    손실에 대한 이름별 그래디언트 수집
    손실에 도달하지 않는 리프의 그래디언트는 0 텐서로 채운다.

    Args:
        loss (torch.Tensor): 스칼라 손실
        named_params (Dict[str, torch.Tensor]): requires_grad 리프 텐서
        retain_graph (bool): 그래프 유지 여부

    Returns:
        Dict[str, torch.Tensor]: 이름별 그래디언트
    """
    names = list(named_params.keys())
    tensors = [named_params[name] for name in names]
    if not loss.requires_grad:
        return {name: torch.zeros_like(t) for name, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=retain_graph)
    return {
        name: (torch.zeros_like(t) if g is None else g)
        for name, t, g in zip(names, tensors, grads)
    }


def grad_global_norm(grads: Dict[str, torch.Tensor]) -> float:
    """
    전체 그래디언트 L2 노름
    """
    if not grads:
        return 0.0
    norms = torch.stack([torch.linalg.vector_norm(g.detach().float()) for g in grads.values()])
    return float(torch.linalg.vector_norm(norms))


def cosine_lr(step: int,
              total_steps: int,
              base_lr: float,
              warmup_steps: int = 0,
              min_lr: float = 0.0) -> float:
    """
    선형 워밍업 후 코사인 감쇠 학습률 (마지막 스텝에서 min_lr)

    Args:
        step (int): 0 부터 시작하는 현재 스텝
        total_steps (int): 전체 스텝 수
        base_lr (float): 최대 학습률
        warmup_steps (int): 워밍업 스텝 수
        min_lr (float): 최소 학습률

    Returns:
        float: 현재 스텝의 학습률
    """
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - 1 - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """
    AdamW 옵티마이저 상태

    모멘트 텐서는 torch.optim.AdamW 내부 상태로 관리되며 파라미터와 형상이 같다.
    """
    optimizer: torch.optim.AdamW
    lr: float
    betas: Tuple[float, float]
    eps: float
    weight_decay: float
    max_grad_norm: Optional[float] = None
    step: int = 0
    last_grad_norm: float = 0.0

    def moments(self, param: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """파라미터의 1차/2차 모멘트 (아직 스텝 전이면 0 텐서)"""
        state = self.optimizer.state.get(param, {})
        zeros = torch.zeros_like(param)
        return state.get("exp_avg", zeros), state.get("exp_avg_sq", zeros)


def create_optim_state(named_params: Dict[str, torch.Tensor],
                       lr: float,
                       betas: Tuple[float, float] = (0.9, 0.999),
                       eps: float = 1e-8,
                       weight_decay: float = 0.0,
                       max_grad_norm: Optional[float] = None) -> OptimState:
    """
    AdamW 상태 생성 (이름 정렬 순서로 파라미터 등록)
    """
    params = [named_params[name] for name in sorted(named_params)]
    optimizer = torch.optim.AdamW(
        params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay, foreach=False
    )
    return OptimState(
        optimizer=optimizer,
        lr=lr,
        betas=tuple(betas),
        eps=eps,
        weight_decay=weight_decay,
        max_grad_norm=max_grad_norm,
    )


def optimizer_step(named_params: Dict[str, torch.Tensor],
                   grads: Dict[str, torch.Tensor],
                   state: OptimState,
                   lr: Optional[float] = None) -> Tuple[Dict[str, torch.Tensor], OptimState]:
    """
    바이어스 보정 AdamW 한 스텝 (파라미터는 제자리 갱신)

    Args:
        named_params (Dict[str, torch.Tensor]): 갱신할 파라미터
        grads (Dict[str, torch.Tensor]): 파라미터와 형상이 같은 그래디언트
        state (OptimState): 옵티마이저 상태
        lr (Optional[float]): 이번 스텝 학습률 (None 이면 state.lr)

    Returns:
        Tuple[Dict[str, torch.Tensor], OptimState]: 갱신된 파라미터와 상태

    Raises:
        DimensionError: 그래디언트 형상 불일치
        NonFiniteError: NaN/Inf 그래디언트 (스텝 거부, 상태 불변)
    """
    for name, param in named_params.items():
        grad = grads.get(name)
        if grad is None or grad.shape != param.shape:
            error_msg = f"그래디언트 형상 불일치: {name}"
            logger.error(error_msg)
            raise DimensionError(error_msg)

    bad = [name for name, g in grads.items() if name in named_params and not bool(torch.isfinite(g).all())]
    if bad:
        error_msg = f"유한하지 않은 그래디언트로 스텝을 거부합니다 (스텝 {state.step}): {bad[:5]}"
        logger.error(error_msg)
        raise NonFiniteError(error_msg)

    if lr is not None:
        state.lr = lr
    for group in state.optimizer.param_groups:
        group["lr"] = state.lr

    for name, param in named_params.items():
        param.grad = grads[name].detach().to(param.dtype).clone()

    if state.max_grad_norm is not None:
        total = torch.nn.utils.clip_grad_norm_(list(named_params.values()), state.max_grad_norm)
        state.last_grad_norm = float(total)
    else:
        state.last_grad_norm = grad_global_norm(grads)

    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    logger.debug(f"옵티마이저 스텝 {state.step} 완료 (lr={state.lr:.3e}, grad_norm={state.last_grad_norm:.4f})")
    return named_params, state
