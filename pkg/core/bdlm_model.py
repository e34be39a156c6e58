"""
블록 확산 언어 모델 모듈 - 작은 트랜스포머의 파라미터, 순전파, KV 캐시 순전파

위치 임베딩은 호출자가 넘기는 위치 인덱스로 조회하므로, 확장 시퀀스의 NOISY 복사본은
원본 블록의 위치를 그대로 사용한다.
"""
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from core.exceptions import ConfigError, LayoutError
from core.tensor_ops import masked_attention, matmul
from core.block_mask import MaskSpec
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("bdlm_model")


@dataclass
class ModelConfig:
    """
    모델 설정 (기본값은 토이 설정, 토큰 ID 는 tasks.Vocab 과 동일)
    """
    vocab_size: int = 32
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 512
    block_size: int = 8
    mask_token_id: int = 17
    pad_token_id: int = 16
    bos_token_id: int = 14
    eos_token_id: int = 15
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """
        설정 불변식 검사

        Raises:
            ConfigError: d_model 이 n_heads 로 나누어지지 않거나 토큰 ID 가 어휘 밖인 경우
        """
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"model.d_model({self.d_model})은 model.n_heads({self.n_heads})의 배수여야 합니다.")
        if self.block_size < 1:
            raise ConfigError("model.block_size 는 1 이상이어야 합니다.")
        for name in ("mask_token_id", "pad_token_id", "bos_token_id", "eos_token_id"):
            value = getattr(self, name)
            if not 0 <= value < self.vocab_size:
                raise ConfigError(f"model.{name}({value})가 어휘 크기({self.vocab_size}) 범위를 벗어났습니다.")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict:
        return asdict(self)


def _layer_shapes(cfg: ModelConfig, i: int) -> Dict[str, Tuple[int, ...]]:
    d = cfg.d_model
    p = f"layers.{i}."
    return {
        p + "ln1.weight": (d,),
        p + "ln1.bias": (d,),
        p + "attn.wq": (d, d),
        p + "attn.wk": (d, d),
        p + "attn.wv": (d, d),
        p + "attn.wo": (d, d),
        p + "ln2.weight": (d,),
        p + "ln2.bias": (d,),
        p + "mlp.w1": (d, 4 * d),
        p + "mlp.b1": (4 * d,),
        p + "mlp.w2": (4 * d, d),
        p + "mlp.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """
    설정으로부터 결정되는 파라미터 이름과 형상
    """
    shapes = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.max_seq_len, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        shapes.update(_layer_shapes(cfg, i))
    shapes.update({
        "ln_f.weight": (cfg.d_model,),
        "ln_f.bias": (cfg.d_model,),
        "head.weight": (cfg.d_model, cfg.vocab_size),
        "head.bias": (cfg.vocab_size,),
    })
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """
    파라미터 수 닫힌 식: V·d + S·d + L·(12d² + 9d) + 2d + d·V + V
    """
    d, v = cfg.d_model, cfg.vocab_size
    return v * d + cfg.max_seq_len * d + cfg.n_layers * (12 * d * d + 9 * d) + 2 * d + d * v + v


@dataclass
class ModelParams:
    """
    이름별 파라미터 텐서와 버전

    Attributes:
        config (ModelConfig): 파라미터 형상을 결정하는 설정
        tensors (Dict[str, torch.Tensor]): 이름별 텐서
        version (int): 교체될 때마다 증가하는 버전
    """
    config: ModelConfig
    tensors: Dict[str, torch.Tensor]
    version: int = 1

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return sorted(self.tensors)

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["tok_emb"].dtype

    def clone(self, requires_grad: bool = False) -> "ModelParams":
        """그래프에서 분리된 복사본 (버전 유지)"""
        tensors = {
            name: t.detach().clone().requires_grad_(requires_grad)
            for name, t in self.tensors.items()
        }
        return ModelParams(config=self.config, tensors=tensors, version=self.version)

    def to(self, dtype: torch.dtype, requires_grad: bool = False) -> "ModelParams":
        """dtype 변환 복사본 (수치 미분 검증용 float64 등)"""
        tensors = {
            name: t.detach().to(dtype).clone().requires_grad_(requires_grad)
            for name, t in self.tensors.items()
        }
        return ModelParams(config=self.config, tensors=tensors, version=self.version)

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def check_compatible(self, tensors: Dict[str, torch.Tensor]) -> Optional[str]:
        """이름/형상이 일치하지 않으면 설명 문자열, 일치하면 None"""
        expected = param_shapes(self.config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            return f"파라미터 이름 불일치 (누락: {missing[:3]}, 추가: {extra[:3]})"
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                return f"{name} 형상 불일치: {tuple(tensors[name].shape)} != {shape}"
        return None

    def replaced(self, tensors: Dict[str, torch.Tensor]) -> "ModelParams":
        """새 텐서로 교체한 파라미터 (버전 +1)"""
        return ModelParams(config=self.config, tensors=tensors, version=self.version + 1)


def init_params(cfg: ModelConfig) -> ModelParams:
    """
    시드 기반 결정적 파라미터 초기화 (출력 헤드 바이어스 0)

    Args:
        cfg (ModelConfig): 모델 설정

    Returns:
        ModelParams: 버전 1 파라미터
    """
    generator = torch.Generator().manual_seed(cfg.seed)
    residual_std = cfg.init_std / (2 * cfg.n_layers) ** 0.5
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight")):
            tensor = torch.ones(shape)
        elif name.endswith(("bias", ".b1", ".b2")):
            tensor = torch.zeros(shape)
        else:
            std = residual_std if name.endswith(("attn.wo", "mlp.w2")) else cfg.init_std
            tensor = torch.randn(shape, generator=generator) * std
        tensors[name] = tensor.float()
    logger.info(f"파라미터 초기화 완료 (seed={cfg.seed}, 파라미터 수={param_count(cfg):,})")
    return ModelParams(config=cfg, tensors=tensors, version=1)


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    # [..., L, d] -> [..., H, L, dh]
    *lead, length, d = x.shape
    return x.reshape(*lead, length, n_heads, d // n_heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., H, L, dh] -> [..., L, d]
    x = x.transpose(-3, -2)
    *lead, length, heads, dh = x.shape
    return x.reshape(*lead, length, heads * dh)


def _embed(params: ModelParams, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    cfg = params.config
    if tokens.shape[-1] != positions.shape[-1]:
        error_msg = f"토큰 길이({tokens.shape[-1]})와 위치 길이({positions.shape[-1]})가 다릅니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    if positions.numel() and int(positions.max()) >= cfg.max_seq_len:
        error_msg = f"위치 인덱스({int(positions.max())})가 max_seq_len({cfg.max_seq_len}) 이상입니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    return params["tok_emb"][tokens] + params["pos_emb"][positions]


def _mlp(params: ModelParams, p: str, x: torch.Tensor) -> torch.Tensor:
    d = params.config.d_model
    h = F.layer_norm(x, (d,), params[p + "ln2.weight"], params[p + "ln2.bias"])
    h = F.gelu(matmul(h, params[p + "mlp.w1"]) + params[p + "mlp.b1"])
    return matmul(h, params[p + "mlp.w2"]) + params[p + "mlp.b2"]


def _qkv(params: ModelParams, p: str, x: torch.Tensor):
    cfg = params.config
    h = F.layer_norm(x, (cfg.d_model,), params[p + "ln1.weight"], params[p + "ln1.bias"])
    return tuple(_split_heads(matmul(h, params[p + f"attn.{w}"]), cfg.n_heads) for w in ("wq", "wk", "wv"))


def _head(params: ModelParams, x: torch.Tensor) -> torch.Tensor:
    d = params.config.d_model
    x = F.layer_norm(x, (d,), params["ln_f.weight"], params["ln_f.bias"])
    return matmul(x, params["head.weight"]) + params["head.bias"]


def forward(params: ModelParams,
            tokens: torch.Tensor,
            positions: torch.Tensor,
            mask: MaskSpec,
            tile_size: Optional[int] = None) -> torch.Tensor:
    """
    순전파: 토큰 + 위치 인덱스 + 가시성 마스크 → 위치별 어휘 로짓

    Args:
        params (ModelParams): 모델 파라미터 (변경하지 않음)
        tokens (torch.Tensor): [L] 또는 [N, L] 토큰 ID
        positions (torch.Tensor): tokens 와 같은 형상 또는 [L] 위치 인덱스
        mask (MaskSpec): [L, L] 가시성 (배치 내 공유)
        tile_size (Optional[int]): 어텐션 타일 건너뛰기 크기

    Returns:
        torch.Tensor: [L, V] 또는 [N, L, V] 로짓

    Raises:
        LayoutError: 길이 불일치 또는 위치가 max_seq_len 이상
        MaskContractError: 보이는 키가 없는 쿼리 행
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    positions = torch.as_tensor(positions, dtype=torch.long)
    x = _embed(params, tokens, positions)
    for i in range(params.config.n_layers):
        p = f"layers.{i}."
        q, k, v = _qkv(params, p, x)
        attn = masked_attention(q, k, v, mask, tile_size=tile_size)
        x = x + matmul(_merge_heads(attn), params[p + "attn.wo"])
        x = x + _mlp(params, p, x)
    return _head(params, x)


@dataclass
class KvCache:
    """
    커밋된(완전히 디코딩된) 블록의 층별 키/값 캐시

    Attributes:
        keys (List[torch.Tensor]): 층별 [H, length, dh]
        values (List[torch.Tensor]): 층별 [H, length, dh]
        length (int): 커밋된 위치 수 (줄어들지 않음)
    """
    keys: List[torch.Tensor] = field(default_factory=list)
    values: List[torch.Tensor] = field(default_factory=list)
    length: int = 0

    @classmethod
    def empty(cls, params: ModelParams) -> "KvCache":
        cfg = params.config
        shape = (cfg.n_heads, 0, cfg.head_dim)
        return cls(
            keys=[torch.zeros(shape, dtype=params.dtype) for _ in range(cfg.n_layers)],
            values=[torch.zeros(shape, dtype=params.dtype) for _ in range(cfg.n_layers)],
            length=0,
        )

    def extended(self, new_keys: List[torch.Tensor], new_values: List[torch.Tensor], count: int) -> "KvCache":
        """블록을 덧붙인 새 캐시 (기존 캐시는 그대로)"""
        return KvCache(
            keys=[torch.cat([old, new], dim=-2) for old, new in zip(self.keys, new_keys)],
            values=[torch.cat([old, new], dim=-2) for old, new in zip(self.values, new_values)],
            length=self.length + count,
        )


def forward_cached(params: ModelParams,
                   cache: KvCache,
                   block_tokens: torch.Tensor,
                   block_positions: torch.Tensor,
                   intra_mask: Optional[MaskSpec] = None,
                   commit: bool = False) -> Tuple[torch.Tensor, KvCache]:
    """
    KV 캐시 순전파: 커밋된 접두부 전체 + 현재 블록(블록 내부 마스크)에 대한 로짓

    Args:
        params (ModelParams): 모델 파라미터
        cache (KvCache): 접두부 캐시
        block_tokens (torch.Tensor): [B] 현재 블록 토큰
        block_positions (torch.Tensor): [B] cache.length 부터 연속인 위치
        intra_mask (Optional[MaskSpec]): [B, B] 블록 내부 가시성 (기본: 양방향)
        commit (bool): True 면 이 블록의 키/값을 덧붙인 캐시를 반환

    Returns:
        Tuple[torch.Tensor, KvCache]: [B, V] 로짓과 (커밋 시 확장된) 캐시

    Raises:
        LayoutError: 위치가 커밋 영역과 겹치거나 연속이 아닌 경우
    """
    block_tokens = torch.as_tensor(block_tokens, dtype=torch.long)
    block_positions = torch.as_tensor(block_positions, dtype=torch.long)
    b = int(block_tokens.shape[0])
    expected = torch.arange(cache.length, cache.length + b)
    if int(block_positions[0]) < cache.length:
        error_msg = f"블록 위치({int(block_positions[0])})가 커밋된 영역(길이 {cache.length})과 겹칩니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    if not torch.equal(block_positions, expected):
        error_msg = f"블록 위치가 커밋된 길이({cache.length}) 직후부터 연속이어야 합니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)

    intra_bits = torch.ones(b, b, dtype=torch.bool) if intra_mask is None else intra_mask.bits
    bits = torch.cat([torch.ones(b, cache.length, dtype=torch.bool), intra_bits], dim=1)

    x = _embed(params, block_tokens, block_positions)
    new_keys, new_values = [], []
    for i in range(params.config.n_layers):
        p = f"layers.{i}."
        q, k, v = _qkv(params, p, x)
        new_keys.append(k)
        new_values.append(v)
        keys = torch.cat([cache.keys[i], k], dim=-2)
        values = torch.cat([cache.values[i], v], dim=-2)
        attn = masked_attention(q, keys, values, bits)
        x = x + matmul(_merge_heads(attn), params[p + "attn.wo"])
        x = x + _mlp(params, p, x)
    logits = _head(params, x)

    if commit:
        cache = cache.extended(new_keys, new_values, b)
    return logits, cache


def prefill(params: ModelParams, cache: KvCache, tokens: torch.Tensor) -> KvCache:
    """
    깨끗한 프롬프트 블록들을 블록 단위로 캐시에 커밋

    Args:
        params (ModelParams): 모델 파라미터
        cache (KvCache): 시작 캐시
        tokens (torch.Tensor): 길이가 B 의 배수인 프롬프트 토큰

    Returns:
        KvCache: 확장된 캐시
    """
    b = params.config.block_size
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.shape[0] % b != 0:
        raise LayoutError(f"프롬프트 길이({tokens.shape[0]})가 블록 크기({b})의 배수가 아닙니다.")
    for start in range(0, int(tokens.shape[0]), b):
        positions = torch.arange(cache.length, cache.length + b)
        _, cache = forward_cached(params, cache, tokens[start:start + b], positions, commit=True)
    return cache
