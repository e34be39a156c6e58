"""
설정 모듈 - 설정 문서를 섹션별 데이터클래스로 변환

문서는 data, model, sft, decode, rl, service, eval, bench 섹션을 모두 가져야 하고,
각 섹션은 해당 데이터클래스의 모든 필드를 가져야 한다. 누락/알 수 없는 필드는
점 경로(예: "rl.clip_eps")를 담은 ConfigError 로 보고한다.
"""
import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import yaml

from core.exceptions import ConfigError
from core.bdlm_model import ModelConfig
from core.diffusion_sft import SFTConfig
from core.decoder import DecodePolicy
from core.dipo_trainer import DiPOConfig
from core.rollout_server import ServiceConfig
from core.benchmark import BenchConfig
from utils.common import load_config, config_hash, setup_logger

# 로거 설정
logger = setup_logger("config")


@dataclass
class DataConfig:
    """
    데이터셋 설정
    """
    digits: int = 3
    size: int = 4000
    held_out: int = 200
    output_blocks: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.digits < 1:
            raise ConfigError(f"data.digits 는 1 이상이어야 합니다: {self.digits}")
        if not 0 <= self.held_out < self.size:
            raise ConfigError(f"data.held_out 은 [0, data.size) 범위여야 합니다: {self.held_out}")
        if self.output_blocks < 1:
            raise ConfigError(f"data.output_blocks 는 1 이상이어야 합니다: {self.output_blocks}")


@dataclass
class EvalConfig:
    """
    평가 설정
    """
    taus: List[float] = field(default_factory=lambda: [0.5, 0.7, 0.9, 0.99])
    max_samples: int = 200
    temperature: float = 0.0
    include_static: bool = True

    def __post_init__(self):
        if any(not 0.0 < tau <= 1.0 for tau in self.taus):
            raise ConfigError(f"eval.taus 의 값은 (0, 1] 범위여야 합니다: {self.taus}")


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "sft": SFTConfig,
    "decode": DecodePolicy,
    "rl": DiPOConfig,
    "service": ServiceConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}

# 중첩 데이터클래스 필드
NESTED = {("rl", "rollout_policy"): DecodePolicy}


@dataclass
class RunConfig:
    """
    실행 설정 전체 (raw 는 해시 계산용 원본 문서)
    """
    data: DataConfig
    model: ModelConfig
    sft: SFTConfig
    decode: DecodePolicy
    rl: DiPOConfig
    service: ServiceConfig
    eval: EvalConfig
    bench: BenchConfig
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _check_fields(path: str, values: Any, cls) -> Dict[str, Any]:
    if not isinstance(values, dict):
        raise ConfigError(f"{path} 섹션은 매핑이어야 합니다.")
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"알 수 없는 설정 필드: {path}.{unknown[0]}")
    missing = [name for name in names if name not in values]
    if missing:
        raise ConfigError(f"설정 필드 누락: {path}.{missing[0]}")
    return dict(values)


def _build_section(name: str, values: Any):
    cls = SECTIONS[name]
    values = _check_fields(name, values, cls)
    for (section, key), nested_cls in NESTED.items():
        if section == name:
            values[key] = _instantiate(f"{name}.{key}", nested_cls, _check_fields(f"{name}.{key}", values[key], nested_cls))
    return _instantiate(name, cls, values)


def _instantiate(path: str, cls, values: Dict[str, Any]):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path} 설정 값이 올바르지 않습니다: {str(e)}")


def build_config(raw: Dict[str, Any]) -> RunConfig:
    """
    설정 문서 → RunConfig

    Raises:
        ConfigError: 누락/알 수 없는 섹션·필드 또는 값 범위 오류 (점 경로 포함)
    """
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"알 수 없는 설정 섹션: {unknown[0]}")
    sections = {}
    for name in SECTIONS:
        if name not in raw:
            raise ConfigError(f"설정 섹션 누락: {name}")
        sections[name] = _build_section(name, raw[name])
    config = RunConfig(raw=copy.deepcopy(raw), **sections)
    if config.model.block_size < 1 or config.model.max_seq_len < config.model.block_size:
        raise ConfigError("model.max_seq_len 은 model.block_size 이상이어야 합니다.")
    return config


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    "a.b=value" 형식 덮어쓰기 적용 (값은 YAML 로 해석)

    Raises:
        ConfigError: 형식 오류 또는 존재하지 않는 경로
    """
    raw = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set 형식은 key=value 이어야 합니다: {item}")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"알 수 없는 설정 필드: {'.'.join(parts[:i + 1])}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"알 수 없는 설정 필드: {key.strip()}")
        try:
            node[parts[-1]] = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{key.strip()} 값을 해석할 수 없습니다: {str(e)}")
        logger.debug(f"설정 덮어쓰기: {key.strip()} = {node[parts[-1]]!r}")
    return raw


def load_run_config(path: str, overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """
    설정 파일 로드 + 덮어쓰기 + 검증

    Raises:
        ConfigError: 파일/필드 오류
    """
    try:
        raw = load_config(path)
    except (OSError, ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"설정 파일을 읽을 수 없습니다 ({path}): {str(e)}")
    return build_config(apply_overrides(raw, overrides or []))
