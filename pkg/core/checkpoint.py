"""
체크포인트 모듈 - 모델 파라미터 바이너리 저장/로드

형식:
    매직 b"BDLM1"
    u64 메타데이터 길이 + UTF-8 JSON (설정, 버전, 텐서 수)
    텐서마다 (이름 정렬 순서): u64 이름 길이, 이름, u64 rank, u64 차원들, f32 LE 원시 데이터
모든 정수는 64비트 리틀 엔디언이다. 롤아웃 서비스의 가중치 블롭도 같은 형식을 쓴다.
"""
import io
import os
import json
import struct
from typing import BinaryIO, Dict

import numpy as np
import torch

from core.exceptions import CheckpointFormatError
from core.bdlm_model import ModelConfig, ModelParams, param_shapes
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("checkpoint")

MAGIC = b"BDLM1"
_U64 = struct.Struct("<Q")


def _write_u64(stream: BinaryIO, value: int) -> None:
    stream.write(_U64.pack(value))


def _read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        error_msg = f"체크포인트가 잘렸습니다 ({what}: {len(data)}/{size} 바이트)"
        logger.error(error_msg)
        raise CheckpointFormatError(error_msg)
    return data


def _read_u64(stream: BinaryIO, what: str) -> int:
    return _U64.unpack(_read_exact(stream, 8, what))[0]


def write_params(stream: BinaryIO, params: ModelParams) -> None:
    """
    스트림에 파라미터 직렬화
    """
    names = params.names()
    meta = json.dumps({
        "config": params.config.to_dict(),
        "version": params.version,
        "tensor_count": len(names),
    }, sort_keys=True).encode("utf-8")
    stream.write(MAGIC)
    _write_u64(stream, len(meta))
    stream.write(meta)
    for name in names:
        array = params[name].detach().to(torch.float32).cpu().numpy().astype("<f4")
        encoded = name.encode("utf-8")
        _write_u64(stream, len(encoded))
        stream.write(encoded)
        _write_u64(stream, array.ndim)
        for dim in array.shape:
            _write_u64(stream, dim)
        stream.write(np.ascontiguousarray(array).tobytes())


def _decode_name(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        error_msg = f"체크포인트 텐서 이름을 해석할 수 없습니다: {str(e)}"
        logger.error(error_msg)
        raise CheckpointFormatError(error_msg)


def read_params(stream: BinaryIO) -> ModelParams:
    """
    스트림에서 파라미터 역직렬화

    Raises:
        CheckpointFormatError: 매직 불일치, 잘린 데이터, 이름/형상 불일치
    """
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        error_msg = f"체크포인트 매직 바이트가 올바르지 않습니다: {magic!r}"
        logger.error(error_msg)
        raise CheckpointFormatError(error_msg)

    meta_len = _read_u64(stream, "메타데이터 길이")
    try:
        meta = json.loads(_read_exact(stream, meta_len, "메타데이터").decode("utf-8"))
        config = ModelConfig(**meta["config"])
        count = int(meta["tensor_count"])
        version = int(meta.get("version", 1))
    except (ValueError, KeyError, TypeError) as e:
        # ValueError: UTF-8/JSON 오류, 잘못된 모델 설정(ConfigError), 정수가 아닌 필드
        error_msg = f"체크포인트 메타데이터를 해석할 수 없습니다: {str(e)}"
        logger.error(error_msg)
        raise CheckpointFormatError(error_msg)

    expected = param_shapes(config)
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        name = _decode_name(_read_exact(stream, _read_u64(stream, "이름 길이"), "이름"))
        rank = _read_u64(stream, "rank")
        shape = tuple(_read_u64(stream, "차원") for _ in range(rank))
        if expected.get(name) != shape:
            error_msg = f"체크포인트 텐서 형상 불일치: {name} {shape} != {expected.get(name)}"
            logger.error(error_msg)
            raise CheckpointFormatError(error_msg)
        numel = int(np.prod(shape)) if shape else 1
        raw = _read_exact(stream, 4 * numel, f"{name} 데이터")
        array = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np.float32))

    if set(tensors) != set(expected):
        error_msg = f"체크포인트 텐서 목록이 설정과 다릅니다 (누락 {sorted(set(expected) - set(tensors))[:3]})"
        logger.error(error_msg)
        raise CheckpointFormatError(error_msg)
    if stream.read(1):
        error_msg = "체크포인트 끝에 알 수 없는 데이터가 있습니다."
        logger.error(error_msg)
        raise CheckpointFormatError(error_msg)
    return ModelParams(config=config, tensors=tensors, version=version)


def params_to_bytes(params: ModelParams) -> bytes:
    """
    메모리 내 체크포인트 블롭 (파일 시스템 미사용)
    """
    buffer = io.BytesIO()
    write_params(buffer, params)
    return buffer.getvalue()


def params_from_bytes(blob: bytes) -> ModelParams:
    """
    메모리 내 체크포인트 블롭 역직렬화
    """
    return read_params(io.BytesIO(blob))


def save_checkpoint(params: ModelParams, path: str) -> int:
    """
    체크포인트 저장 (임시 파일 작성 + fsync 후 교체)

    Args:
        params (ModelParams): 저장할 파라미터
        path (str): 저장 경로

    Returns:
        int: 기록된 바이트 수
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        write_params(f, params)
        f.flush()
        os.fsync(f.fileno())
        size = f.tell()
    os.replace(tmp_path, path)
    logger.info(f"체크포인트 저장 완료: {path} ({size:,} 바이트, 버전 {params.version})")
    return size


def load_checkpoint(path: str) -> ModelParams:
    """
    체크포인트 로드

    Args:
        path (str): 체크포인트 경로

    Returns:
        ModelParams: 저장된 설정과 파라미터

    Raises:
        FileNotFoundError: 파일이 없는 경우
        CheckpointFormatError: 형식 오류
    """
    if not os.path.exists(path):
        error_msg = f"체크포인트 파일이 없습니다: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    with open(path, "rb") as f:
        params = read_params(f)
    logger.info(f"체크포인트 로드 완료: {path}")
    return params


def checkpoint_size(config: ModelConfig) -> int:
    """
    설정으로부터 계산한 체크포인트 바이트 수 (메타데이터 제외 부분은 닫힌 식)
    """
    shapes = param_shapes(config)
    meta = json.dumps({"config": config.to_dict(), "version": 1, "tensor_count": len(shapes)},
                      sort_keys=True).encode("utf-8")
    total = len(MAGIC) + 8 + len(meta)
    for name, shape in shapes.items():
        total += 8 + len(name.encode("utf-8")) + 8 + 8 * len(shape) + 4 * int(np.prod(shape))
    return total
