"""
롤아웃 서비스 모듈 - 모델을 한 번만 로드해 두고 배치 생성과 제자리 가중치 업데이트를 제공

업데이트는 drain-then-swap 방식이다. 새 생성 요청은 대기하고 진행 중인 생성은 이전 가중치로 끝난 뒤
서빙 텐서에 새 값을 제자리 복사한다. 모든 트레이젝토리는 정확히 한 버전으로 생성된다.

소켓 프로토콜: 4바이트 빅 엔디언 길이 + UTF-8 JSON {"kind": ..., "body": ...}
"""
import json
import base64
import struct
import threading
import socketserver
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import torch

from core.exceptions import (
    BackpressureError, CheckpointFormatError, LayoutError, ServiceError, WeightShapeError,
)
from core.bdlm_model import ModelParams
from core.checkpoint import load_checkpoint, params_from_bytes
from core.decoder import DecodePolicy, Trajectory, generate, trajectory_to_json
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("rollout_server")

HEADER = struct.Struct(">I")
MAX_MESSAGE_BYTES = 1 << 30

GENERATE = "GENERATE"
UPDATE_WEIGHTS = "UPDATE_WEIGHTS"
VERSION = "VERSION"
SHUTDOWN = "SHUTDOWN"
ERROR = "ERROR"
REPLY_SUFFIX = "_REPLY"


@dataclass
class ServiceConfig:
    """
    롤아웃 서비스 설정

    Attributes:
        transport (str): "local" (프로세스 내) 또는 "socket"
        host (str): 바인드 주소
        port (int): 바인드 포트 (0 이면 임의 포트)
        checkpoint (Optional[str]): serve 명령에서 로드할 체크포인트
        max_pending (int): 동시에 처리 가능한 요청 수 (초과 시 BackpressureError)
        lease_timeout (float): 가중치 임대 대기 한도 (초)
        workers (int): 배치 내 병렬 생성 스레드 수
        client_timeout (float): 소켓 클라이언트 타임아웃 (초)
    """
    transport: str = "local"
    host: str = "127.0.0.1"
    port: int = 0
    checkpoint: Optional[str] = None
    max_pending: int = 64
    lease_timeout: float = 60.0
    workers: int = 1
    client_timeout: float = 120.0


class WeightLease:
    """
    쓰기 우선 읽기/쓰기 임대

    생성은 읽기 임대를 잡고, 업데이트는 대기 중인 순간부터 새 읽기 임대를 막은 뒤
    진행 중인 읽기가 모두 끝나면 배타적으로 교체한다.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self, timeout: Optional[float] = None):
        with self._cond:
            if not self._cond.wait_for(lambda: not self._writer and self._waiting_writers == 0, timeout):
                raise ServiceError("가중치 읽기 임대 대기 시간이 초과되었습니다.")
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self, timeout: Optional[float] = None):
        with self._cond:
            self._waiting_writers += 1
            try:
                acquired = self._cond.wait_for(lambda: not self._writer and self._readers == 0, timeout)
            finally:
                self._waiting_writers -= 1
            if not acquired:
                self._cond.notify_all()
                raise ServiceError("가중치 교체 임대 대기 시간이 초과되었습니다.")
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass
class GenerateResult:
    """
    배치 생성 결과 (입력 순서 유지, 항목별 오류)
    """
    trajectories: List[Optional[Trajectory]] = field(default_factory=list)
    errors: List[Optional[str]] = field(default_factory=list)

    @property
    def versions(self) -> List[Optional[int]]:
        return [t.version if t is not None else None for t in self.trajectories]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trajectories": [trajectory_to_json(t) if t is not None else None for t in self.trajectories],
            "errors": list(self.errors),
            "versions": self.versions,
        }


# 서빙 호환성 판단에서 제외되는 설정 필드
_NON_SERVING_FIELDS = {"seed", "init_std"}


def _serving_signature(params: ModelParams) -> Dict[str, Any]:
    return {k: v for k, v in params.config.to_dict().items() if k not in _NON_SERVING_FIELDS}


class RolloutServer:
    """
    롤아웃 서비스 본체 (전송 계층과 무관)

    생성 시점에 파라미터를 한 번 로드해 서비스 소유 텐서로 보관한다.
    """

    def __init__(self,
                 params: ModelParams,
                 config: Optional[ServiceConfig] = None,
                 policy: Optional[DecodePolicy] = None):
        """
        롤아웃 서비스 초기화

        Args:
            params (ModelParams): 서빙할 파라미터 (서비스가 복사해 소유)
            config (Optional[ServiceConfig]): 서비스 설정
            policy (Optional[DecodePolicy]): 기본 디코딩 정책
        """
        self.config = config or ServiceConfig()
        self.default_policy = policy or DecodePolicy()
        self._lease = WeightLease()
        self._slots = threading.BoundedSemaphore(self.config.max_pending)
        self._stats_lock = threading.Lock()
        self._closed = False

        self._params = params.clone()
        self._version = 1
        self._params.version = self._version
        self._loads = 1
        self._requests: Dict[str, int] = {GENERATE: 0, UPDATE_WEIGHTS: 0, VERSION: 0, "rejected": 0}
        self._generations: Dict[int, int] = {}
        logger.info(f"롤아웃 서비스 모델 로드 완료 (버전 {self._version})")

    @classmethod
    def from_checkpoint(cls, path: str, config: Optional[ServiceConfig] = None,
                        policy: Optional[DecodePolicy] = None) -> "RolloutServer":
        return cls(load_checkpoint(path), config, policy)

    @contextmanager
    def _slot(self, kind: str):
        if self._closed:
            raise ServiceError("롤아웃 서비스가 종료되었습니다.")
        if not self._slots.acquire(blocking=False):
            error_msg = f"요청 큐가 가득 찼습니다 (최대 {self.config.max_pending}개)"
            logger.warning(error_msg)
            raise BackpressureError(error_msg)
        try:
            with self._stats_lock:
                self._requests[kind] = self._requests.get(kind, 0) + 1
            yield
        finally:
            self._slots.release()

    @property
    def params_config(self):
        return self._params.config

    def _generate_one(self, prompt: Sequence[int], policy: DecodePolicy,
                      prompt_blocks: Optional[int]) -> Tuple[Optional[Trajectory], Optional[str]]:
        try:
            with self._lease.read(self.config.lease_timeout):
                trajectory = generate(self._params, prompt, policy, prompt_blocks=prompt_blocks)
        except (LayoutError, ValueError, ServiceError) as e:
            logger.warning(f"프롬프트 생성 실패 (배치는 계속): {str(e)}")
            return None, str(e)
        with self._stats_lock:
            self._generations[trajectory.version] = self._generations.get(trajectory.version, 0) + 1
        return trajectory, None

    def generate_batch(self,
                       prompts: Sequence[Sequence[int]],
                       policy: Optional[DecodePolicy] = None,
                       prompt_blocks: Optional[int] = None) -> GenerateResult:
        """
        배치 생성 (각 트레이젝토리는 단일 가중치 버전으로 생성)

        항목 i 의 샘플링 시드는 policy.seed + i 이다.

        Args:
            prompts (Sequence[Sequence[int]]): 프롬프트 토큰 목록
            policy (Optional[DecodePolicy]): 디코딩 정책 (없으면 기본 정책)
            prompt_blocks (Optional[int]): 프롬프트 영역 블록 수 고정

        Returns:
            GenerateResult: 입력 순서의 트레이젝토리와 항목별 오류
        """
        policy = policy or self.default_policy
        with self._slot(GENERATE):
            jobs = [(prompt, policy.replace(seed=policy.seed + i)) for i, prompt in enumerate(prompts)]
            if self.config.workers > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                    outcomes = list(pool.map(lambda job: self._generate_one(job[0], job[1], prompt_blocks), jobs))
            else:
                outcomes = [self._generate_one(prompt, item_policy, prompt_blocks) for prompt, item_policy in jobs]
        return GenerateResult(trajectories=[t for t, _ in outcomes], errors=[e for _, e in outcomes])

    def update_weights(self, update: Union[bytes, ModelParams]) -> int:
        """
        제자리 가중치 업데이트 (파일 시스템 미사용)

        Args:
            update (Union[bytes, ModelParams]): 체크포인트 형식 블롭 또는 프로세스 내 파라미터

        Returns:
            int: 새 버전

        Raises:
            WeightShapeError: 이름/형상/설정 불일치 (이전 버전 유지)
            CheckpointFormatError: 블롭 형식 오류 (이전 버전 유지)
        """
        with self._slot(UPDATE_WEIGHTS):
            try:
                new_params = params_from_bytes(update) if isinstance(update, (bytes, bytearray)) else update
            except CheckpointFormatError:
                with self._stats_lock:
                    self._requests["rejected"] += 1
                raise
            mismatch = self._params.check_compatible(new_params.tensors)
            if mismatch is None and _serving_signature(new_params) != _serving_signature(self._params):
                mismatch = "서빙 설정과 모델 설정이 다릅니다."
            if mismatch:
                with self._stats_lock:
                    self._requests["rejected"] += 1
                error_msg = f"가중치 업데이트 거부 (버전 {self._version} 유지): {mismatch}"
                logger.warning(error_msg)
                raise WeightShapeError(error_msg)

            with self._lease.write(self.config.lease_timeout):
                with torch.no_grad():
                    for name, tensor in self._params.tensors.items():
                        tensor.copy_(new_params.tensors[name])
                self._version += 1
                self._params.version = self._version
                version = self._version
        logger.debug(f"가중치 업데이트 완료: 버전 {version}")
        return version

    def version(self) -> Dict[str, int]:
        """현재 버전과 모델 로드 횟수"""
        with self._stats_lock:
            self._requests[VERSION] += 1
        return {"version": self._version, "loads": self._loads}

    def stats(self) -> Dict[str, Any]:
        with self._stats_lock:
            return {
                "version": self._version,
                "loads": self._loads,
                "requests": dict(self._requests),
                "generations_per_version": dict(self._generations),
            }

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            logger.info(f"롤아웃 서비스 종료 (최종 버전 {self._version}, 로드 {self._loads}회)")


def encode_message(kind: str, body: Any) -> bytes:
    """
    메시지 인코딩: 4바이트 빅 엔디언 길이 + UTF-8 JSON
    """
    payload = json.dumps({"kind": kind, "body": body}, ensure_ascii=False).encode("utf-8")
    return HEADER.pack(len(payload)) + payload


def read_message(stream: BinaryIO) -> Optional[Dict[str, Any]]:
    """
    메시지 하나 읽기

    Returns:
        Optional[Dict[str, Any]]: {"kind", "body"} 또는 정상 종료(EOF) 시 None

    Raises:
        ServiceError: 잘린 메시지, 과도한 길이, JSON 오류
    """
    header = stream.read(HEADER.size)
    if not header:
        return None
    if len(header) != HEADER.size:
        raise ServiceError("메시지 헤더가 잘렸습니다.")
    (length,) = HEADER.unpack(header)
    if length > MAX_MESSAGE_BYTES:
        raise ServiceError(f"메시지 길이가 너무 큽니다: {length}")
    payload = stream.read(length)
    if len(payload) != length:
        raise ServiceError(f"메시지 본문이 잘렸습니다 ({len(payload)}/{length} 바이트)")
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ServiceError(f"메시지 JSON 을 해석할 수 없습니다: {str(e)}")
    if not isinstance(message, dict) or "kind" not in message:
        raise ServiceError("메시지에 kind 필드가 없습니다.")
    return message


def error_body(exc: BaseException) -> Dict[str, str]:
    return {"type": type(exc).__name__, "message": str(exc)}


def dispatch(rollout: RolloutServer, message: Dict[str, Any]) -> Tuple[str, Any]:
    """
    요청 하나를 처리해 (응답 종류, 본문) 반환
    처리 중 발생한 예외는 ERROR 응답으로 바꾼다.
    """
    kind = message.get("kind")
    body = message.get("body") or {}
    try:
        if kind == GENERATE:
            policy_body = body.get("policy")
            policy = rollout.default_policy.replace(**policy_body) if policy_body else None
            result = rollout.generate_batch(body.get("prompts", []), policy, body.get("prompt_blocks"))
            return GENERATE + REPLY_SUFFIX, result.to_dict()
        if kind == UPDATE_WEIGHTS:
            blob = base64.b64decode(body["blob"])
            return UPDATE_WEIGHTS + REPLY_SUFFIX, {"version": rollout.update_weights(blob)}
        if kind == VERSION:
            return VERSION + REPLY_SUFFIX, rollout.version()
        if kind == SHUTDOWN:
            return SHUTDOWN + REPLY_SUFFIX, rollout.version()
        error_msg = f"알 수 없는 메시지 종류입니다: {kind}"
        logger.warning(error_msg)
        return ERROR, {"type": "UnknownKind", "message": error_msg}
    except Exception as e:
        logger.error(f"{kind} 요청 처리 중 오류 발생: {str(e)}")
        return ERROR, error_body(e)


class RolloutRequestHandler(socketserver.StreamRequestHandler):
    """
    연결 하나에서 요청을 순서대로 처리 (요청마다 정확히 한 응답)
    """

    def handle(self):
        while True:
            try:
                message = read_message(self.rfile)
            except ServiceError as e:
                self._reply(ERROR, error_body(e))
                break
            if message is None:
                break
            kind, body = dispatch(self.server.rollout, message)
            self._reply(kind, body)
            if kind == SHUTDOWN + REPLY_SUFFIX:
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                break

    def _reply(self, kind: str, body: Any) -> None:
        try:
            self.wfile.write(encode_message(kind, body))
            self.wfile.flush()
        except OSError as e:
            logger.warning(f"응답 전송 실패: {str(e)}")


class RolloutSocketServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, address: Tuple[str, int], rollout: RolloutServer):
        self.rollout = rollout
        super().__init__(address, RolloutRequestHandler)


class ServiceHandle:
    """
    실행 중인 소켓 서비스 핸들
    """

    def __init__(self, server: RolloutSocketServer, rollout: RolloutServer):
        self.server = server
        self.rollout = rollout
        self.address: Tuple[str, int] = server.server_address[:2]
        self._thread = threading.Thread(target=server.serve_forever, name="rollout-server", daemon=True)
        self._thread.start()
        self._stopped = False

    def wait(self, timeout: Optional[float] = None) -> None:
        self._thread.join(timeout)

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self.server.shutdown()
        self.server.server_close()
        self.rollout.close()
        self._thread.join(timeout=5.0)
        logger.info(f"소켓 서비스 중지: {self.address[0]}:{self.address[1]}")


def serve(config: ServiceConfig,
          params: Optional[ModelParams] = None,
          policy: Optional[DecodePolicy] = None) -> ServiceHandle:
    """
    소켓 서비스 시작 (모델은 한 번만 로드)

    Args:
        config (ServiceConfig): 서비스 설정 (params 가 없으면 config.checkpoint 로드)
        params (Optional[ModelParams]): 서빙할 파라미터
        policy (Optional[DecodePolicy]): 기본 디코딩 정책

    Returns:
        ServiceHandle: 실행 중인 서비스

    Raises:
        ServiceError: 바인드 또는 로드 실패
    """
    try:
        if params is not None:
            rollout = RolloutServer(params, config, policy)
        elif config.checkpoint:
            rollout = RolloutServer.from_checkpoint(config.checkpoint, config, policy)
        else:
            raise ValueError("service.checkpoint 가 지정되지 않았습니다.")
    except (OSError, ValueError) as e:
        error_msg = f"롤아웃 서비스 시작 실패 (모델 로드): {str(e)}"
        logger.error(error_msg)
        raise ServiceError(error_msg)

    try:
        server = RolloutSocketServer((config.host, config.port), rollout)
    except OSError as e:
        error_msg = f"롤아웃 서비스 시작 실패 ({config.host}:{config.port} 바인드): {str(e)}"
        logger.error(error_msg)
        raise ServiceError(error_msg)

    handle = ServiceHandle(server, rollout)
    logger.info(f"롤아웃 서비스 시작: {handle.address[0]}:{handle.address[1]}")
    return handle
