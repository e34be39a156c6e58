"""
소켓 롤아웃 서비스 클라이언트 구현 모듈
"""
import base64
import socket
import logging
import threading
from typing import Any, Dict, Optional, Sequence

from core.exceptions import (
    BackpressureError, CheckpointFormatError, ServiceError, WeightShapeError,
)
from core.bdlm_model import ModelParams
from core.checkpoint import params_to_bytes
from core.decoder import DecodePolicy, trajectory_from_json
from core.rollout_server import (
    ERROR, GENERATE, SHUTDOWN, UPDATE_WEIGHTS, VERSION, GenerateResult, encode_message, read_message,
)

from .rollout_service_interface import IRolloutService

# 같은 요청을 두 번 보내도 결과가 같은 종류 (응답 유실 시 재시도 가능)
IDEMPOTENT_KINDS = frozenset({GENERATE, VERSION})

# 오류 응답의 type 필드 → 클라이언트 측 예외
_ERROR_TYPES = {
    "BackpressureError": BackpressureError,
    "WeightShapeError": WeightShapeError,
    "CheckpointFormatError": CheckpointFormatError,
}


class SocketRolloutService(IRolloutService):
    """
    길이 접두 JSON 프로토콜로 외부 롤아웃 서비스에 접속하는 클라이언트
    전송 실패 시 다시 연결해 한 번 재시도한다.
    """

    def __init__(self, host: str, port: int, timeout: float = 120.0, logger: Optional[logging.Logger] = None):
        """
        소켓 클라이언트 초기화

        Args:
            host (str): 서비스 주소
            port (int): 서비스 포트
            timeout (float): 요청 타임아웃 (초)
            logger (Optional[logging.Logger], optional): 로거. 기본값은 None
        """
        self.host = host
        self.port = port
        self.timeout = timeout
        self.logger = logger or logging.getLogger(__name__)
        self._sock: Optional[socket.socket] = None
        self._stream = None
        self._lock = threading.Lock()

    def _connect(self) -> None:
        self._disconnect()
        self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self._stream = self._sock.makefile("rwb")

    def _disconnect(self) -> None:
        for closable in (self._stream, self._sock):
            if closable is not None:
                try:
                    closable.close()
                except OSError:
                    pass
        self._stream = None
        self._sock = None

    def _send(self, kind: str, body: Any) -> None:
        if self._stream is None:
            self._connect()
        self._stream.write(encode_message(kind, body))
        self._stream.flush()

    def _receive(self) -> Dict[str, Any]:
        reply = read_message(self._stream)
        if reply is None:
            raise ServiceError("서비스가 응답 없이 연결을 닫았습니다.")
        return reply

    def _exchange(self, kind: str, body: Any) -> Dict[str, Any]:
        self._send(kind, body)
        return self._receive()

    def request(self, kind: str, body: Any) -> Any:
        """
        요청 하나를 보내고 응답 본문 반환

        전송 실패 시 다시 연결해 한 번 재시도한다. UPDATE_WEIGHTS/SHUTDOWN 은 요청이 이미
        전송된 뒤 응답만 잃은 경우 서비스에 적용됐을 수 있으므로 재시도하지 않는다.

        Raises:
            ServiceError: 재시도 후에도 실패하거나 서비스가 오류를 응답한 경우
        """
        with self._lock:
            sent = False
            try:
                self._send(kind, body)
                sent = True
                reply = self._receive()
            except (OSError, ServiceError) as e:
                self._disconnect()
                if sent and kind not in IDEMPOTENT_KINDS:
                    error_msg = f"{kind} 요청은 전송됐지만 응답을 받지 못했습니다 (재시도하지 않음): {str(e)}"
                    self.logger.error(error_msg)
                    raise ServiceError(error_msg)
                self.logger.warning(f"{kind} 요청 실패, 다시 연결해 재시도합니다: {str(e)}")
                try:
                    reply = self._exchange(kind, body)
                except (OSError, ServiceError) as retry_error:
                    self._disconnect()
                    error_msg = f"{kind} 요청 재시도 실패: {str(retry_error)}"
                    self.logger.error(error_msg)
                    raise ServiceError(error_msg)

        if reply.get("kind") == ERROR:
            detail = reply.get("body") or {}
            error_type = _ERROR_TYPES.get(detail.get("type"), ServiceError)
            raise error_type(detail.get("message", "알 수 없는 서비스 오류"))
        return reply.get("body")

    def generate_batch(self,
                       prompts: Sequence[Sequence[int]],
                       policy: Optional[DecodePolicy] = None,
                       prompt_blocks: Optional[int] = None) -> GenerateResult:
        body = {
            "prompts": [list(map(int, p)) for p in prompts],
            "policy": policy.to_dict() if policy is not None else None,
            "prompt_blocks": prompt_blocks,
        }
        reply = self.request(GENERATE, body)
        return GenerateResult(
            trajectories=[trajectory_from_json(t) if t is not None else None for t in reply["trajectories"]],
            errors=list(reply["errors"]),
        )

    def update_weights(self, params: ModelParams) -> int:
        blob = base64.b64encode(params_to_bytes(params)).decode("ascii")
        return int(self.request(UPDATE_WEIGHTS, {"blob": blob})["version"])

    def version(self) -> Dict[str, int]:
        return self.request(VERSION, {})

    def shutdown(self) -> Dict[str, int]:
        """서비스 종료 요청"""
        reply = self.request(SHUTDOWN, {})
        self._disconnect()
        return reply

    def is_available(self) -> bool:
        try:
            self.version()
            return True
        except ServiceError:
            return False

    def close(self) -> None:
        with self._lock:
            self._disconnect()
