"""
프로세스 내 롤아웃 서비스 구현 모듈
"""
import logging
from typing import Dict, Optional, Sequence

from core.bdlm_model import ModelParams
from core.decoder import DecodePolicy
from core.rollout_server import GenerateResult, RolloutServer

from .rollout_service_interface import IRolloutService


class LocalRolloutService(IRolloutService):
    """
    같은 프로세스의 RolloutServer 를 직접 호출하는 구현
    가중치 업데이트는 직렬화 없이 텐서를 그대로 넘긴다.
    """

    def __init__(self, server: RolloutServer, logger: Optional[logging.Logger] = None):
        """
        프로세스 내 서비스 초기화

        Args:
            server (RolloutServer): 롤아웃 서비스 본체
            logger (Optional[logging.Logger], optional): 로거. 기본값은 None
        """
        self.server = server
        self.logger = logger or logging.getLogger(__name__)
        self._closed = False

    def generate_batch(self,
                       prompts: Sequence[Sequence[int]],
                       policy: Optional[DecodePolicy] = None,
                       prompt_blocks: Optional[int] = None) -> GenerateResult:
        return self.server.generate_batch(prompts, policy, prompt_blocks)

    def update_weights(self, params: ModelParams) -> int:
        return self.server.update_weights(params)

    def version(self) -> Dict[str, int]:
        return self.server.version()

    def is_available(self) -> bool:
        return not self._closed

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.server.close()
