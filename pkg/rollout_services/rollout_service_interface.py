"""
롤아웃 서비스 인터페이스 모듈
"""
from abc import ABC, abstractmethod
from typing import Dict, Optional, Sequence

from core.bdlm_model import ModelParams
from core.decoder import DecodePolicy
from core.rollout_server import GenerateResult


class IRolloutService(ABC):
    """
    롤아웃 서비스 인터페이스
    트레이너는 이 인터페이스만 사용하므로 프로세스 내 서비스와 소켓 서비스를 바꿔 쓸 수 있습니다.
    """

    @abstractmethod
    def generate_batch(self,
                       prompts: Sequence[Sequence[int]],
                       policy: Optional[DecodePolicy] = None,
                       prompt_blocks: Optional[int] = None) -> GenerateResult:
        """
        프롬프트 배치에 대한 트레이젝토리를 생성합니다.

        Args:
            prompts (Sequence[Sequence[int]]): 프롬프트 토큰 목록
            policy (Optional[DecodePolicy]): 디코딩 정책
            prompt_blocks (Optional[int]): 프롬프트 영역 블록 수

        Returns:
            GenerateResult: 입력 순서의 트레이젝토리와 항목별 오류
        """
        pass

    @abstractmethod
    def update_weights(self, params: ModelParams) -> int:
        """
        서빙 가중치를 제자리에서 교체합니다.

        Args:
            params (ModelParams): 새 파라미터

        Returns:
            int: 새 버전
        """
        pass

    @abstractmethod
    def version(self) -> Dict[str, int]:
        """
        현재 버전과 모델 로드 횟수를 반환합니다.

        Returns:
            Dict[str, int]: {"version", "loads"}
        """
        pass

    @abstractmethod
    def is_available(self) -> bool:
        """
        서비스가 사용 가능한지 확인합니다.

        Returns:
            bool: 서비스 사용 가능 여부
        """
        pass

    @abstractmethod
    def close(self) -> None:
        """
        클라이언트 자원을 정리합니다.
        """
        pass
