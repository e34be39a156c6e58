"""
롤아웃 서비스 팩토리 모듈

이 모듈은 프로세스 내/소켓 롤아웃 서비스 클라이언트를 생성하고 캐시하는 팩토리 클래스를 제공합니다.
"""
import logging
from typing import Dict, List, Optional

from core.bdlm_model import ModelParams
from core.decoder import DecodePolicy
from core.rollout_server import RolloutServer, ServiceConfig

from .rollout_service_interface import IRolloutService
from .local_rollout_service import LocalRolloutService
from .socket_rollout_service import SocketRolloutService


class RolloutServiceFactory:
    """
    롤아웃 서비스 팩토리

    "local" 은 주어진 파라미터를 한 번 로드한 프로세스 내 서비스,
    "socket" 은 config.host:config.port 의 외부 서비스에 접속하는 클라이언트입니다.
    """

    SUPPORTED = ("local", "socket")

    def __init__(self, config: ServiceConfig, logger: Optional[logging.Logger] = None):
        """
        롤아웃 서비스 팩토리 초기화

        Args:
            config (ServiceConfig): 서비스 설정
            logger (Optional[logging.Logger], optional): 로거. 기본값은 None
        """
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.services: Dict[str, IRolloutService] = {}  # 서비스 인스턴스 캐시

    def get_service(self,
                    service_name: Optional[str] = None,
                    params: Optional[ModelParams] = None,
                    policy: Optional[DecodePolicy] = None) -> Optional[IRolloutService]:
        """
        지정된 이름의 롤아웃 서비스를 반환합니다.

        Args:
            service_name (Optional[str]): "local" 또는 "socket" (없으면 config.transport)
            params (Optional[ModelParams]): local 서비스가 로드할 파라미터
            policy (Optional[DecodePolicy]): local 서비스의 기본 디코딩 정책

        Returns:
            Optional[IRolloutService]: 서비스 인스턴스 또는 None
        """
        service_name = service_name or self.config.transport
        if service_name in self.services:
            return self.services[service_name]

        service = None
        if service_name == "local":
            if params is None:
                self.logger.error("local 롤아웃 서비스에는 초기 파라미터가 필요합니다.")
                return None
            service = LocalRolloutService(RolloutServer(params, self.config, policy), logger=self.logger)
        elif service_name == "socket":
            service = SocketRolloutService(self.config.host, self.config.port,
                                           timeout=self.config.client_timeout, logger=self.logger)
        else:
            self.logger.error(f"지원되지 않는 롤아웃 서비스: {service_name}")
            return None

        self.services[service_name] = service
        return service

    def list_available_services(self) -> List[str]:
        """
        현재 캐시된 서비스 중 사용 가능한 서비스 목록을 반환합니다.
        """
        return [name for name, service in self.services.items() if service.is_available()]

    def close_all(self) -> None:
        for service in self.services.values():
            service.close()
        self.services.clear()
