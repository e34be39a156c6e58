"""
롤아웃 서비스 클라이언트 패키지
"""
from .rollout_service_interface import IRolloutService
from .local_rollout_service import LocalRolloutService
from .socket_rollout_service import SocketRolloutService
from .rollout_service_factory import RolloutServiceFactory

__all__ = ["IRolloutService", "LocalRolloutService", "SocketRolloutService", "RolloutServiceFactory"]
