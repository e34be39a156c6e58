"""
예외 클래스 모듈 - 도메인별 오류 정의

모든 예외는 내장 ValueError/RuntimeError 를 상속하므로
호출 측에서 기존 방식대로 잡을 수 있다.
"""


class BdlmError(RuntimeError):
    """패키지 공통 기본 예외"""


class DimensionError(ValueError):
    """텐서 차원 불일치"""


class MaskContractError(BdlmError):
    """보이는 키가 하나도 없는 쿼리 행 등 마스크 계약 위반"""


class LayoutError(ValueError):
    """블록 레이아웃 불일치 (길이가 블록 크기의 배수가 아님 등)"""


class TraceError(ValueError):
    """디코딩 트레이스 오류 (디코딩되지 않은 위치, 중복 위치 등)"""


class CheckpointFormatError(ValueError):
    """체크포인트 형식 오류 (매직 바이트, 잘린 파일, 형상 불일치)"""


class NonFiniteError(BdlmError):
    """손실 또는 그래디언트에 NaN/Inf 발생"""


class ConfigError(ValueError):
    """설정 필드 누락/알 수 없는 필드/값 범위 오류"""


class WeightShapeError(ValueError):
    """가중치 업데이트의 이름/형상이 서빙 설정과 다름"""


class ServiceError(BdlmError):
    """롤아웃 서비스 요청 실패"""


class BackpressureError(ServiceError):
    """요청 큐가 가득 참"""
