"""
공통 유틸리티 함수 모듈
"""
import os
import json
import hashlib
import logging
from typing import Any, Dict
from datetime import datetime
from pathlib import Path

import yaml
from dotenv import load_dotenv


# 프로젝트 루트 경로 가져오기
def get_project_root() -> Path:
    """
    프로젝트 루트 디렉토리 경로 반환

    Returns:
        Path: 프로젝트 루트 경로
    """
    # 현재 파일 위치에서 상위로 두 번 올라가면 프로젝트 루트
    return Path(__file__).parent.parent


# 환경 변수 로드 (.env 가 없으면 아무 일도 하지 않음)
load_dotenv(os.path.join(get_project_root(), ".env"))


def get_log_dir() -> str:
    """
    로그 디렉토리 경로 반환 (BDLM_LOG_DIR 환경 변수 우선)

    Returns:
        str: 로그 디렉토리 경로
    """
    return os.getenv("BDLM_LOG_DIR") or os.path.join(get_project_root(), "logs")


# 로깅 설정
def setup_logger(name: str, log_file: str = None, level=logging.INFO) -> logging.Logger:
    """
    로거 설정 함수

    Args:
        name (str): 로거 이름
        log_file (str, optional): 로그 파일 경로. None 이면 로그 디렉토리의 "<name>.log"
        level: 로깅 레벨 (기본값: INFO)

    Returns:
        logging.Logger: 설정된 로거 객체
    """
    if log_file is None:
        log_file = os.path.join(get_log_dir(), f"{name}.log")

    # 로그 디렉토리 생성
    log_dir = os.path.dirname(log_file)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)

    # 로거 설정
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # 이미 핸들러가 있으면 추가하지 않음
    if not logger.handlers:
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        # 파일 핸들러 추가
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

        # 콘솔 핸들러 추가
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    return logger


# 설정 파일 로드
def load_config(config_path: str) -> Dict[str, Any]:
    """
    YAML/JSON 설정 파일 로드 함수
    JSON 문서도 YAML 로 파싱되므로 같은 함수로 처리한다.

    Args:
        config_path (str): 설정 파일 경로

    Returns:
        Dict[str, Any]: 설정 값이 담긴 딕셔너리

    Raises:
        FileNotFoundError: 파일이 없는 경우
        ValueError: 최상위가 매핑이 아닌 경우
    """
    with open(config_path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"설정 파일의 최상위는 매핑이어야 합니다: {config_path}")
    return data


def canonical_json(data: Any) -> str:
    """
    키 정렬된 압축 JSON 문자열 (해시 계산용)
    """
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(data: Dict[str, Any]) -> str:
    """
    설정 딕셔너리의 sha256 해시

    Args:
        data (Dict[str, Any]): 설정 값

    Returns:
        str: 16진수 해시 문자열
    """
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def write_json(path: str, data: Any) -> None:
    """
    JSON 파일 저장 (상위 디렉토리 자동 생성)
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


# 타임스탬프 문자열 생성
def get_timestamp() -> str:
    """
    현재 시간을 기반으로 타임스탬프 문자열 생성

    Returns:
        str: 타임스탬프 문자열 (YYYYMMDD_HHMMSS 형식)
    """
    return datetime.now().strftime("%Y%m%d_%H%M%S")


# 타임스탬프 문자열 생성 (포맷 지정 가능)
def get_timestamp_str(format_str: str = "%Y-%m-%d %H:%M:%S") -> str:
    """
    현재 시간을 기반으로 타임스탬프 문자열 생성 (포맷 지정 가능)

    Args:
        format_str (str): 날짜/시간 포맷 (기본값: "%Y-%m-%d %H:%M:%S")

    Returns:
        str: 지정된 포맷의 타임스탬프 문자열
    """
    return datetime.now().strftime(format_str)
