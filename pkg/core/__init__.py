"""
블록 확산 언어 모델 후처리 학습 - 핵심 기능 패키지
"""
__version__ = "0.1.0"
