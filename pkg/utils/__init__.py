"""
블록 확산 언어 모델 후처리 학습 - 유틸리티 패키지
"""
