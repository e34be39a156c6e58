"""
검증 가능한 합성 수학 과제 모듈 - 문자 단위 어휘, 자릿수 덧셈 데이터셋, 이진 보상 검증기

풀이는 가장 낮은 자리부터 열마다 "x+y+c=s" 를 적고 마지막에 "#정답" 을 붙인다.
예) 123+989= → "3+9+0=12 2+8+1=11 1+9+1=11 #1112" + EOS
"""
import os
import re
import json
import random
from dataclasses import dataclass, asdict
from typing import Dict, List, Sequence, Tuple

import torch

from core.exceptions import LayoutError
from core.block_mask import BlockLayout
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("tasks")

_ANSWER_PATTERN = re.compile(r"\d+")


class Vocab:
    """
    고정 문자 어휘: 숫자 0-9, '+', '=', '#', 공백, BOS, EOS, PAD, MASK
    """
    TEXT_SYMBOLS = list("0123456789") + ["+", "=", "#", " "]
    BOS = len(TEXT_SYMBOLS)
    EOS = BOS + 1
    PAD = BOS + 2
    MASK = BOS + 3
    SIZE = MASK + 1

    _to_id: Dict[str, int] = {ch: i for i, ch in enumerate(TEXT_SYMBOLS)}

    @classmethod
    def encode(cls, text: str, bos: bool = False, eos: bool = False) -> List[int]:
        """
        텍스트를 토큰 ID 로 변환

        Raises:
            ValueError: 어휘에 없는 문자
        """
        ids = [cls.BOS] if bos else []
        for ch in text:
            if ch not in cls._to_id:
                error_msg = f"어휘에 없는 문자입니다: {ch!r}"
                logger.error(error_msg)
                raise ValueError(error_msg)
            ids.append(cls._to_id[ch])
        if eos:
            ids.append(cls.EOS)
        return ids

    @classmethod
    def decode(cls, ids: Sequence[int], stop_at_eos: bool = True) -> str:
        """
        토큰 ID 를 텍스트로 변환 (BOS/PAD 는 건너뛰고, 첫 EOS 에서 멈춤)
        MASK 나 어휘 밖 ID 는 '?' 로 표시한다.
        """
        chars = []
        for token in ids:
            token = int(token)
            if token == cls.EOS and stop_at_eos:
                break
            if token in (cls.BOS, cls.PAD, cls.EOS):
                continue
            chars.append(cls.TEXT_SYMBOLS[token] if 0 <= token < len(cls.TEXT_SYMBOLS) else "?")
        return "".join(chars)


@dataclass
class TaskSample:
    """
    덧셈 과제 샘플

    Attributes:
        a (int): 첫 번째 피연산자
        b (int): 두 번째 피연산자
        digits (int): 풀이 열 수
        prompt (str): "a+b="
        answer (int): 정답
        solution (str): 자리별 올림 풀이 ("#정답" 으로 끝남, EOS 제외)
    """
    a: int
    b: int
    digits: int
    prompt: str
    answer: int
    solution: str

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TaskSample":
        return cls(**data)


def worked_solution(a: int, b: int, digits: int) -> str:
    """
    가장 낮은 자리부터 올림을 적는 풀이 문자열
    """
    columns = []
    carry = 0
    for i in range(digits):
        x = (a // 10 ** i) % 10
        y = (b // 10 ** i) % 10
        s = x + y + carry
        columns.append(f"{x}+{y}+{carry}={s}")
        carry = s // 10
    return " ".join(columns) + f" #{a + b}"


def make_sample(a: int, b: int, digits: int) -> TaskSample:
    return TaskSample(a=a, b=b, digits=digits, prompt=f"{a}+{b}=", answer=a + b,
                      solution=worked_solution(a, b, digits))


def gen_dataset(seed: int, n: int, digits: int) -> List[TaskSample]:
    """
    중복 없는 균등 샘플링 덧셈 문제 생성

    Args:
        seed (int): 난수 시드
        n (int): 문제 수
        digits (int): 피연산자 최대 자릿수 (≥ 1)

    Returns:
        List[TaskSample]: 결정적 풀이가 붙은 샘플 목록

    Raises:
        ValueError: digits < 1 또는 n 이 서로 다른 문제 수를 초과
    """
    if digits < 1:
        raise ValueError(f"digits 는 1 이상이어야 합니다: {digits}")
    base = 10 ** digits
    total = base * base
    if n > total:
        error_msg = f"요청한 문제 수({n})가 서로 다른 {digits}자리 덧셈 문제 수({total})를 초과합니다."
        logger.error(error_msg)
        raise ValueError(error_msg)
    picks = random.Random(seed).sample(range(total), n)
    samples = [make_sample(i // base, i % base, digits) for i in picks]
    logger.info(f"데이터셋 생성 완료: {n}개 ({digits}자리, seed={seed})")
    return samples


def split_dataset(samples: List[TaskSample], n_eval: int, seed: int) -> Tuple[List[TaskSample], List[TaskSample]]:
    """
    시드 기반 학습/검증 분할

    Returns:
        Tuple[List[TaskSample], List[TaskSample]]: (학습, 검증)
    """
    if not 0 <= n_eval <= len(samples):
        raise ValueError(f"검증 세트 크기가 범위를 벗어났습니다: {n_eval}")
    order = torch.randperm(len(samples), generator=torch.Generator().manual_seed(seed)).tolist()
    held_out = set(order[:n_eval])
    train = [s for i, s in enumerate(samples) if i not in held_out]
    evaluation = [samples[i] for i in order[:n_eval]]
    return train, evaluation


def save_dataset(samples: List[TaskSample], path: str) -> None:
    """
    JSON-lines 데이터셋 저장
    """
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample.to_dict(), ensure_ascii=False) + "\n")
    logger.info(f"데이터셋 저장 완료: {path} ({len(samples)}개)")


def load_dataset(path: str) -> List[TaskSample]:
    """
    JSON-lines 데이터셋 로드
    """
    if not os.path.exists(path):
        error_msg = f"데이터셋 파일이 없습니다: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    with open(path, "r", encoding="utf-8") as f:
        samples = [TaskSample.from_dict(json.loads(line)) for line in f if line.strip()]
    logger.info(f"데이터셋 로드 완료: {path} ({len(samples)}개)")
    return samples


def prompt_tokens(sample: TaskSample) -> List[int]:
    """BOS + 프롬프트"""
    return Vocab.encode(sample.prompt, bos=True)


def target_tokens(sample: TaskSample) -> List[int]:
    """풀이 + EOS"""
    return Vocab.encode(sample.solution, eos=True)


def max_prompt_len(digits: int) -> int:
    """BOS + 'a' + '+' + 'b' + '=' 의 최대 길이"""
    return 1 + 2 * digits + 2


def task_layout(digits: int, block_size: int, output_blocks: int) -> BlockLayout:
    """
    주어진 자릿수 문제 전체를 담는 고정 레이아웃
    """
    prompt_blocks = -(-max_prompt_len(digits) // block_size)
    return BlockLayout(block_size=block_size, prompt_blocks=prompt_blocks, output_blocks=output_blocks)


def pad_prompt(tokens: Sequence[int], block_size: int, prompt_blocks: int = None) -> List[int]:
    """
    프롬프트를 PAD 로 왼쪽 채움 (길이: B 의 배수, prompt_blocks 지정 시 정확히 그 블록 수)

    Raises:
        LayoutError: 프롬프트가 지정된 블록 수보다 긴 경우
    """
    tokens = list(tokens)
    blocks = -(-len(tokens) // block_size) if prompt_blocks is None else prompt_blocks
    width = blocks * block_size
    if len(tokens) > width:
        error_msg = f"프롬프트 길이({len(tokens)})가 프롬프트 영역({width})보다 깁니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    return [Vocab.PAD] * (width - len(tokens)) + tokens


def training_pair(sample: TaskSample, layout: BlockLayout) -> Tuple[List[int], List[int]]:
    """
    레이아웃에 맞춘 (프롬프트, 출력) 토큰 쌍 (출력은 EOS 로 채움)

    Raises:
        LayoutError: 풀이가 출력 영역보다 긴 경우
    """
    prompt = pad_prompt(prompt_tokens(sample), layout.block_size, layout.prompt_blocks)
    target = target_tokens(sample)
    if len(target) > layout.output_len:
        error_msg = f"풀이 길이({len(target)})가 출력 영역({layout.output_len})보다 깁니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    return prompt, target + [Vocab.EOS] * (layout.output_len - len(target))


def parse_answer(text: str):
    """
    마지막 '#' 뒤의 정수 (형식이 맞지 않으면 None)
    """
    if "#" not in text:
        return None
    tail = text.rsplit("#", 1)[1].strip()
    if not _ANSWER_PATTERN.fullmatch(tail):
        return None
    return int(tail)


def verify(output_tokens: Sequence[int], sample: TaskSample) -> float:
    """
    정답 검증 (첫 EOS 까지 디코딩, 마지막 '#' 뒤 정수가 정답이면 1)
    잘못된 형식의 출력은 예외 없이 0 을 반환한다.

    Args:
        output_tokens (Sequence[int]): 생성된 출력 토큰
        sample (TaskSample): 정답 샘플

    Returns:
        float: 보상 1.0 또는 0.0
    """
    try:
        answer = parse_answer(Vocab.decode(output_tokens))
    except (TypeError, ValueError):
        return 0.0
    return 1.0 if answer is not None and answer == sample.answer else 0.0
