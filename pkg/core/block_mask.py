"""
블록 어텐션 마스크 모듈 - 블록 단위 추론 마스크, SFT 반복(expanded) 시퀀스, 디코딩 트레이스 재생 마스크

확장 시퀀스의 가시성 규칙 (토큰마다 원본 블록 번호와 복사본 종류를 가진다):
  - CLEAN 블록 a 는 CLEAN 블록 b ≤ a 를 본다 (블록 인과, 블록 내부 양방향)
  - NOISY 복사본(블록 a)은 CLEAN 블록 b < a 와 자기 자신 복사본만 본다
  - CLEAN 토큰은 NOISY 토큰을 보지 않는다
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from core.exceptions import LayoutError, MaskContractError, TraceError
from utils.common import setup_logger

# 로거 설정
logger = setup_logger("block_mask")

# copy_tag 값: CLEAN 은 -1, NOISY 는 디코딩 스텝 번호(SFT 는 0)
CLEAN = -1

Predicate = Callable[[int, int], bool]


@dataclass(frozen=True)
class BlockLayout:
    """
    블록 레이아웃 - 블록 크기, 프롬프트 블록 수, 출력 블록 수
    """
    block_size: int
    prompt_blocks: int
    output_blocks: int

    def __post_init__(self):
        if self.block_size < 1 or self.prompt_blocks < 0 or self.output_blocks < 1:
            raise LayoutError(
                f"잘못된 블록 레이아웃: B={self.block_size}, "
                f"prompt_blocks={self.prompt_blocks}, output_blocks={self.output_blocks}"
            )

    @property
    def total_blocks(self) -> int:
        return self.prompt_blocks + self.output_blocks

    @property
    def prompt_len(self) -> int:
        return self.prompt_blocks * self.block_size

    @property
    def output_len(self) -> int:
        return self.output_blocks * self.block_size

    @property
    def total_len(self) -> int:
        return self.total_blocks * self.block_size

    def check_fits(self, max_seq_len: int) -> None:
        """전체 길이가 max_seq_len 이하인지 확인"""
        if self.total_len > max_seq_len:
            error_msg = f"레이아웃 길이({self.total_len})가 max_seq_len({max_seq_len})을 초과합니다."
            logger.error(error_msg)
            raise LayoutError(error_msg)


@dataclass
class MaskSpec:
    """
    어텐션 가시성 관계 - 비트 행렬과 술어 함수를 함께 보관

    Attributes:
        bits (torch.Tensor): [query_len, key_len] bool (True = 보임)
        predicate (Predicate): (i, j) -> bool, 비트 행렬과 항상 일치해야 함
    """
    bits: torch.Tensor
    predicate: Predicate

    @property
    def query_len(self) -> int:
        return int(self.bits.shape[0])

    @property
    def key_len(self) -> int:
        return int(self.bits.shape[1])

    def visible(self, i: int, j: int) -> bool:
        return bool(self.predicate(i, j))

    def check(self) -> None:
        """
        불변식 검사: 모든 쿼리 행에 보이는 키가 하나 이상, 비트 행렬 == 술어

        Raises:
            MaskContractError: 불변식 위반
        """
        empty = torch.nonzero(~self.bits.any(dim=1)).flatten().tolist()
        if empty:
            raise MaskContractError(f"보이는 키가 없는 쿼리 행: {empty[:8]}")
        for i in range(self.query_len):
            for j in range(self.key_len):
                if bool(self.bits[i, j]) != self.visible(i, j):
                    raise MaskContractError(f"비트 행렬과 술어가 ({i}, {j}) 에서 다릅니다.")

    @classmethod
    def from_predicate(cls, query_len: int, key_len: int, predicate: Predicate) -> "MaskSpec":
        bits = torch.tensor(
            [[bool(predicate(i, j)) for j in range(key_len)] for i in range(query_len)],
            dtype=torch.bool,
        ).reshape(query_len, key_len)
        return cls(bits=bits, predicate=predicate)


@dataclass
class ExpandedSequence:
    """
    블록 반복 확장 시퀀스

    Attributes:
        tokens: 입력 토큰 [L]
        positions: 원본 시퀀스 위치 [L] (NOISY 복사본은 원본 블록의 위치를 재사용)
        copy_tags: CLEAN(-1) 또는 NOISY 스텝 번호 [L]
        block_ids: 원본 블록 번호 [L]
        copy_ids: 복사본 식별자 [L] (같은 복사본끼리만 NOISY↔NOISY 가시)
        targets: 각 위치의 정답(깨끗한) 토큰 [L]
        loss_mask: 손실 위치 [L]
        loss_index: 손실 위치의 확장 인덱스 (트레이스 재생 시 스텝 기록 순서)
        mask: 가시성 관계
    """
    layout: BlockLayout
    tokens: torch.Tensor
    positions: torch.Tensor
    copy_tags: torch.Tensor
    block_ids: torch.Tensor
    copy_ids: torch.Tensor
    targets: torch.Tensor
    loss_mask: torch.Tensor
    loss_index: torch.Tensor
    mask: MaskSpec = field(repr=False)

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])


def _visibility_bits(block_ids: torch.Tensor, copy_ids: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    qb, kb = block_ids[:, None], block_ids[None, :]
    qc, kc = clean[:, None], clean[None, :]
    clean_clean = qc & kc & (kb <= qb)
    noisy_clean = ~qc & kc & (kb < qb)
    noisy_self = ~qc & ~kc & (copy_ids[:, None] == copy_ids[None, :])
    return clean_clean | noisy_clean | noisy_self


def _visibility_predicate(block_ids: Sequence[int], copy_ids: Sequence[int], clean: Sequence[bool]) -> Predicate:
    def predicate(i: int, j: int) -> bool:
        if clean[i]:
            return clean[j] and block_ids[j] <= block_ids[i]
        if clean[j]:
            return block_ids[j] < block_ids[i]
        return copy_ids[i] == copy_ids[j]
    return predicate


def _mask_from_metadata(block_ids: torch.Tensor, copy_tags: torch.Tensor, copy_ids: torch.Tensor) -> MaskSpec:
    clean = copy_tags == CLEAN
    bits = _visibility_bits(block_ids, copy_ids, clean)
    predicate = _visibility_predicate(block_ids.tolist(), copy_ids.tolist(), clean.tolist())
    return MaskSpec(bits=bits, predicate=predicate)


def block_causal_mask(n_blocks: int, block_size: int) -> MaskSpec:
    """
    블록 인과 마스크 (커밋된 문맥): 블록 내부 양방향 + 이전 블록
    """
    block_ids = torch.arange(n_blocks * block_size) // block_size
    tags = torch.full_like(block_ids, CLEAN)
    return _mask_from_metadata(block_ids, tags, block_ids)


def inference_mask(layout: BlockLayout, active_block: int) -> MaskSpec:
    """
    추론 마스크: 블록 0..active_block 을 덮는 블록 인과 마스크

    활성 블록의 토큰은 이전 블록 전체와 활성 블록 전체(양방향)를 보고,
    커밋된 블록은 자기 블록과 이전 블록을 본다.

    Args:
        layout (BlockLayout): 블록 레이아웃
        active_block (int): 현재 디코딩 중인 블록 번호

    Returns:
        MaskSpec: [(active_block+1)·B, (active_block+1)·B]
    """
    if not 0 <= active_block < layout.total_blocks:
        raise LayoutError(f"활성 블록 번호가 범위를 벗어났습니다: {active_block}")
    return block_causal_mask(active_block + 1, layout.block_size)


def _check_pair(layout: BlockLayout, clean_tokens: torch.Tensor, noisy_tokens: torch.Tensor, mask_token_id: int):
    b = layout.block_size
    if clean_tokens.shape != noisy_tokens.shape or clean_tokens.dim() != 1:
        raise LayoutError("clean/noisy 토큰은 같은 길이의 1차원 텐서여야 합니다.")
    n = int(clean_tokens.shape[0])
    if n % b != 0 or n != layout.total_len:
        error_msg = f"시퀀스 길이({n})가 레이아웃(B={b}, 전체 {layout.total_len})과 맞지 않습니다."
        logger.error(error_msg)
        raise LayoutError(error_msg)
    diff = clean_tokens != noisy_tokens
    if bool((noisy_tokens[diff] != mask_token_id).any()):
        raise LayoutError("noisy 토큰은 clean 토큰과 [MASK] 위치에서만 달라야 합니다.")


def sft_repeat_expansion(layout: BlockLayout,
                         clean_tokens: torch.Tensor,
                         noisy_tokens: torch.Tensor,
                         mask_token_id: int) -> ExpandedSequence:
    """
    SFT 단일 패스 확장: [clean 0, noisy 0, clean 1, noisy 1, ...]

    프롬프트 블록도 출력 블록과 똑같이 반복하되 손실은 출력 블록의 [MASK] 위치에만 둔다.

    Args:
        layout (BlockLayout): 블록 레이아웃
        clean_tokens (torch.Tensor): [total_len] 원본 토큰
        noisy_tokens (torch.Tensor): [total_len] 일부가 [MASK] 로 바뀐 토큰
        mask_token_id (int): [MASK] 토큰 ID

    Returns:
        ExpandedSequence: 길이 2·total_len

    Raises:
        LayoutError: 길이가 블록 크기의 배수가 아니거나 레이아웃과 다른 경우
    """
    _check_pair(layout, clean_tokens, noisy_tokens, mask_token_id)
    b = layout.block_size

    pieces = {name: [] for name in ("tokens", "positions", "tags", "blocks", "copies", "targets", "loss")}
    for k in range(layout.total_blocks):
        span = torch.arange(k * b, (k + 1) * b)
        for tag, source in ((CLEAN, clean_tokens), (0, noisy_tokens)):
            block_tokens = source[span]
            pieces["tokens"].append(block_tokens)
            pieces["positions"].append(span)
            pieces["tags"].append(torch.full((b,), tag, dtype=torch.long))
            pieces["blocks"].append(torch.full((b,), k, dtype=torch.long))
            pieces["copies"].append(torch.full((b,), 2 * k + (tag != CLEAN), dtype=torch.long))
            pieces["targets"].append(clean_tokens[span])
            is_loss = (block_tokens == mask_token_id) & (tag != CLEAN) & (k >= layout.prompt_blocks)
            pieces["loss"].append(is_loss)

    seq = {name: torch.cat(parts) for name, parts in pieces.items()}
    loss_mask = seq["loss"]
    return ExpandedSequence(
        layout=layout,
        tokens=seq["tokens"],
        positions=seq["positions"],
        copy_tags=seq["tags"],
        block_ids=seq["blocks"],
        copy_ids=seq["copies"],
        targets=seq["targets"],
        loss_mask=loss_mask,
        loss_index=torch.nonzero(loss_mask).flatten(),
        mask=_mask_from_metadata(seq["blocks"], seq["tags"], seq["copies"]),
    )


def output_repeat_expansion(layout: BlockLayout,
                            clean_tokens: torch.Tensor,
                            noisy_tokens: torch.Tensor,
                            mask_token_id: int) -> ExpandedSequence:
    """
    출력만 반복하는 비교 모드: [prompt + clean output (블록 인과), noisy output 블록들]

    Returns:
        ExpandedSequence: 길이 total_len + output_len
    """
    _check_pair(layout, clean_tokens, noisy_tokens, mask_token_id)
    b = layout.block_size
    n = layout.total_len

    block_ids = torch.arange(n) // b
    out_span = torch.arange(layout.prompt_len, n)
    noisy_blocks = out_span // b
    noisy = noisy_tokens[out_span]

    tokens = torch.cat([clean_tokens, noisy])
    positions = torch.cat([torch.arange(n), out_span])
    tags = torch.cat([torch.full((n,), CLEAN, dtype=torch.long), torch.zeros(len(out_span), dtype=torch.long)])
    blocks = torch.cat([block_ids, noisy_blocks])
    copies = torch.cat([block_ids, noisy_blocks + layout.total_blocks])
    targets = torch.cat([clean_tokens, clean_tokens[out_span]])
    loss_mask = torch.cat([torch.zeros(n, dtype=torch.bool), noisy == mask_token_id])
    return ExpandedSequence(
        layout=layout,
        tokens=tokens,
        positions=positions,
        copy_tags=tags,
        block_ids=blocks,
        copy_ids=copies,
        targets=targets,
        loss_mask=loss_mask,
        loss_index=torch.nonzero(loss_mask).flatten(),
        mask=_mask_from_metadata(blocks, tags, copies),
    )


def _trace_steps_by_block(layout: BlockLayout, steps) -> List[List]:
    """블록별 스텝 기록 목록 (스텝 번호 순), 위치 분할 검증 포함"""
    b = layout.block_size
    per_block: List[List] = [[] for _ in range(layout.output_blocks)]
    for record in steps:
        local = record.block - layout.prompt_blocks
        if not 0 <= local < layout.output_blocks:
            raise TraceError(f"출력 범위를 벗어난 블록의 스텝 기록입니다: block={record.block}")
        per_block[local].append(record)

    for local, records in enumerate(per_block):
        block = layout.prompt_blocks + local
        records.sort(key=lambda r: r.step)
        seen = set()
        for record in records:
            for pos in record.positions:
                if not block * b <= pos < (block + 1) * b:
                    raise TraceError(f"블록 {block} 의 스텝에 범위 밖 위치가 있습니다: {pos}")
                if pos in seen:
                    raise TraceError(f"위치 {pos} 가 두 번 디코딩되었습니다.")
                seen.add(pos)
        missing = sorted(set(range(block * b, (block + 1) * b)) - seen)
        if missing:
            error_msg = f"블록 {block} 에서 디코딩되지 않은 위치가 있습니다: {missing}"
            logger.error(error_msg)
            raise TraceError(error_msg)
    return per_block


def trace_replay_expansion(layout: BlockLayout, trajectory, mask_token_id: int) -> ExpandedSequence:
    """
    디코딩 트레이스 재생 확장

    CLEAN 블록(프롬프트 + 출력) 뒤에, 출력 블록마다 디코딩 스텝별 NOISY 복사본을 붙인다.
    복사본은 해당 스텝 직전의 상태(이전 스텝에서 드러난 토큰만 공개)를 담고,
    손실 위치는 그 스텝에서 디코딩된 토큰이다.

    Args:
        layout (BlockLayout): 트레이젝토리의 블록 레이아웃
        trajectory: prompt / output / steps 를 가진 트레이젝토리
        mask_token_id (int): [MASK] 토큰 ID

    Returns:
        ExpandedSequence: 길이 total_len + Σ steps·B, loss_index 는 스텝 기록 순서

    Raises:
        TraceError: 디코딩되지 않은 위치, 중복 위치 등 트레이스 오류
    """
    b = layout.block_size
    clean = torch.cat([
        torch.as_tensor(trajectory.prompt, dtype=torch.long),
        torch.as_tensor(trajectory.output, dtype=torch.long),
    ])
    if int(clean.shape[0]) != layout.total_len:
        raise LayoutError(f"트레이젝토리 길이({int(clean.shape[0])})가 레이아웃({layout.total_len})과 다릅니다.")
    per_block = _trace_steps_by_block(layout, trajectory.steps)

    n = layout.total_len
    block_ids = torch.arange(n) // b
    tokens = [clean]
    positions = [torch.arange(n)]
    tags = [torch.full((n,), CLEAN, dtype=torch.long)]
    blocks = [block_ids]
    copies = [block_ids]
    targets = [clean]
    loss = [torch.zeros(n, dtype=torch.bool)]

    # 스텝 기록 → 확장 인덱스 매핑
    loss_lookup = {}
    offset = n
    copy_id = layout.total_blocks
    for local, records in enumerate(per_block):
        block = layout.prompt_blocks + local
        span = torch.arange(block * b, (block + 1) * b)
        revealed = set()
        for record in records:
            state = clean[span].clone()
            hidden = torch.tensor([int(p) not in revealed for p in span.tolist()])
            state[hidden] = mask_token_id
            is_loss = torch.zeros(b, dtype=torch.bool)
            for pos in record.positions:
                is_loss[pos - block * b] = True
                loss_lookup[(record.block, record.step, pos)] = offset + pos - block * b

            tokens.append(state)
            positions.append(span)
            tags.append(torch.full((b,), record.step, dtype=torch.long))
            blocks.append(torch.full((b,), block, dtype=torch.long))
            copies.append(torch.full((b,), copy_id, dtype=torch.long))
            targets.append(clean[span])
            loss.append(is_loss)

            revealed.update(record.positions)
            offset += b
            copy_id += 1

    loss_index = torch.tensor(
        [loss_lookup[(r.block, r.step, p)] for r in trajectory.steps for p in r.positions],
        dtype=torch.long,
    )
    blocks_t = torch.cat(blocks)
    tags_t = torch.cat(tags)
    copies_t = torch.cat(copies)
    return ExpandedSequence(
        layout=layout,
        tokens=torch.cat(tokens),
        positions=torch.cat(positions),
        copy_tags=tags_t,
        block_ids=blocks_t,
        copy_ids=copies_t,
        targets=torch.cat(targets),
        loss_mask=torch.cat(loss),
        loss_index=loss_index,
        mask=_mask_from_metadata(blocks_t, tags_t, copies_t),
    )


def visibility_oracle(kind: str,
                      layout: BlockLayout,
                      trace=None,
                      active_block: Optional[int] = None) -> Predicate:
    """
    가시성 규칙의 독립 구현 (인덱스 산술만으로 (i, j) 가시 여부 판정)

    Args:
        kind (str): "inference" | "sft_repeat" | "output_repeat" | "trace_replay"
        layout (BlockLayout): 블록 레이아웃
        trace: trace_replay 일 때 스텝 기록 목록
        active_block (Optional[int]): inference 일 때 활성 블록

    Returns:
        Predicate: (i, j) -> bool
    """
    b = layout.block_size
    n = layout.total_len

    if kind == "inference":
        return lambda i, j: j // b <= i // b

    if kind == "sft_repeat":
        def sft_rule(i: int, j: int) -> bool:
            bi, ni = divmod(i, 2 * b)
            bj, nj = divmod(j, 2 * b)
            i_noisy, j_noisy = ni >= b, nj >= b
            if not i_noisy:
                return (not j_noisy) and bj <= bi
            if not j_noisy:
                return bj < bi
            return bi == bj
        return sft_rule

    def describe(i: int, copy_blocks: List[int]) -> Tuple[bool, int, int]:
        # (noisy 여부, 원본 블록, 복사본 번호)
        if i < n:
            return False, i // b, -1
        c = (i - n) // b
        return True, copy_blocks[c], c

    if kind == "output_repeat":
        copy_blocks = list(range(layout.prompt_blocks, layout.total_blocks))
    elif kind == "trace_replay":
        ordered = sorted(trace, key=lambda r: (r.block, r.step))
        copy_blocks = [r.block for r in ordered]
    else:
        raise ValueError(f"지원되지 않는 마스크 종류입니다: {kind}")

    def rule(i: int, j: int) -> bool:
        i_noisy, bi, ci = describe(i, copy_blocks)
        j_noisy, bj, cj = describe(j, copy_blocks)
        if not i_noisy:
            return (not j_noisy) and bj <= bi
        if not j_noisy:
            return bj < bi
        return ci == cj
    return rule


def render_pbm(mask: MaskSpec) -> str:
    """
    비트 행렬을 PBM(P1) 텍스트 격자로 변환 (1 = 보임)
    """
    rows = [" ".join("1" if v else "0" for v in row) for row in mask.bits.tolist()]
    return "\n".join(["P1", f"{mask.key_len} {mask.query_len}", *rows]) + "\n"
