"""Token-sequence assembly and the chapter-restricted attention mask.

A trajectory is flattened visit-major behind a leading [SEQ] summary token.
For every ICD-9 chapter with at least ``k`` distinct diagnosis codes across
the whole trajectory, one chapter token is appended (ascending chapter order).
The attention mask then enforces: the SEQ/code block is fully mutually
visible, each chapter token sees only itself plus the diagnosis tokens of its
own chapter, and nothing ever attends *to* a chapter token from outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cohort import PatientTrajectory
from .errors import SequenceTooLong, ValidationError
from .ontology import N_CHAPTERS, Code, CodeType, Vocabulary


class TokenKind(Enum):
    SEQ = "seq"
    CODE = "code"
    CHAPTER = "chapter"


@dataclass(frozen=True)
class TokenSlot:
    kind: TokenKind
    position: int
    code: Code | None = None
    visit_index: int | None = None  # 1-based
    chapter: int | None = None      # chapter tokens only


@dataclass
class AttentionMask:
    """Visibility pattern for one assembled sequence.

    ``allowed[l, m]`` is True where row l may attend to column m. The additive
    pre-softmax form realizes the forbidden entries as the most-negative
    finite float so that exp() underflows to exactly zero after row-max
    shifting; every row keeps at least one allowed entry by construction.
    """

    allowed: np.ndarray

    def __post_init__(self):
        if self.allowed.ndim != 2 or self.allowed.shape[0] != self.allowed.shape[1]:
            raise ValidationError("attention mask must be square")

    @property
    def size(self) -> int:
        return self.allowed.shape[0]

    def additive(self, dtype=np.float64) -> np.ndarray:
        bias = np.zeros(self.allowed.shape, dtype=dtype)
        bias[~self.allowed] = np.finfo(dtype).min
        return bias

    def visibility(self) -> list[list[int]]:
        """Dense {0,1} matrix for debug/interpretability export."""
        return self.allowed.astype(int).tolist()


@dataclass
class AssembledSequence:
    slots: list[TokenSlot]
    n_code_tokens: int          # N_V
    chapter_order: list[int]    # triggered chapters, ascending
    mask: AttentionMask = field(repr=False)

    def __post_init__(self):
        expected = 1 + self.n_code_tokens + len(self.chapter_order)
        if len(self.slots) != expected:
            raise ValidationError(
                f"slot count {len(self.slots)} != 1 + {self.n_code_tokens} + {len(self.chapter_order)}"
            )
        if any(a >= b for a, b in zip(self.chapter_order, self.chapter_order[1:])):
            raise ValidationError("chapter token order must be strictly increasing")
        if self.mask.size != expected:
            raise ValidationError("mask dimension does not match slot count")

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def n_chapter_tokens(self) -> int:
        return len(self.chapter_order)

    def code_positions(self) -> list[int]:
        return [s.position for s in self.slots if s.kind is TokenKind.CODE]

    def chapter_positions(self) -> list[int]:
        return [s.position for s in self.slots if s.kind is TokenKind.CHAPTER]


def flatten(traj: PatientTrajectory) -> list[TokenSlot]:
    """Visit-major token slots with [SEQ] at position 0."""
    slots = [TokenSlot(kind=TokenKind.SEQ, position=0)]
    pos = 1
    for t, visit in enumerate(traj.visits, start=1):
        for code in visit.codes:
            slots.append(TokenSlot(kind=TokenKind.CODE, position=pos, code=code, visit_index=t))
            pos += 1
    return slots


def distinct_chapter_counts(
    traj: PatientTrajectory,
    vocab: Vocabulary,
    exclude: set[str] | None = None,
) -> dict[int, int]:
    """Distinct diagnosis identifiers per chapter across the whole trajectory.

    Repeats within or across visits count once. ``exclude`` removes
    identifiers from the support before counting (used under masking so that
    hidden codes cannot influence chapter-token triggering).
    """
    support: set[str] = set()
    for visit in traj.visits:
        for code in visit.codes:
            if code.code_type is CodeType.DIAGNOSIS:
                support.add(code.identifier)
    if exclude:
        support -= exclude
    counts = {j: 0 for j in range(1, N_CHAPTERS + 1)}
    for ident in support:
        counts[vocab.chapter_map[ident]] += 1
    return counts


def trigger_chapter_tokens(counts: dict[int, int], k: int) -> list[int]:
    """Ascending chapter ids whose distinct-code count reaches the threshold."""
    if k < 1:
        raise ValidationError(f"trigger threshold k must be >= 1, got {k}")
    return sorted(j for j, c in counts.items() if c >= k)


def build_attention_mask(slots: list[TokenSlot], n_code_tokens: int, vocab: Vocabulary) -> AttentionMask:
    """Visibility matrix over the assembled slots.

    Rules (0-indexed; the SEQ/code block is rows/cols 0..N_V):
      * chapter-token rows attend to themselves;
      * the SEQ/code block is fully mutually visible;
      * a chapter-token row additionally attends to diagnosis-code columns
        of its own chapter, across all visits;
      * everything else is forbidden; in particular no row in the SEQ/code
        block ever sees a chapter-token column.
    """
    size = len(slots)
    block_end = n_code_tokens + 1  # columns 0..N_V are SEQ + code tokens
    allowed = np.zeros((size, size), dtype=bool)
    allowed[:block_end, :block_end] = True

    diag_cols_by_chapter: dict[int, list[int]] = {}
    for slot in slots[1:block_end]:
        if slot.code is not None and slot.code.code_type is CodeType.DIAGNOSIS:
            chapter = vocab.chapter_map[slot.code.identifier]
            diag_cols_by_chapter.setdefault(chapter, []).append(slot.position)

    for slot in slots[block_end:]:
        row = slot.position
        allowed[row, row] = True
        for col in diag_cols_by_chapter.get(slot.chapter, ()):
            allowed[row, col] = True
    return AttentionMask(allowed=allowed)


def assemble(
    traj: PatientTrajectory,
    vocab: Vocabulary,
    k: int,
    max_len: int | None = None,
    exclude_from_trigger: set[str] | None = None,
) -> AssembledSequence:
    """Full assembly: flatten, trigger chapter tokens, build the mask."""
    slots = flatten(traj)
    n_code_tokens = len(slots) - 1
    counts = distinct_chapter_counts(traj, vocab, exclude=exclude_from_trigger)
    chapter_order = trigger_chapter_tokens(counts, k)

    total = 1 + n_code_tokens + len(chapter_order)
    if max_len is not None and total > max_len:
        raise SequenceTooLong(
            f"patient {traj.patient_id}: assembled length {total} exceeds maximum {max_len}"
        )
    pos = len(slots)
    for j in chapter_order:
        slots.append(TokenSlot(kind=TokenKind.CHAPTER, position=pos, chapter=j))
        pos += 1
    mask = build_attention_mask(slots, n_code_tokens, vocab)
    return AssembledSequence(
        slots=slots, n_code_tokens=n_code_tokens, chapter_order=chapter_order, mask=mask
    )
