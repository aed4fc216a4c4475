"""Token vocabulary shared by the scene generator, the denoiser and the
concept pipeline.

32 ids: pad, background, 12 shape/color class tokens, 10 concept slots and
8 appended slots. Class tokens describe scene objects; concept slots receive
learned embeddings; appended slots are extra trainable context used during
model fine-tuning.
"""
from __future__ import annotations

from dataclasses import dataclass, field

VOCAB_SIZE = 32
CONTEXT_LEN = 10

PAD_ID = 0
BACKGROUND_ID = 1

SHAPE_IDS = {"circle": 2, "square": 3, "triangle": 4}
COLOR_IDS = {
    "red": 5,
    "green": 6,
    "blue": 7,
    "yellow": 8,
    "cyan": 9,
    "magenta": 10,
    "orange": 11,
    "purple": 12,
    "gray": 13,
}
CONCEPT_IDS = tuple(range(14, 24))
APPEND_IDS = tuple(range(24, 32))

_NAMES: dict[int, str] = {PAD_ID: "<pad>", BACKGROUND_ID: "<bg>"}
_NAMES.update({v: k for k, v in SHAPE_IDS.items()})
_NAMES.update({v: k for k, v in COLOR_IDS.items()})
_NAMES.update({t: f"<c{i + 1}>" for i, t in enumerate(CONCEPT_IDS)})
_NAMES.update({t: f"<a{i + 1}>" for i, t in enumerate(APPEND_IDS)})

CLASS_IDS = tuple(SHAPE_IDS.values()) + tuple(COLOR_IDS.values())


def token_name(token_id: int) -> str:
    return _NAMES[int(token_id)]


def is_concept(token_id: int) -> bool:
    return token_id in CONCEPT_IDS


def is_appended(token_id: int) -> bool:
    return token_id in APPEND_IDS


@dataclass(frozen=True)
class TokenSeq:
    """Ordered token ids forming one text condition."""

    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if not ids:
            raise ValueError("token sequence must contain at least one token")
        if len(ids) > CONTEXT_LEN:
            raise ValueError(f"token sequence length {len(ids)} exceeds context length {CONTEXT_LEN}")
        for t in ids:
            if not 0 <= t < VOCAB_SIZE:
                raise ValueError(f"unknown token id {t} (vocabulary size {VOCAB_SIZE})")
        concepts = [t for t in ids if is_concept(t)]
        if len(concepts) != len(set(concepts)):
            raise ValueError(f"concept slots must be distinct, got {concepts}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(token_name(t) for t in self.ids)

    def concept_positions(self) -> dict[int, int]:
        """Map concept token id -> position in the sequence."""
        return {t: i for i, t in enumerate(self.ids) if is_concept(t)}
