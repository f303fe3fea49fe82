"""Extended vocabulary and modality-annotated token sequences.

The vocabulary lays out ids deterministically: text ids first, then the
visual codebook, then named special tokens (MASK always first among the
specials). Sequences carry modality spans that tile the full index range
exactly; the spans drive modality-aware cache pruning downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

BASE_SPECIALS = ("MASK", "BOS", "EOS", "IMG_START", "IMG_END")


class Modality(str, Enum):
    TEXT = "TEXT"
    IMAGE = "IMAGE"
    SPECIAL = "SPECIAL"


@dataclass(frozen=True)
class ModalitySpan:
    """Half-open index range [start, end) tagged with one modality."""

    start: int
    end: int
    modality: Modality

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad span bounds [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TokenVocabulary:
    """Id layout over text tokens, visual codebook tokens and specials.

    Ids are contiguous: [0, text_size) text, [text_size, text_size +
    visual_size) visual, then one id per name in ``special`` (order
    preserved). MASK must appear exactly once among the specials.
    """

    text_size: int
    visual_size: int
    special: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.text_size < 0 or self.visual_size < 0:
            raise ValueError("token counts must be non-negative")
        if self.special.count("MASK") != 1:
            raise ValueError("vocabulary requires exactly one MASK special token")
        if len(set(self.special)) != len(self.special):
            raise ValueError(f"duplicate special token names: {self.special}")

    @property
    def total_size(self) -> int:
        return self.text_size + self.visual_size + len(self.special)

    @property
    def mask_id(self) -> int:
        return self.special_id("MASK")

    def special_id(self, name: str) -> int:
        try:
            offset = self.special.index(name)
        except ValueError:
            raise KeyError(f"unknown special token {name!r}") from None
        return self.text_size + self.visual_size + offset

    def special_name(self, token_id: int) -> str:
        offset = token_id - self.text_size - self.visual_size
        if not 0 <= offset < len(self.special):
            raise KeyError(f"id {token_id} is not a special token")
        return self.special[offset]

    def is_special(self, token_id: int) -> bool:
        return token_id >= self.text_size + self.visual_size

    def size_token_ids(self) -> tuple[int, ...]:
        """Ids of the per-resolution image size tokens (imgsize_*)."""
        return tuple(
            self.special_id(name) for name in self.special if name.startswith("imgsize_")
        )

    def id_of_text(self, index: int) -> int:
        if not 0 <= index < self.text_size:
            raise IndexError(index)
        return index

    def id_of_visual(self, index: int) -> int:
        if not 0 <= index < self.visual_size:
            raise IndexError(index)
        return self.text_size + index


def build_vocabulary(
    text_size: int, visual_size: int, resolutions: Sequence[int] = ()
) -> TokenVocabulary:
    """Build the extended vocabulary with one size token per resolution.

    Args:
        text_size: number of base text token ids (>= 2).
        visual_size: number of visual codebook ids (>= 0).
        resolutions: pixel sizes; each adds an ``imgsize_<r>`` special.

    Returns:
        TokenVocabulary with specials ordered MASK, BOS, EOS, IMG_START,
        IMG_END, imgsize_<r0>, imgsize_<r1>, ...
    """
    if text_size < 2:
        raise ValueError("text_size must be at least 2")
    if visual_size < 0:
        raise ValueError("visual_size must be non-negative")
    if len(set(resolutions)) != len(resolutions):
        raise ValueError(f"duplicate resolutions: {list(resolutions)}")
    specials = BASE_SPECIALS + tuple(f"imgsize_{r}" for r in resolutions)
    return TokenVocabulary(text_size=text_size, visual_size=visual_size, special=specials)


def _normalize_spans(spans: Iterable[ModalitySpan]) -> tuple[ModalitySpan, ...]:
    """Merge adjacent spans of equal modality; order is preserved."""
    merged: list[ModalitySpan] = []
    for span in spans:
        if merged and merged[-1].modality == span.modality and merged[-1].end == span.start:
            merged[-1] = ModalitySpan(merged[-1].start, span.end, span.modality)
        else:
            merged.append(span)
    return tuple(merged)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with modality spans tiling [0, len) and a block size."""

    ids: tuple[int, ...]
    spans: tuple[ModalitySpan, ...]
    block_size: int

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "spans", _normalize_spans(self.spans))
        cursor = 0
        for span in self.spans:
            if span.start != cursor:
                raise ValueError(f"spans do not tile: gap/overlap at {span.start} (expected {cursor})")
            cursor = span.end
        if cursor != len(self.ids):
            raise ValueError(f"spans cover [0, {cursor}) but sequence has {len(self.ids)} tokens")

    def __len__(self) -> int:
        return len(self.ids)

    def modality_at(self, pos: int) -> Modality:
        for span in self.spans:
            if span.start <= pos < span.end:
                return span.modality
        raise IndexError(pos)

    def modalities(self) -> list[Modality]:
        out: list[Modality] = []
        for span in self.spans:
            out.extend([span.modality] * len(span))
        return out

    def validate_ids(self, vocab: TokenVocabulary) -> None:
        for pos, token_id in enumerate(self.ids):
            if not 0 <= token_id < vocab.total_size:
                raise ValueError(f"id {token_id} at position {pos} outside vocabulary of {vocab.total_size}")

    def replace_ids(self, new_ids: Sequence[int]) -> "TokenSequence":
        if len(new_ids) != len(self.ids):
            raise ValueError("replacement must preserve length")
        return TokenSequence(tuple(new_ids), self.spans, self.block_size)

    def append_block(self, ids: Sequence[int], modality: Modality) -> "TokenSequence":
        start = len(self.ids)
        spans = self.spans + (ModalitySpan(start, start + len(ids), modality),)
        return TokenSequence(self.ids + tuple(ids), spans, self.block_size)


def text_sequence(ids: Sequence[int], block_size: int) -> TokenSequence:
    """Convenience constructor for an all-text sequence."""
    spans = (ModalitySpan(0, len(ids), Modality.TEXT),) if ids else ()
    return TokenSequence(tuple(ids), spans, block_size)


def _split_spans_at(spans: Sequence[ModalitySpan], cut: int) -> list[ModalitySpan]:
    """Split the span containing ``cut`` so that a boundary exists there.

    Splitting inside an IMAGE span is rejected: size tokens may only be
    inserted ahead of the flattened visual run, never inside it.
    """
    out: list[ModalitySpan] = []
    for span in spans:
        if span.start < cut < span.end:
            if span.modality is Modality.IMAGE:
                raise ValueError(f"insertion at {cut} would split IMAGE span [{span.start}, {span.end})")
            out.append(ModalitySpan(span.start, cut, span.modality))
            out.append(ModalitySpan(cut, span.end, span.modality))
        else:
            out.append(span)
    return out


def annotate_image_block(
    seq: TokenSequence, start: int, height_tok: int, width_tok: int, vocab: TokenVocabulary
) -> TokenSequence:
    """Insert <height>, <width> size tokens at ``start`` ahead of an image run.

    The two inserted positions are SPECIAL; spans at and after ``start``
    shift right by two and the result still tiles exactly.
    """
    if not 0 <= start <= len(seq):
        raise ValueError(f"insertion point {start} outside [0, {len(seq)}]")
    for tok in (height_tok, width_tok):
        if not vocab.is_special(tok):
            raise ValueError(f"size token id {tok} is not a special token")
    spans = _split_spans_at(seq.spans, start)
    new_spans: list[ModalitySpan] = []
    for span in spans:
        if span.end <= start:
            new_spans.append(span)
        else:
            new_spans.append(ModalitySpan(span.start + 2, span.end + 2, span.modality))
    insert_at = sum(1 for span in spans if span.end <= start)
    new_spans.insert(insert_at, ModalitySpan(start, start + 2, Modality.SPECIAL))
    new_ids = seq.ids[:start] + (height_tok, width_tok) + seq.ids[start:]
    return TokenSequence(new_ids, tuple(new_spans), seq.block_size)


# --- corpus records -------------------------------------------------------
#
# One JSON object per line: {"ids": [...], "spans": [[start, end, "TEXT"], ...]}
# with an optional "prompt_len" for conditioned samples.


def sequence_to_record(seq: TokenSequence, prompt_len: int | None = None) -> dict:
    record: dict = {
        "ids": list(seq.ids),
        "spans": [[s.start, s.end, s.modality.value] for s in seq.spans],
    }
    if prompt_len is not None:
        record["prompt_len"] = prompt_len
    return record


def sequence_from_record(record: dict, block_size: int) -> TokenSequence:
    spans = tuple(ModalitySpan(s, e, Modality(m)) for s, e, m in record["spans"])
    return TokenSequence(tuple(record["ids"]), spans, block_size)


def write_corpus(path: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_corpus(path: str) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
