"""Training-free acceleration policies: cache pruning and adaptive unmasking.

Prefix positions are scored once per block by blending mean-normalized key
norms with prediction confidence; pruning is modality-aware with a global
cap. Unmasking accepts every sufficiently confident position per step, with
a remaining-count floor that guarantees the block drains on schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch

from blockdlm.model import PrefixCache
from blockdlm.vocab import Modality


@dataclass(frozen=True)
class PruneConfig:
    """Keep ratios for sparse prefix retention. Defaults keep everything."""

    alpha: float = 0.5
    r_text: float = 1.0
    r_img: float = 1.0
    r_global: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("r_text", "r_img", "r_global"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def is_full_retention(self) -> bool:
        return self.r_text == 1.0 and self.r_img == 1.0 and self.r_global == 1.0


# The paper-style presets: selective image pruning keeps all text and 80%
# of image positions; full retention is the pruning no-op.
SELECTIVE_IMAGE_PRUNING = PruneConfig(alpha=0.5, r_text=1.0, r_img=0.8, r_global=1.0)
FULL_PREFIX_RETENTION = PruneConfig(alpha=0.5, r_text=1.0, r_img=1.0, r_global=1.0)


@dataclass(frozen=True)
class ImportanceRecord:
    position: int
    key_norm_importance: float  # mean-normalized over the scored prefix
    confidence: float  # top-1 softmax probability at this position
    score: float
    modality: Modality


class UnmaskMode(str, Enum):
    FIXED = "FIXED"
    ADAPTIVE = "ADAPTIVE"


@dataclass(frozen=True)
class UnmaskPolicy:
    tau: float = 0.95
    total_steps: int = 8
    mode: UnmaskMode = UnmaskMode.ADAPTIVE

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def score_prefix(
    cache: PrefixCache,
    logits: torch.Tensor,
    modalities: Sequence[Modality],
    cfg: PruneConfig,
) -> list[ImportanceRecord]:
    """Composite importance for every retained prefix position.

    Key-norm importance takes the L2 norm of each layer's concatenated
    per-head key vector, averages over layers, then normalizes by the mean
    over the prefix (so the importances average to 1). Confidence is the
    softmax maximum of that position's logits. Score blends the two with
    weight ``alpha`` on the key norms.
    """
    n = len(cache)
    if n == 0:
        return []
    if logits.shape[0] != n:
        raise ValueError(f"need logits for all {n} prefix positions, got {logits.shape[0]}")
    if len(modalities) != n:
        raise ValueError("one modality per prefix position required")

    norms = torch.zeros(n, dtype=torch.float64)
    for k in cache.keys:  # [n, H, D] -> per-position norm of the flattened key
        norms = norms + torch.linalg.vector_norm(k.reshape(n, -1), dim=1)
    norms = norms / cache.n_layers
    mean_norm = float(norms.mean())
    if mean_norm > 0:
        importance = norms / mean_norm
    else:
        importance = torch.ones_like(norms)  # degenerate all-zero keys

    probs = torch.softmax(logits - logits.max(dim=-1, keepdim=True).values, dim=-1)
    confidence = probs.max(dim=-1).values

    records = []
    for i, pos in enumerate(cache.positions()):
        imp = float(importance[i])
        conf = float(confidence[i])
        records.append(
            ImportanceRecord(
                position=pos,
                key_norm_importance=imp,
                confidence=conf,
                score=cfg.alpha * imp + (1.0 - cfg.alpha) * conf,
                modality=modalities[i],
            )
        )
    return records


def _top_by_score(records: list[ImportanceRecord], quota: int) -> set[int]:
    ranked = sorted(records, key=lambda r: (-r.score, r.position))
    return {r.position for r in ranked[:quota]}


def prune_prefix(
    records: list[ImportanceRecord],
    cache: PrefixCache,
    cfg: PruneConfig,
    protected: Sequence[int] = (),
) -> PrefixCache:
    """Evict low-importance prefix rows, modality-aware.

    TEXT keeps its top floor(r_text * n_text), IMAGE its top
    floor(r_img * n_img); SPECIAL positions and ``protected`` ones are
    always kept. If the survivors still exceed floor(r_global * n_total),
    the global cap evicts lowest-score IMAGE positions first, then TEXT.
    Score ties always retain the lower position index.
    """
    if [r.position for r in records] != cache.positions():
        raise ValueError("records must cover exactly the cache's retained positions")
    if len(records) == 0:
        return cache
    if cfg.is_full_retention:
        return cache  # bit-identical no-op

    protected_set = set(int(p) for p in protected)
    always = [
        r for r in records if r.modality is Modality.SPECIAL or r.position in protected_set
    ]
    text = [
        r for r in records if r.modality is Modality.TEXT and r.position not in protected_set
    ]
    image = [
        r for r in records if r.modality is Modality.IMAGE and r.position not in protected_set
    ]

    kept = {r.position for r in always}
    kept |= _top_by_score(text, math.floor(cfg.r_text * len(text)))
    kept |= _top_by_score(image, math.floor(cfg.r_img * len(image)))

    budget = math.floor(cfg.r_global * len(records))
    if len(kept) > budget:
        # Image positions yield first, then text; ties evict the higher index.
        for pool in (image, text):
            evictable = sorted(
                (r for r in pool if r.position in kept),
                key=lambda r: (r.score, -r.position),
            )
            for r in evictable:
                if len(kept) <= budget:
                    break
                kept.discard(r.position)
            if len(kept) <= budget:
                break

    if not kept:
        raise ValueError("pruning would evict the entire conditioning prefix")
    return cache.select(sorted(kept))


def select_unmask(
    confidences: Sequence[float],
    policy: UnmaskPolicy,
    remaining_steps: int,
    remaining_masked: int,
) -> list[int]:
    """Acceptance set over the current masked positions.

    ADAPTIVE accepts every index with confidence > tau, topped up to the
    floor ceil(m / remaining_steps) from the highest-confidence leftovers.
    FIXED ignores tau and returns exactly the floor count by confidence
    rank. Ties prefer the lower index; the result is sorted.
    """
    m = remaining_masked
    if m < 1:
        raise ValueError("remaining_masked must be >= 1")
    if remaining_steps < 1:
        raise ValueError("remaining_steps must be >= 1")
    if len(confidences) != m:
        raise ValueError(f"expected {m} confidences, got {len(confidences)}")

    floor = math.ceil(m / remaining_steps)
    by_confidence = sorted(range(m), key=lambda n: (-confidences[n], n))
    if policy.mode is UnmaskMode.FIXED:
        return sorted(by_confidence[:floor])

    accepted = [n for n in range(m) if confidences[n] > policy.tau]
    if len(accepted) < floor:
        chosen = set(accepted)
        for n in by_confidence:
            if len(chosen) >= floor:
                break
            chosen.add(n)
        accepted = list(chosen)
    return sorted(accepted)
