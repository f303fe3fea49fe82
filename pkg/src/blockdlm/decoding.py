"""Block-wise generation: fixed-schedule baseline and the accelerated path.

Each block starts with one full forward pass over everything decoded so
far (building logits and a complete KV cache), optionally prunes the
prefix cache once, then denoises the block against that short cache.
Forward passes and enabled attention pairs are both counted, so speed
claims never rest on wall time alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from blockdlm.model import ModelConfig, count_attended, visibility
from blockdlm.sprint import (
    PruneConfig,
    UnmaskPolicy,
    prune_prefix,
    score_prefix,
    select_unmask,
)
from blockdlm.vocab import Modality, TokenSequence, TokenVocabulary


class GenerationError(RuntimeError):
    def __init__(self, block: int, step: int, cause: Exception):
        super().__init__(f"generation failed in block {block}, step {step}: {cause}")
        self.block = block
        self.step = step


@dataclass
class DenoiseState:
    """Live decoding state for the current block."""

    block_index: int
    step: int
    masked: list[int]
    confidences: dict[int, float]
    committed: dict[int, int]
    nfe: int
    attended: int
    acceptance_log: list[list[int]] = field(default_factory=list)


@dataclass(frozen=True)
class GenerationResult:
    tokens: TokenSequence
    nfe: int
    attended: int
    wall_ns: int
    per_block_steps: tuple[int, ...]
    acceptances: tuple[tuple[tuple[int, ...], ...], ...]  # block -> step -> positions

    def generated_ids(self, prompt_len: int) -> tuple[int, ...]:
        return self.tokens.ids[prompt_len:]


def greedy_commit(
    logits: torch.Tensor,
    vocab: TokenVocabulary,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[list[int], list[float]]:
    """Predicted ids and confidences for masked positions.

    The argmax excludes MASK and the image size tokens; the confidence is
    the chosen id's probability under the softmax over the *full*
    vocabulary. temperature > 0 samples instead of taking the argmax
    (never used by the golden paths).
    """
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("logits must be finite")
    probs = torch.softmax(logits, dim=-1)
    banned = [vocab.mask_id, *vocab.size_token_ids()]
    pickable = logits.clone()
    pickable[:, banned] = float("-inf")
    if temperature > 0.0:
        if rng is None:
            raise ValueError("sampling requires an rng")
        pick_probs = torch.softmax(pickable / temperature, dim=-1).numpy()
        ids = [int(rng.choice(len(row), p=row / row.sum())) for row in pick_probs]
    else:
        ids = [int(i) for i in torch.argmax(pickable, dim=-1)]
    confs = [float(probs[row, tok]) for row, tok in enumerate(ids)]
    return ids, confs


def generate(
    model,
    prompt: TokenSequence,
    n_blocks: int,
    block_size: int,
    steps: int,
    policy: UnmaskPolicy,
    prune: PruneConfig | None = None,
    gen_modality: Modality = Modality.TEXT,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> GenerationResult:
    """Decode ``n_blocks`` blocks of ``block_size`` tokens after the prompt.

    ``prune=None`` is the baseline path (the full prefix cache is kept);
    otherwise the cache is scored and pruned once per block. The prompt's
    final position is always protected from eviction.
    """
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    if n_blocks < 1 or steps < 1:
        raise ValueError("need n_blocks >= 1 and steps >= 1")
    if prompt.block_size != block_size:
        raise ValueError("prompt.block_size must match the decoding block size")
    if policy.total_steps != steps:
        raise ValueError(
            f"policy.total_steps={policy.total_steps} disagrees with steps={steps}"
        )

    cfg: ModelConfig = model.config
    vocab = cfg.vocab
    prompt_len = len(prompt)
    seq = prompt
    nfe = 0
    attended = 0
    per_block_steps: list[int] = []
    acceptances: list[tuple[tuple[int, ...], ...]] = []
    start_ns = time.perf_counter_ns()

    with torch.no_grad():
        for block in range(n_blocks):
            seq = seq.append_block([vocab.mask_id] * block_size, gen_modality)
            block_start = len(seq) - block_size
            work = list(seq.ids)
            state = DenoiseState(
                block_index=block,
                step=0,
                masked=list(range(block_start, block_start + block_size)),
                confidences={},
                committed={},
                nfe=nfe,
                attended=attended,
            )
            prefix_cache = None
            try:
                for step in range(steps):
                    if not state.masked:
                        break
                    state.step = step
                    if step == 0:
                        positions = torch.arange(len(work))
                        logits_all, cache = model.forward(work, positions, None, prompt_len)
                        nfe += 1
                        attended += count_attended(
                            visibility(positions, positions, block_size, prompt_len),
                            cfg.n_layers,
                        )
                        prefix_cache = cache.slice_prefix(block_start)
                        if prune is not None:
                            modalities = seq.modalities()[:block_start]
                            records = score_prefix(
                                prefix_cache, logits_all[:block_start], modalities, prune
                            )
                            prefix_cache = prune_prefix(
                                records, prefix_cache, prune, protected=(prompt_len - 1,)
                            )
                        block_logits = logits_all[block_start:]
                    else:
                        positions = torch.arange(block_start, block_start + block_size)
                        block_logits, _ = model.forward(
                            work[block_start:], positions, prefix_cache, prompt_len
                        )
                        nfe += 1
                        key_pos = torch.cat([prefix_cache.retained, positions])
                        attended += count_attended(
                            visibility(positions, key_pos, block_size, prompt_len),
                            cfg.n_layers,
                        )

                    offsets = [p - block_start for p in state.masked]
                    ids_hat, confs = greedy_commit(
                        block_logits[offsets], vocab, temperature, rng
                    )
                    state.confidences = dict(zip(state.masked, confs))
                    accepted = select_unmask(confs, policy, steps - step, len(state.masked))
                    accepted_positions = [state.masked[n] for n in accepted]
                    for n in accepted:
                        pos = state.masked[n]
                        work[pos] = ids_hat[n]
                        state.committed[pos] = ids_hat[n]
                    keep = set(accepted)
                    state.masked = [p for i, p in enumerate(state.masked) if i not in keep]
                    state.acceptance_log.append(accepted_positions)
                    state.nfe = nfe
                    state.attended = attended
            except Exception as exc:  # annotate with decode location
                if isinstance(exc, GenerationError):
                    raise
                raise GenerationError(block, state.step, exc) from exc

            if state.masked:
                raise GenerationError(block, steps, RuntimeError("block failed to drain"))
            per_block_steps.append(len(state.acceptance_log))
            acceptances.append(tuple(tuple(a) for a in state.acceptance_log))
            seq = seq.replace_ids(work)

    return GenerationResult(
        tokens=seq,
        nfe=nfe,
        attended=attended,
        wall_ns=time.perf_counter_ns() - start_ns,
        per_block_steps=tuple(per_block_steps),
        acceptances=tuple(acceptances),
    )


class HighConfidenceModel:
    """Synthetic stand-in whose logits depend only on absolute position.

    Emits a one-hot logit of height ``margin`` at a position-keyed text id,
    so every masked position is predicted with near-certain confidence and
    independently of decoding order. Exposes the same forward contract as
    the transformer (including a well-formed cache with unit-norm keys).
    """

    def __init__(self, vocab: TokenVocabulary, block_size: int, margin: float = 30.0):
        self.config = ModelConfig(
            d_model=4,
            n_heads=2,
            n_layers=1,
            d_ff=4,
            vocab=vocab,
            block_size=block_size,
        )
        self.margin = margin

    def token_at(self, position: int) -> int:
        return (position * 7 + 3) % self.config.vocab.text_size

    def empty_cache(self):
        from blockdlm.model import PrefixCache

        return PrefixCache.empty(
            self.config.n_layers, self.config.n_heads, self.config.head_dim
        )

    def forward(self, input_ids, positions, cache=None, prompt_len=0, attn_mask=None):
        ids = torch.as_tensor(input_ids, dtype=torch.long)
        pos = torch.as_tensor(positions, dtype=torch.long)
        V = self.config.vocab.total_size
        logits = torch.zeros((ids.numel(), V), dtype=torch.float64)
        for row, p in enumerate(pos.tolist()):
            logits[row, self.token_at(p)] = self.margin
        if cache is None:
            cache = self.empty_cache()
        shape = (ids.numel(), self.config.n_heads, self.config.head_dim)
        unit = torch.full(shape, 0.5, dtype=torch.float64)  # unit-norm per position
        new_cache = cache.extended([unit], [unit.clone()], pos)
        return logits, new_cache
