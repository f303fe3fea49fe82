"""Noise schedule, masked-corruption, and the block-diffusion losses.

The pre-training loss sums masked-token NLL per block, scaled by the
schedule's time weight (1/t for the linear schedule); the conditional
variant reweights samples by the inverse square root of their masked-token
counts so short and long responses contribute comparable gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from blockdlm.model import BlockDiffusionLM
from blockdlm.vocab import TokenSequence, TokenVocabulary, read_corpus, sequence_from_record

T_FLOOR = 1e-3  # lower bound for sampled timesteps; bounds the 1/t weight


@dataclass(frozen=True)
class NoiseSchedule:
    """Survival probability alpha(t) on (0, 1]; only LINEAR is implemented."""

    kind: str = "linear"

    def __post_init__(self) -> None:
        if self.kind != "linear":
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t: float) -> float:
        return 1.0 - t

    def alpha_prime(self, t: float) -> float:
        return -1.0

    def weight(self, t: float) -> float:
        """Diffusion time weight -alpha'(t) / (1 - alpha(t)); 1/t here."""
        self._check_t(t)
        return -self.alpha_prime(t) / (1.0 - self.alpha(t))

    def mask_prob(self, t: float) -> float:
        self._check_t(t)
        return 1.0 - self.alpha(t)

    @staticmethod
    def _check_t(t: float) -> None:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"t={t} outside (0, 1]")

    def sample_t(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(T_FLOOR, 1.0))


LINEAR = NoiseSchedule("linear")


@dataclass(frozen=True)
class MaskedBatch:
    """One corrupted training sample.

    ``mask_flags[i]`` is true exactly where the corrupted sequence holds
    MASK and the clean one does not; the prompt prefix is never masked.
    """

    clean: TokenSequence
    corrupted: TokenSequence
    t: float
    mask_flags: tuple[bool, ...]
    prompt_len: int = 0

    def __post_init__(self) -> None:
        if len(self.clean) != len(self.corrupted) or len(self.mask_flags) != len(self.clean):
            raise ValueError("clean/corrupted/mask_flags lengths disagree")
        if not 0 <= self.prompt_len < len(self.clean):
            raise ValueError("prompt_len must leave at least one maskable position")
        if any(self.mask_flags[: self.prompt_len]):
            raise ValueError("prompt region must never be masked")

    @property
    def masked_count(self) -> int:
        return sum(self.mask_flags)

    def masked_positions(self) -> list[int]:
        return [i for i, f in enumerate(self.mask_flags) if f]


def _maskable(x0: TokenSequence, vocab: TokenVocabulary, prompt_len: int) -> list[int]:
    return [
        i
        for i in range(prompt_len, len(x0))
        if x0.ids[i] != vocab.mask_id
    ]


def corrupt(
    x0: TokenSequence,
    t: float,
    rng: np.random.Generator,
    vocab: TokenVocabulary,
    schedule: NoiseSchedule = LINEAR,
    prompt_len: int = 0,
    ensure_nonempty: bool = True,
) -> MaskedBatch:
    """Mask each non-prompt token independently with probability 1 - alpha(t).

    When ``ensure_nonempty`` (the default) an all-clean draw is resampled
    with the same t, so downstream losses always see a masked position.
    """
    p = schedule.mask_prob(t)
    if not 0 <= prompt_len < len(x0):
        raise ValueError("prompt_len must leave at least one maskable position")
    candidates = _maskable(x0, vocab, prompt_len)
    if ensure_nonempty and not candidates:
        raise ValueError("sequence has no maskable positions")
    flags = [False] * len(x0)
    while True:
        draws = rng.random(len(candidates)) < p
        for i, hit in zip(candidates, draws):
            flags[i] = bool(hit)
        if not ensure_nonempty or any(flags):
            break
    ids = list(x0.ids)
    for i, flagged in enumerate(flags):
        if flagged:
            ids[i] = vocab.mask_id
    return MaskedBatch(
        clean=x0,
        corrupted=x0.replace_ids(ids),
        t=t,
        mask_flags=tuple(flags),
        prompt_len=prompt_len,
    )


def complementary_pair(
    x0: TokenSequence,
    t: float,
    rng: np.random.Generator,
    vocab: TokenVocabulary,
    schedule: NoiseSchedule = LINEAR,
    prompt_len: int = 0,
) -> tuple[MaskedBatch, MaskedBatch]:
    """Primary corruption plus its exact inverse mask over non-prompt positions.

    Every maskable position is corrupted in exactly one member. Members are
    exempt from the at-least-one-mask rule: a fully clean member simply
    contributes no loss terms.
    """
    primary = corrupt(x0, t, rng, vocab, schedule, prompt_len, ensure_nonempty=False)
    candidates = set(_maskable(x0, vocab, prompt_len))
    flags = tuple(
        (i in candidates) and not primary.mask_flags[i] for i in range(len(x0))
    )
    ids = [vocab.mask_id if f else tok for tok, f in zip(x0.ids, flags)]
    complement = MaskedBatch(
        clean=x0,
        corrupted=x0.replace_ids(ids),
        t=t,
        mask_flags=flags,
        prompt_len=prompt_len,
    )
    return primary, complement


def _blocks_of(batch: MaskedBatch) -> list[tuple[int, int]]:
    """Half-open block ranges over the generation region."""
    L_B = batch.clean.block_size
    gen_len = len(batch.clean) - batch.prompt_len
    if gen_len % L_B != 0:
        raise ValueError(
            f"generation region of {gen_len} tokens is not block-aligned to {L_B}"
        )
    return [
        (batch.prompt_len + k * L_B, batch.prompt_len + (k + 1) * L_B)
        for k in range(gen_len // L_B)
    ]


def sample_nll(model: BlockDiffusionLM, batch: MaskedBatch) -> torch.Tensor:
    """Sum of -log p(clean token) over masked positions, block by block.

    Each block's queries see the *clean* preceding blocks and the noisy
    current block, mirroring how blocks are decoded at inference time.
    """
    if batch.masked_count == 0:
        raise ValueError("batch has no masked tokens")
    clean_ids = list(batch.clean.ids)
    nll = torch.zeros((), dtype=torch.float64)
    for start, end in _blocks_of(batch):
        block_masked = [i for i in batch.masked_positions() if start <= i < end]
        if not block_masked:
            continue
        ids = clean_ids[:start] + list(batch.corrupted.ids[start:end])
        positions = torch.arange(end)
        logits, _ = model.forward(ids, positions, prompt_len=batch.prompt_len)
        logp = torch.log_softmax(logits, dim=-1)
        for i in block_masked:
            nll = nll - logp[i, clean_ids[i]]
    return nll


def bdlm_loss_value(
    model: BlockDiffusionLM,
    batches: MaskedBatch | Sequence[MaskedBatch],
    schedule: NoiseSchedule = LINEAR,
) -> torch.Tensor:
    """Mean over samples of weight(t) * masked-token NLL."""
    if isinstance(batches, MaskedBatch):
        batches = [batches]
    if not batches:
        raise ValueError("empty batch list")
    total = torch.zeros((), dtype=torch.float64)
    for batch in batches:
        total = total + schedule.weight(batch.t) * sample_nll(model, batch)
    return total / len(batches)


def sft_loss_value(
    model: BlockDiffusionLM,
    batches: Sequence[MaskedBatch],
    schedule: NoiseSchedule = LINEAR,
) -> torch.Tensor:
    """Masked-count reweighted conditional loss.

    loss = sum_j beta_j * L_j / sum_j beta_j with beta_j = 1/sqrt(m_j).
    Fully clean members (from complementary pairs) are skipped entirely.
    """
    if not batches:
        raise ValueError("empty batch list")
    num = torch.zeros((), dtype=torch.float64)
    denom = 0.0
    for batch in batches:
        if batch.prompt_len <= 0:
            raise ValueError("conditional loss requires prompt_len > 0")
        count = batch.masked_count
        if count == 0:
            continue
        beta = 1.0 / math.sqrt(count)
        num = num + beta * schedule.weight(batch.t) * sample_nll(model, batch)
        denom += beta
    if denom == 0.0:
        raise ValueError("no sample contributed a masked token")
    return num / denom


def _with_grads(model: torch.nn.Module, loss: torch.Tensor) -> tuple[float, dict[str, torch.Tensor]]:
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


def bdlm_loss(
    model: BlockDiffusionLM,
    batches: MaskedBatch | Sequence[MaskedBatch],
    schedule: NoiseSchedule = LINEAR,
) -> tuple[float, dict[str, torch.Tensor]]:
    return _with_grads(model, bdlm_loss_value(model, batches, schedule))


def sft_loss(
    model: BlockDiffusionLM,
    batches: Sequence[MaskedBatch],
    schedule: NoiseSchedule = LINEAR,
) -> tuple[float, dict[str, torch.Tensor]]:
    return _with_grads(model, sft_loss_value(model, batches, schedule))


def load_batches(
    path: str,
    block_size: int,
    vocab: TokenVocabulary,
    rng: np.random.Generator,
    schedule: NoiseSchedule = LINEAR,
) -> list[MaskedBatch]:
    """Corrupt every corpus record at an independently sampled timestep.

    Records use the corpus wire format plus an optional per-record
    ``prompt_len`` (0 when absent, i.e. pre-training style).
    """
    batches = []
    for record in read_corpus(path):
        seq = sequence_from_record(record, block_size)
        t = schedule.sample_t(rng)
        batches.append(
            corrupt(seq, t, rng, vocab, schedule, prompt_len=record.get("prompt_len", 0))
        )
    return batches


# --- finite-difference oracle ----------------------------------------------


def finite_difference_grads(
    loss_fn, module: torch.nn.Module, eps: float = 1e-6
) -> dict[str, torch.Tensor]:
    """Central differences over every parameter element of ``module``.

    ``loss_fn`` re-evaluates the loss from the module's current parameters;
    it must not mutate them. Parameters are restored exactly from a saved
    copy after each probe.
    """
    grads: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                fd[idx] = (up - down) / (2.0 * eps)
            grads[name] = fd.view_as(p).clone()
    return grads


def max_relative_error(
    analytic: dict[str, torch.Tensor],
    numeric: dict[str, torch.Tensor],
    zero_tol: float = 3e-5,
) -> float:
    """Worst elementwise |a - f| / max(|a|, |f|, zero_tol).

    The denominator guard keeps central-difference roundoff (about
    1e-10 * |loss| at eps=1e-6 in double precision) from registering as a
    large relative error on near-zero gradient components; those entries
    are still held to |a - f| < zero_tol * tolerance absolutely, an order
    tighter than standard double-precision gradcheck atol.
    """
    worst = 0.0
    for name, a in analytic.items():
        f = numeric[name]
        for x, y in zip(a.view(-1).tolist(), f.view(-1).tolist()):
            worst = max(worst, abs(x - y) / max(abs(x), abs(y), zero_tol))
    return worst
