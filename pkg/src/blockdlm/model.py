"""Toy block-diffusion transformer in float64.

Attention is full within a block and causal across blocks; the prompt
region acts as one fully visible context block. Rotary embeddings always
use original sequence positions, so a pruned cache keeps its geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from blockdlm.moe import MoEConfig, RouterState, route
from blockdlm.vocab import TokenVocabulary

RMS_EPS = 1e-6
INIT_RANGE = 0.02


class ModelFault(RuntimeError):
    """Non-finite activation, annotated with the layer that produced it."""

    def __init__(self, layer: int, stage: str):
        super().__init__(f"non-finite activation in layer {layer} ({stage})")
        self.layer = layer
        self.stage = stage


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab: TokenVocabulary
    block_size: int
    rope_base: float = 10000.0
    moe: MoEConfig | None = None

    def __post_init__(self) -> None:
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "block_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even (rotary embedding)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def block_index(pos: np.ndarray | torch.Tensor, block_size: int, prompt_len: int):
    """Block id per position: prompt is block 0, generation blocks follow."""
    pos = torch.as_tensor(pos, dtype=torch.long)
    gen = torch.clamp(pos - prompt_len, min=0)
    idx = 1 + gen // block_size
    return torch.where(pos < prompt_len, torch.zeros_like(idx), idx)


def visibility(
    query_positions, key_positions, block_size: int, prompt_len: int
) -> torch.Tensor:
    """Boolean [n_query, n_key] mask: key block <= query block."""
    qb = block_index(query_positions, block_size, prompt_len)
    kb = block_index(key_positions, block_size, prompt_len)
    return kb[None, :] <= qb[:, None]


def build_block_mask(seq_len: int, block_size: int, prompt_len: int = 0) -> torch.Tensor:
    """Dense block-attention mask over a contiguous [0, seq_len) range."""
    if not 0 <= prompt_len <= seq_len:
        raise ValueError(f"need seq_len >= prompt_len >= 0, got {seq_len}, {prompt_len}")
    pos = torch.arange(seq_len)
    return visibility(pos, pos, block_size, prompt_len)


def count_attended(mask: torch.Tensor, n_layers: int) -> int:
    """Enabled query*key pairs across all layers; the speed proxy counter."""
    return int(mask.sum()) * n_layers


def apply_rope(x: torch.Tensor, positions, rope_base: float) -> torch.Tensor:
    """Rotate per-head vectors by their original position.

    x: [..., L, H, D] with even D. Norm-preserving; position 0 is identity
    and dot products depend only on relative offsets.
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ValueError("head dimension must be even for rotary embedding")
    half = head_dim // 2
    pos = torch.as_tensor(positions, dtype=torch.float64)
    inv_freq = rope_base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = pos[:, None] * inv_freq[None, :]  # [L, half]
    cos = torch.cos(angles)[:, None, :].to(x.dtype)
    sin = torch.sin(angles)[:, None, :].to(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


@dataclass
class PrefixCache:
    """Per-layer K/V rows for retained original positions.

    Row r of every layer's tensors belongs to original position
    ``retained[r]``; pruning removes rows, never reorders them.
    """

    keys: list[torch.Tensor]  # per layer: [n_retained, n_heads, head_dim]
    values: list[torch.Tensor]
    retained: torch.Tensor  # long [n_retained], strictly increasing

    def __post_init__(self) -> None:
        self.retained = torch.as_tensor(self.retained, dtype=torch.long)
        if self.retained.numel() > 1 and not bool((self.retained[1:] > self.retained[:-1]).all()):
            raise ValueError("retained positions must be strictly increasing")
        for layer, (k, v) in enumerate(zip(self.keys, self.values)):
            if k.shape[0] != self.retained.numel() or v.shape[0] != self.retained.numel():
                raise ValueError(f"layer {layer} cache rows disagree with retained positions")

    @classmethod
    def empty(
        cls, n_layers: int, n_heads: int, head_dim: int, dtype: torch.dtype = torch.float64
    ) -> "PrefixCache":
        zero = torch.zeros((0, n_heads, head_dim), dtype=dtype)
        return cls(
            keys=[zero.clone() for _ in range(n_layers)],
            values=[zero.clone() for _ in range(n_layers)],
            retained=torch.zeros(0, dtype=torch.long),
        )

    def __len__(self) -> int:
        return int(self.retained.numel())

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def positions(self) -> list[int]:
        return [int(p) for p in self.retained]

    def slice_prefix(self, end_pos: int) -> "PrefixCache":
        """Rows for original positions strictly before ``end_pos``."""
        keep = self.retained < end_pos
        return PrefixCache(
            keys=[k[keep] for k in self.keys],
            values=[v[keep] for v in self.values],
            retained=self.retained[keep],
        )

    def select(self, keep_positions: Sequence[int]) -> "PrefixCache":
        """Keep only the given original positions (must all be present)."""
        wanted = set(int(p) for p in keep_positions)
        missing = wanted - set(self.positions())
        if missing:
            raise ValueError(f"positions not in cache: {sorted(missing)}")
        keep = torch.tensor([int(p) in wanted for p in self.retained], dtype=torch.bool)
        return PrefixCache(
            keys=[k[keep] for k in self.keys],
            values=[v[keep] for v in self.values],
            retained=self.retained[keep],
        )

    def extended(
        self, new_keys: list[torch.Tensor], new_values: list[torch.Tensor], positions: torch.Tensor
    ) -> "PrefixCache":
        return PrefixCache(
            keys=[torch.cat([k, nk], dim=0) for k, nk in zip(self.keys, new_keys)],
            values=[torch.cat([v, nv], dim=0) for v, nv in zip(self.values, new_values)],
            retained=torch.cat([self.retained, torch.as_tensor(positions, dtype=torch.long)]),
        )


class RMSNorm(nn.Module):
    def __init__(self, dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True) + RMS_EPS)
        return x / rms * self.gain


class DenseFF(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.up = nn.Linear(d_model, d_ff, bias=False, dtype=dtype)
        self.down = nn.Linear(d_ff, d_model, bias=False, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(torch.nn.functional.silu(self.up(x)))


class MoEFF(nn.Module):
    """Mixture-of-experts feed-forward with selection-only balancing bias."""

    def __init__(self, d_model: int, cfg: MoEConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        d_expert = cfg.d_expert or d_model
        self.gate = nn.Linear(d_model, cfg.n_experts, bias=False, dtype=dtype)
        self.experts = nn.ModuleList(
            [DenseFF(d_model, d_expert, dtype) for _ in range(cfg.n_experts)]
        )
        self.register_buffer("router_bias", torch.zeros(cfg.n_experts, dtype=torch.float64))
        self.register_buffer(
            "router_load_ema",
            torch.full((cfg.n_experts,), 1.0 / cfg.n_experts, dtype=torch.float64),
        )

    @property
    def router_state(self) -> RouterState:
        return RouterState(bias=self.router_bias, load_ema=self.router_load_ema)

    def set_router_state(self, state: RouterState) -> None:
        self.router_bias.copy_(state.bias)
        if state.load_ema is not None:
            self.router_load_ema.copy_(state.load_ema)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        state = self.router_state
        outs = []
        for i in range(x.shape[0]):
            selected, weights = route(self.gate(x[i]), state, self.cfg)
            mixed = torch.zeros_like(x[i])
            for j, expert_idx in enumerate(selected):
                mixed = mixed + weights[j].to(x.dtype) * self.experts[expert_idx](x[i])
            outs.append(mixed)
        return torch.stack(outs, dim=0)


class TransformerLayer(nn.Module):
    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        d = config.d_model
        self.attn_norm = RMSNorm(d, dtype)
        self.wq = nn.Linear(d, d, bias=False, dtype=dtype)
        self.wk = nn.Linear(d, d, bias=False, dtype=dtype)
        self.wv = nn.Linear(d, d, bias=False, dtype=dtype)
        self.wo = nn.Linear(d, d, bias=False, dtype=dtype)
        self.ff_norm = RMSNorm(d, dtype)
        if config.moe is not None:
            self.ff: nn.Module = MoEFF(d, config.moe, dtype)
        else:
            self.ff = DenseFF(d, config.d_ff, dtype)


class BlockDiffusionLM(nn.Module):
    """Embeddings -> N (attention + FF) layers -> full-vocabulary head.

    float64 is the reference path; dtype=torch.float32 selects the fast
    path, which satisfies the same properties at 1e-4 tolerance.
    """

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        self.dtype = dtype
        V = config.vocab.total_size
        self.tok_emb = nn.Embedding(V, config.d_model, dtype=dtype)
        self.layers = nn.ModuleList(
            [TransformerLayer(config, dtype) for _ in range(config.n_layers)]
        )
        self.out_norm = RMSNorm(config.d_model, dtype)
        self.head = nn.Linear(config.d_model, V, bias=False, dtype=dtype)

    def init_params(self, seed: int, scale: float = INIT_RANGE) -> None:
        """Seeded uniform [-scale, scale] init in declaration order."""
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for _, p in self.named_parameters():
                vals = rng.uniform(-scale, scale, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def empty_cache(self) -> PrefixCache:
        return PrefixCache.empty(
            self.config.n_layers, self.config.n_heads, self.config.head_dim, self.dtype
        )

    def forward(
        self,
        input_ids,
        positions,
        cache: PrefixCache | None = None,
        prompt_len: int = 0,
        attn_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, PrefixCache]:
        """Run the stack over ``input_ids`` at the given original positions.

        Args:
            input_ids: token ids, shape [L].
            positions: strictly increasing original positions, shape [L].
            cache: optional prefix K/V; every cached position must precede
                every input position. Chunk boundaries must fall on the
                block grid: attention is bidirectional inside a block, so a
                mid-block split cannot reproduce the monolithic pass.
            prompt_len: length of the fully visible context region.
            attn_mask: optional explicit [L, n_key] visibility override
                (used for packed-segment isolation).

        Returns:
            (logits [L, vocab_size], cache extended by the new positions)
        """
        cfg = self.config
        ids = torch.as_tensor(input_ids, dtype=torch.long)
        pos = torch.as_tensor(positions, dtype=torch.long)
        if ids.ndim != 1 or pos.shape != ids.shape:
            raise ValueError("input_ids and positions must be 1-D and equal length")
        if pos.numel() > 1 and not bool((pos[1:] > pos[:-1]).all()):
            raise ValueError("positions must be strictly increasing")
        if cache is not None and len(cache) > 0:
            if int(cache.retained[-1]) >= int(pos[0]):
                raise ValueError(
                    f"cache position {int(cache.retained[-1])} collides with input start {int(pos[0])}"
                )
        if cache is None:
            cache = self.empty_cache()

        key_pos = torch.cat([cache.retained, pos])
        if attn_mask is None:
            vis = visibility(pos, key_pos, cfg.block_size, prompt_len)
        else:
            if attn_mask.shape != (ids.numel(), key_pos.numel()):
                raise ValueError(
                    f"attn_mask shape {tuple(attn_mask.shape)} != {(ids.numel(), key_pos.numel())}"
                )
            vis = attn_mask

        L = ids.numel()
        x = self.tok_emb(ids)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        new_keys: list[torch.Tensor] = []
        new_values: list[torch.Tensor] = []
        for li, layer in enumerate(self.layers):
            h = layer.attn_norm(x)
            q = apply_rope(layer.wq(h).view(L, cfg.n_heads, cfg.head_dim), pos, cfg.rope_base)
            k = apply_rope(layer.wk(h).view(L, cfg.n_heads, cfg.head_dim), pos, cfg.rope_base)
            v = layer.wv(h).view(L, cfg.n_heads, cfg.head_dim)
            k_all = torch.cat([cache.keys[li], k], dim=0)
            v_all = torch.cat([cache.values[li], v], dim=0)
            scores = torch.einsum("qhd,khd->hqk", q, k_all) * scale
            scores = scores.masked_fill(~vis[None, :, :], float("-inf"))
            probs = torch.softmax(scores, dim=-1)
            attn = torch.einsum("hqk,khd->qhd", probs, v_all).reshape(L, cfg.d_model)
            x = x + layer.wo(attn)
            if not bool(torch.isfinite(x).all()):
                raise ModelFault(li, "attention")
            x = x + layer.ff(layer.ff_norm(x))
            if not bool(torch.isfinite(x).all()):
                raise ModelFault(li, "feed-forward")
            new_keys.append(k)
            new_values.append(v)

        logits = self.head(self.out_norm(x))
        if not bool(torch.isfinite(logits).all()):
            raise ModelFault(cfg.n_layers - 1, "head")
        return logits, cache.extended(new_keys, new_values, pos)
