"""Top-k expert routing with auxiliary-loss-free load balancing.

Selection is steered by a per-expert bias that is updated from the observed
load distribution; combine weights ignore the bias entirely, so balancing
never changes how selected experts are mixed, only which ones are selected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

DEFAULT_GATE_SCALE = 2.5
DEFAULT_UPDATE_RATE = -0.01
LOAD_EMA_DECAY = 0.9


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int = 1
    gate_scale: float = DEFAULT_GATE_SCALE
    update_rate: float = DEFAULT_UPDATE_RATE
    d_expert: int = 0  # per-expert hidden width when used inside the model

    def __post_init__(self) -> None:
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
        if self.gate_scale <= 0:
            raise ValueError("gate_scale must be positive")


@dataclass(frozen=True)
class RouterState:
    """Balancing state: selection bias b and the load EMA F.

    ``load_ema`` is None until the first batch has been observed; the
    estimator is seeded with the first observation rather than the uniform
    target so that the initial imbalance is visible in the trajectory.
    """

    bias: torch.Tensor
    load_ema: torch.Tensor | None = None
    decay: float = LOAD_EMA_DECAY

    @classmethod
    def zeros(cls, n_experts: int, decay: float = LOAD_EMA_DECAY) -> "RouterState":
        return cls(bias=torch.zeros(n_experts, dtype=torch.float64), load_ema=None, decay=decay)

    @property
    def n_experts(self) -> int:
        return int(self.bias.shape[0])

    def target(self) -> torch.Tensor:
        n = self.n_experts
        return torch.full((n,), 1.0 / n, dtype=torch.float64)


def route(
    gate_logits: torch.Tensor, state: RouterState, cfg: MoEConfig
) -> tuple[tuple[int, ...], torch.Tensor]:
    """Select top-k experts for one token and compute combine weights.

    Selection ranks ``gate_scale * logit + bias`` (ties -> lowest expert
    index). Combine weights are a softmax over the selected experts'
    *scaled logits only*; the bias never enters the weights, so gradients
    through the mixture are independent of the balancing state.
    """
    if gate_logits.shape != (cfg.n_experts,):
        raise ValueError(f"expected {cfg.n_experts} gate logits, got {tuple(gate_logits.shape)}")
    scaled = cfg.gate_scale * gate_logits.to(torch.float64)
    selection_scores = scaled.detach() + state.bias
    order = torch.argsort(-selection_scores, stable=True)  # ties -> lower index first
    selected = tuple(int(i) for i in order[: cfg.top_k])
    picked = scaled[list(selected)]
    weights = torch.softmax(picked - picked.max().detach(), dim=0)
    return selected, weights


def update_bias(state: RouterState, observed_load: torch.Tensor, u: float) -> RouterState:
    """b_i += u * (F_i - Q_i) / RMS(F - Q); no-op when F matches Q exactly."""
    load = observed_load.to(torch.float64)
    if abs(float(load.sum()) - 1.0) > 1e-9:
        raise ValueError("observed_load must sum to 1")
    err = load - state.target()
    rms = float(torch.sqrt(torch.mean(err * err)))
    if rms == 0.0:
        return state
    return replace(state, bias=state.bias + u * err / rms)


def observe(state: RouterState, batch_freqs: torch.Tensor) -> RouterState:
    """Fold one batch's selection frequencies into the load EMA."""
    freqs = batch_freqs.to(torch.float64)
    if abs(float(freqs.sum()) - 1.0) > 1e-9:
        raise ValueError("batch frequencies must sum to 1")
    if state.load_ema is None:
        ema = freqs.clone()
    else:
        ema = state.decay * state.load_ema + (1.0 - state.decay) * freqs
    return replace(state, load_ema=ema)


def max_load_gap(load: torch.Tensor) -> float:
    n = load.shape[0]
    return float(torch.max(torch.abs(load - 1.0 / n)))


def simulate_balancing(
    gate_logits: list[float], cfg: MoEConfig, steps: int
) -> dict[str, list]:
    """Drive the bias update with a fixed gate-logit stream.

    Each step routes one token batch whose every token carries the same
    logits, observes the resulting selection frequencies, and applies the
    bias update. Returns the gap/load/bias trajectories.
    """
    logits = torch.tensor(gate_logits, dtype=torch.float64)
    state = RouterState.zeros(cfg.n_experts)
    gaps: list[float] = []
    loads: list[list[float]] = []
    biases: list[list[float]] = []
    for _ in range(steps):
        selected, _ = route(logits, state, cfg)
        freqs = torch.zeros(cfg.n_experts, dtype=torch.float64)
        for idx in selected:
            freqs[idx] += 1.0 / len(selected)
        state = observe(state, freqs)
        state = update_bias(state, state.load_ema, cfg.update_rate)
        gaps.append(max_load_gap(state.load_ema))
        loads.append([float(x) for x in state.load_ema])
        biases.append([float(x) for x in state.bias])
    return {"gaps": gaps, "loads": loads, "biases": biases}
