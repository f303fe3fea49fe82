"""Toy conditional flow-matching generator with few-step distillation.

A small MLP regresses the velocity of a straight noise-to-data path,
conditioned on a discrete code embedding. Distillation adds an auxiliary
velocity head trained with a consistency term whose time derivative is a
second-order finite difference through a frozen copy; the auxiliary head
is dropped for deployment and sampling always integrates the main head.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class FlowNet(nn.Module):
    """(x_t, t, code) -> velocity, with an optional auxiliary head."""

    def __init__(
        self,
        dim: int = 2,
        hidden: int = 64,
        n_codes: int = 2,
        z_dim: int = 8,
        with_aux_head: bool = True,
    ):
        super().__init__()
        self.dim = dim
        self.n_codes = n_codes
        self.z_emb = nn.Embedding(n_codes, z_dim, dtype=torch.float64)
        self.fc1 = nn.Linear(dim + 1 + z_dim, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, hidden, dtype=torch.float64)
        self.v_head = nn.Linear(hidden, dim, dtype=torch.float64)
        self.u_head = nn.Linear(hidden, dim, dtype=torch.float64) if with_aux_head else None

    @property
    def has_aux_head(self) -> bool:
        return self.u_head is not None

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for _, p in self.named_parameters():
                fan_in = p.shape[-1] if p.ndim > 1 else max(p.shape[0], 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))

    def _features(self, x: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        inp = torch.cat([x, t[:, None], self.z_emb(z)], dim=-1)
        h = torch.tanh(self.fc1(inp))
        return torch.tanh(self.fc2(h))

    def velocity(self, x: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.v_head(self._features(x, t, z))

    def aux_velocity(self, x: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if self.u_head is None:
            raise RuntimeError("auxiliary head requested on a deployment-mode net")
        return self.u_head(self._features(x, t, z))

    def deployment_copy(self) -> "FlowNet":
        """Same main path with the auxiliary head's parameters removed."""
        hidden = self.fc1.out_features
        z_dim = self.z_emb.embedding_dim
        net = FlowNet(self.dim, hidden, self.n_codes, z_dim, with_aux_head=False)
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(dict(self.named_parameters())[name])
        return net


@dataclass(frozen=True)
class FlowPath:
    """Batched linear interpolation between noise and data."""

    x0: torch.Tensor  # [B, d]
    x1: torch.Tensor  # [B, d]
    t: torch.Tensor  # [B]
    x_t: torch.Tensor  # [B, d]
    v_target: torch.Tensor  # [B, d]

    @classmethod
    def make(cls, x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor) -> "FlowPath":
        x_t = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        return cls(x0=x0, x1=x1, t=t, x_t=x_t, v_target=x1 - x0)

    def invert_x1(self) -> torch.Tensor:
        """Recover x1 from (x_t, v_target, t); round-trips make()."""
        return self.x_t + (1.0 - self.t)[:, None] * self.v_target


def _with_grads(net: nn.Module, loss: torch.Tensor) -> tuple[float, dict[str, torch.Tensor]]:
    net.zero_grad(set_to_none=True)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }
    net.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


def fm_loss_value(net: FlowNet, path: FlowPath, z: torch.Tensor) -> torch.Tensor:
    if path.x_t.shape[0] == 0:
        raise ValueError("empty flow batch")
    v = net.velocity(path.x_t, path.t, z)
    return torch.mean(torch.sum((v - path.v_target) ** 2, dim=-1))


def fm_loss(net: FlowNet, path: FlowPath, z: torch.Tensor) -> tuple[float, dict[str, torch.Tensor]]:
    return _with_grads(net, fm_loss_value(net, path, z))


def _aux_time_derivative(
    frozen: FlowNet, path: FlowPath, z: torch.Tensor, eps: float
) -> torch.Tensor:
    """d u/dt along the path, via central differences through the frozen net.

    The state advances in the current auxiliary direction: x(t +/- eps) =
    x_t +/- eps * u(x_t, t). Samples whose t +/- eps leaves [0, 1] fall back
    to the corresponding one-sided difference.
    """
    with torch.no_grad():
        u_now = frozen.aux_velocity(path.x_t, path.t, z)
        t_plus = path.t + eps
        t_minus = path.t - eps
        x_plus = path.x_t + eps * u_now
        x_minus = path.x_t - eps * u_now
        u_plus = frozen.aux_velocity(x_plus, torch.clamp(t_plus, max=1.0), z)
        u_minus = frozen.aux_velocity(x_minus, torch.clamp(t_minus, min=0.0), z)
        central = (u_plus - u_minus) / (2.0 * eps)
        fwd = (u_plus - u_now) / eps  # used when t - eps < 0
        bwd = (u_now - u_minus) / eps  # used when t + eps > 1
        d = torch.where((t_plus > 1.0)[:, None], bwd, central)
        d = torch.where((t_minus < 0.0)[:, None], fwd, d)
    return d


def distill_loss_value(
    net: FlowNet,
    path: FlowPath,
    z: torch.Tensor,
    eps: float = 1e-3,
    frozen: FlowNet | None = None,
) -> torch.Tensor:
    """Flow-matching term plus the consistency term on the auxiliary head.

    loss = mean ||v - v_t||^2 + ||u - v_t + t * du/dt||^2 with du/dt taken
    through ``frozen`` (detached; defaults to the live net, i.e. stop-grad).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not net.has_aux_head:
        raise RuntimeError("distillation requires the auxiliary head")
    frozen = frozen if frozen is not None else net
    v = net.velocity(path.x_t, path.t, z)
    u = net.aux_velocity(path.x_t, path.t, z)
    d = _aux_time_derivative(frozen, path, z, eps)
    fm_term = torch.sum((v - path.v_target) ** 2, dim=-1)
    consistency = torch.sum((u - path.v_target + path.t[:, None] * d) ** 2, dim=-1)
    return torch.mean(fm_term + consistency)


def distill_loss(
    net: FlowNet,
    path: FlowPath,
    z: torch.Tensor,
    eps: float = 1e-3,
    frozen: FlowNet | None = None,
) -> tuple[float, dict[str, torch.Tensor]]:
    return _with_grads(net, distill_loss_value(net, path, z, eps, frozen))


def sample(
    net: FlowNet,
    z: torch.Tensor,
    steps: int,
    rng: np.random.Generator,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Euler integration of the main head from t=0 noise to t=1.

    z: long [B] code ids. Returns [B, dim] samples. Only the main velocity
    head is touched, so deployment copies sample bit-identically.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = torch.as_tensor(z, dtype=torch.long)
    if x0 is None:
        x0 = torch.from_numpy(rng.standard_normal((z.shape[0], net.dim)))
    x = x0.to(torch.float64).clone()
    dt = 1.0 / steps
    with torch.no_grad():
        for i in range(steps):
            t = torch.full((z.shape[0],), i / steps, dtype=torch.float64)
            x = x + dt * net.velocity(x, t, z)
    return x


# --- toy conditional mixture training ---------------------------------------


@dataclass(frozen=True)
class MixtureSpec:
    """One Gaussian mode per condition code.

    ``std`` is either one spread for all codes or one per code.
    """

    means: tuple[tuple[float, ...], ...]
    std: float | tuple[float, ...] = 0.5

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @property
    def n_codes(self) -> int:
        return len(self.means)

    def stds(self) -> np.ndarray:
        if isinstance(self.std, tuple):
            if len(self.std) != self.n_codes:
                raise ValueError("need one std per condition code")
            return np.asarray(self.std)
        return np.full(self.n_codes, float(self.std))


def with_super_resolution(spec: MixtureSpec) -> MixtureSpec:
    """Doubled condition vocabulary for upsampled-code conditioning.

    Codes [n, 2n) stand for the 2x super-resolution variants of codes
    [0, n): same modes, half the spread. Purely a conditioning-plumbing
    exercise; no image content is involved.
    """
    base = tuple(spec.stds().tolist())
    fine = tuple(s / 2.0 for s in base)
    return MixtureSpec(means=spec.means + spec.means, std=base + fine)


def make_training_batch(
    spec: MixtureSpec, batch: int, rng: np.random.Generator
) -> tuple[FlowPath, torch.Tensor]:
    """Rectified coupling: the data sample reuses the noise draw.

    x1 = mean[code] + std[code] * x0 keeps the per-code marginal exactly
    N(mean, std^2 I) while making every training path straight and
    non-crossing, so the learned field is integrable at any step count.
    """
    codes = rng.integers(0, spec.n_codes, size=batch)
    x0 = rng.standard_normal((batch, spec.dim))
    means = np.asarray(spec.means)[codes]
    stds = spec.stds()[codes][:, None]
    x1 = means + stds * x0
    t = rng.uniform(0.0, 1.0, size=batch)
    path = FlowPath.make(
        torch.from_numpy(x0), torch.from_numpy(x1), torch.from_numpy(t)
    )
    return path, torch.from_numpy(codes)


def train_flow_matching(
    net: FlowNet,
    spec: MixtureSpec,
    rng: np.random.Generator,
    iters: int = 3000,
    batch: int = 256,
    lr: float = 5e-3,
) -> list[float]:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    losses = []
    for _ in range(iters):
        path, codes = make_training_batch(spec, batch, rng)
        loss = fm_loss_value(net, path, codes)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def distill_few_step(
    net: FlowNet,
    spec: MixtureSpec,
    rng: np.random.Generator,
    iters: int = 1500,
    batch: int = 256,
    lr: float = 1e-3,
    eps: float = 1e-3,
) -> list[float]:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    losses = []
    for _ in range(iters):
        path, codes = make_training_batch(spec, batch, rng)
        loss = distill_loss_value(net, path, codes, eps=eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def energy_distance(x: torch.Tensor, y: torch.Tensor) -> float:
    """2 E||x-y|| - E||x-x'|| - E||y-y'|| over two sample clouds."""
    x = x.to(torch.float64)
    y = y.to(torch.float64)
    cross = torch.cdist(x, y).mean()
    within_x = torch.cdist(x, x).mean()
    within_y = torch.cdist(y, y).mean()
    return float(2.0 * cross - within_x - within_y)


def clone_net(net: FlowNet) -> FlowNet:
    return copy.deepcopy(net)
