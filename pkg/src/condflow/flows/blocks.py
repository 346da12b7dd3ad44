"""Invertible building blocks: ActNorm, fixed permutations, coupling layers."""

from __future__ import annotations

import torch
import torch.nn as nn

from . import splines


class NonFiniteActivation(RuntimeError):
    """A block produced NaN/inf activations; carries the block index."""

    def __init__(self, block_index: int, direction: str):
        super().__init__(f"non-finite activation in block {block_index} ({direction})")
        self.block_index = block_index


def make_subnet(in_dim: int, out_dim: int, hidden: list[int]) -> nn.Sequential:
    """Fully connected subnet, SiLU activations, zero-initialized output layer.

    Zero output means every coupling starts as the identity map.
    """
    layers: list[nn.Module] = []
    prev = in_dim
    for h in hidden:
        lin = nn.Linear(prev, h)
        nn.init.xavier_normal_(lin.weight)
        nn.init.zeros_(lin.bias)
        layers += [lin, nn.SiLU()]
        prev = h
    out = nn.Linear(prev, out_dim)
    nn.init.zeros_(out.weight)
    nn.init.zeros_(out.bias)
    layers.append(out)
    return nn.Sequential(*layers).double()


class ConditionEmbedding(nn.Module):
    """Maps log c to an embedding vector; identity pass-through when hidden=[]."""

    def __init__(self, embed_dim: int = 1, hidden: list[int] | None = None):
        super().__init__()
        hidden = hidden or []
        self.embed_dim = embed_dim if hidden else 1
        if hidden:
            layers: list[nn.Module] = []
            prev = 1
            for h in hidden:
                lin = nn.Linear(prev, h)
                nn.init.xavier_normal_(lin.weight)
                nn.init.zeros_(lin.bias)
                layers += [lin, nn.SiLU()]
                prev = h
            layers.append(nn.Linear(prev, embed_dim))
            self.net: nn.Module | None = nn.Sequential(*layers).double()
        else:
            self.net = None

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        logc = torch.log(c).unsqueeze(-1)
        if self.net is None:
            return logc
        return self.net(logc)


class ActNorm(nn.Module):
    """Per-dimension affine normalization, initialized from the first data batch."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.loc = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("initialized", torch.tensor(False))

    def initialize_from(self, batch: torch.Tensor) -> None:
        with torch.no_grad():
            self.loc.copy_(batch.mean(dim=0))
            std = batch.std(dim=0, unbiased=False).clamp(min=1e-8)
            self.log_scale.copy_(torch.log(std))
            self.initialized.fill_(True)

    def forward(self, x: torch.Tensor, cond=None):
        z = (x - self.loc) * torch.exp(-self.log_scale)
        log_det = -self.log_scale.sum().expand(x.shape[0])
        return z, log_det

    def inverse(self, z: torch.Tensor, cond=None):
        x = z * torch.exp(self.log_scale) + self.loc
        log_det = self.log_scale.sum().expand(z.shape[0])
        return x, log_det

    def descriptor(self) -> dict:
        return {"type": "actnorm"}


class FixedPermutation(nn.Module):
    """Seeded random permutation of the coordinates; volume preserving."""

    def __init__(self, dim: int, seed: int):
        super().__init__()
        self.dim = dim
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        perm = torch.randperm(dim, generator=gen)
        inv = torch.empty_like(perm)
        inv[perm] = torch.arange(dim)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", inv)

    def forward(self, x: torch.Tensor, cond=None):
        return x[:, self.perm], torch.zeros(x.shape[0], dtype=x.dtype)

    def inverse(self, z: torch.Tensor, cond=None):
        return z[:, self.inv_perm], torch.zeros(z.shape[0], dtype=z.dtype)

    def descriptor(self) -> dict:
        return {"type": "permutation", "seed": self.seed}


class _Coupling(nn.Module):
    """Common split/concat logic: the first half parameterizes a transform of the second."""

    def __init__(self, dim: int, cond_dim: int, hidden: list[int], params_per_dim: int):
        super().__init__()
        self.dim = dim
        self.d_passive = dim // 2
        self.d_active = dim - self.d_passive
        self.cond_dim = cond_dim
        in_dim = self.d_passive + cond_dim
        if in_dim == 0:
            in_dim = 1  # constant feature: unconditional 1-d flows
        self._constant_input = self.d_passive + cond_dim == 0
        self.subnet = make_subnet(in_dim, params_per_dim * self.d_active, hidden)

    def _net_input(self, passive: torch.Tensor, cond: torch.Tensor | None, n: int):
        parts = []
        if self.d_passive > 0:
            parts.append(passive)
        if cond is not None:
            parts.append(cond)
        if not parts:
            return torch.ones(n, 1, dtype=torch.float64)
        return torch.cat(parts, dim=-1)

    def _split(self, x: torch.Tensor):
        return x[:, : self.d_passive], x[:, self.d_passive :]

    def _join(self, passive: torch.Tensor, active: torch.Tensor):
        return torch.cat([passive, active], dim=-1)


class AffineCoupling(_Coupling):
    """y = x * exp(s) + t on the active half; s soft-clamped for stability."""

    def __init__(self, dim: int, cond_dim: int, hidden: list[int], scale_clamp: float = 2.0):
        super().__init__(dim, cond_dim, hidden, params_per_dim=2)
        self.scale_clamp = scale_clamp

    def _params(self, passive, cond, n):
        out = self.subnet(self._net_input(passive, cond, n))
        s_raw, t = out.chunk(2, dim=-1)
        s = self.scale_clamp * torch.tanh(s_raw / self.scale_clamp)
        return s, t

    def forward(self, x: torch.Tensor, cond=None):
        passive, active = self._split(x)
        s, t = self._params(passive, cond, x.shape[0])
        z_active = active * torch.exp(s) + t
        return self._join(passive, z_active), s.sum(dim=-1)

    def inverse(self, z: torch.Tensor, cond=None):
        passive, active = self._split(z)
        s, t = self._params(passive, cond, z.shape[0])
        x_active = (active - t) * torch.exp(-s)
        return self._join(passive, x_active), -s.sum(dim=-1)

    def descriptor(self) -> dict:
        return {"type": "affine", "scale_clamp": self.scale_clamp}


class VolumePreservingCoupling(AffineCoupling):
    """Affine coupling with per-sample zero-mean log scales; unit Jacobian."""

    def _params(self, passive, cond, n):
        s, t = super()._params(passive, cond, n)
        s = s - s.mean(dim=-1, keepdim=True)
        return s, t

    def forward(self, x: torch.Tensor, cond=None):
        z, log_det = super().forward(x, cond)
        return z, torch.zeros_like(log_det)

    def inverse(self, z: torch.Tensor, cond=None):
        x, log_det = super().inverse(z, cond)
        return x, torch.zeros_like(log_det)

    def descriptor(self) -> dict:
        return {"type": "volume_preserving", "scale_clamp": self.scale_clamp}


class SplineCoupling(_Coupling):
    """Rational-quadratic spline coupling (elementwise monotone map of the active half)."""

    def __init__(self, dim: int, cond_dim: int, hidden: list[int], n_bins: int = 8, bound: float = 3.0):
        super().__init__(dim, cond_dim, hidden, params_per_dim=splines.param_count(n_bins))
        self.n_bins = n_bins
        self.bound = bound

    def _raw_params(self, passive, cond, n):
        out = self.subnet(self._net_input(passive, cond, n))
        return out.reshape(n, self.d_active, splines.param_count(self.n_bins))

    def forward(self, x: torch.Tensor, cond=None):
        passive, active = self._split(x)
        raw = self._raw_params(passive, cond, x.shape[0])
        z_active, log_deriv = splines.rational_quadratic_spline(active, raw, self.bound, inverse=False)
        return self._join(passive, z_active), log_deriv.sum(dim=-1)

    def inverse(self, z: torch.Tensor, cond=None):
        passive, active = self._split(z)
        raw = self._raw_params(passive, cond, z.shape[0])
        x_active, log_deriv = splines.rational_quadratic_spline(active, raw, self.bound, inverse=True)
        return self._join(passive, x_active), log_deriv.sum(dim=-1)

    def descriptor(self) -> dict:
        return {"type": "spline", "n_bins": self.n_bins, "bound": self.bound}
