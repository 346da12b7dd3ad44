"""Conditional latent distributions for the flows."""

from __future__ import annotations

import math

import torch

LOG_2PI = math.log(2.0 * math.pi)


def _c_column(c, n: int) -> torch.Tensor:
    c_t = c if isinstance(c, torch.Tensor) else torch.tensor(float(c), dtype=torch.float64)
    if c_t.dim() == 0:
        c_t = c_t.expand(n)
    return c_t


class StandardNormal:
    """Unit Gaussian, condition-independent."""

    kind = "standard_normal"

    def __init__(self, dim: int):
        self.dim = dim

    def log_prob(self, z: torch.Tensor, c) -> torch.Tensor:
        return -0.5 * (z * z).sum(dim=-1) - 0.5 * self.dim * LOG_2PI

    def sample(self, n: int, c, generator: torch.Generator) -> torch.Tensor:
        return torch.randn(n, self.dim, dtype=torch.float64, generator=generator)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


class PowerScaledNormal:
    """Unit Gaussian raised to a condition-dependent power.

    exponent="c/c0" gives N(0, I)^(c/c0), i.e. variance c0/c per coordinate
    (power-scaling). exponent="c0/c" gives variance c/c0 (temperature-style
    scaling where the distribution widens as c grows).
    """

    kind = "power_scaled_normal"

    def __init__(self, dim: int, c0: float = 1.0, exponent: str = "c/c0"):
        if exponent not in ("c/c0", "c0/c"):
            raise ValueError(f"unknown exponent mode {exponent!r}")
        self.dim = dim
        self.c0 = float(c0)
        self.exponent = exponent

    def _power(self, c, n: int):
        c_t = _c_column(c, n)
        return c_t / self.c0 if self.exponent == "c/c0" else self.c0 / c_t

    def log_prob(self, z: torch.Tensor, c) -> torch.Tensor:
        p = self._power(c, z.shape[0])
        sq = (z * z).sum(dim=-1)
        return -0.5 * p * sq + 0.5 * self.dim * (torch.log(p) - LOG_2PI)

    def sample(self, n: int, c, generator: torch.Generator) -> torch.Tensor:
        p = self._power(c, n)
        std = p.rsqrt().unsqueeze(-1)
        return std * torch.randn(n, self.dim, dtype=torch.float64, generator=generator)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "c0": self.c0, "exponent": self.exponent}


class UniformTruncatedNormalMix:
    """Per-coordinate mixture of U(-B, B) and a truncated unit normal on [-B, B]."""

    kind = "uniform_truncnorm_mix"

    def __init__(self, dim: int, bound: float = 3.0, uniform_weight: float = 0.5):
        self.dim = dim
        self.bound = float(bound)
        self.uniform_weight = float(uniform_weight)
        # normal mass inside [-B, B]
        self._trunc_mass = math.erf(self.bound / math.sqrt(2.0))

    def _log_prob_1d(self, z: torch.Tensor) -> torch.Tensor:
        log_uni = math.log(self.uniform_weight / (2.0 * self.bound))
        log_tn = (
            math.log(1.0 - self.uniform_weight)
            - 0.5 * z * z
            - 0.5 * LOG_2PI
            - math.log(self._trunc_mass)
        )
        stacked = torch.stack([torch.full_like(z, log_uni), log_tn], dim=-1)
        out = torch.logsumexp(stacked, dim=-1)
        return torch.where(z.abs() <= self.bound, out, torch.full_like(out, -1e30))

    def log_prob(self, z: torch.Tensor, c) -> torch.Tensor:
        return self._log_prob_1d(z).sum(dim=-1)

    def sample(self, n: int, c, generator: torch.Generator) -> torch.Tensor:
        pick = torch.rand(n, self.dim, dtype=torch.float64, generator=generator)
        uni = (torch.rand(n, self.dim, dtype=torch.float64, generator=generator) * 2.0 - 1.0) * self.bound
        # truncated normal via inverse CDF
        u = torch.rand(n, self.dim, dtype=torch.float64, generator=generator)
        lo = 0.5 * (1.0 - self._trunc_mass)
        trunc = math.sqrt(2.0) * torch.erfinv(2.0 * (lo + u * self._trunc_mass) - 1.0)
        return torch.where(pick < self.uniform_weight, uni, trunc)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "bound": self.bound,
            "uniform_weight": self.uniform_weight,
        }


def latent_from_descriptor(desc: dict):
    kind = desc["kind"]
    if kind == StandardNormal.kind:
        return StandardNormal(desc["dim"])
    if kind == PowerScaledNormal.kind:
        return PowerScaledNormal(desc["dim"], desc["c0"], desc["exponent"])
    if kind == UniformTruncatedNormalMix.kind:
        return UniformTruncatedNormalMix(desc["dim"], desc["bound"], desc["uniform_weight"])
    raise ValueError(f"unknown latent kind {kind!r}")
