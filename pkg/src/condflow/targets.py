"""Conditional unnormalized densities: log q(x|c), its condition derivative,
and exact oracles (samplers, quadrature normalizers) where available."""

from __future__ import annotations

import math

import numpy as np
import torch

LOG_2PI = math.log(2.0 * math.pi)


class ConditionOutOfRange(ValueError):
    pass


class GridTooCoarse(RuntimeError):
    pass


class ConditionalTarget:
    """Interface: unnormalized conditional density over R^d.

    Subclasses provide log_q and dlogq_dc; both accept (n, d) batches and a
    scalar or per-sample condition. `context` carries per-sample side
    information (e.g. observations for amortized posteriors) and is ignored
    by most targets.
    """

    dim: int
    c_min: float
    c_max: float
    c0: float
    has_exact_sampler = False
    has_quadrature_logz = False

    def check_condition(self, c) -> None:
        c_t = torch.as_tensor(c, dtype=torch.float64)
        lo = self.c_min * (1.0 - 1e-9)
        hi = self.c_max * (1.0 + 1e-9)
        if bool((c_t < lo).any()) or bool((c_t > hi).any()):
            raise ConditionOutOfRange(
                f"condition {c} outside [{self.c_min}, {self.c_max}]"
            )

    def log_q(self, x: torch.Tensor, c, context=None) -> torch.Tensor:
        raise NotImplementedError

    def dlogq_dc(self, x: torch.Tensor, c, context=None) -> torch.Tensor:
        raise NotImplementedError

    def grad_log_q(self, x: torch.Tensor, c) -> torch.Tensor:
        """d log q / dx, for Langevin sampling; analytic where implemented."""
        raise NotImplementedError


def _c_vec(c, n: int) -> torch.Tensor:
    c_t = c if isinstance(c, torch.Tensor) else torch.tensor(float(c), dtype=torch.float64)
    return c_t.expand(n) if c_t.dim() == 0 else c_t


class GaussianTemperature(ConditionalTarget):
    """Isotropic Gaussian energy E(x) = ||x||^2 / 2 at temperature T.

    q(x|T) = exp(-E(x)/T); the normalized law is N(0, T I), which makes the
    family a closed-form test bed.
    """

    has_exact_sampler = True
    has_quadrature_logz = True

    def __init__(self, dim: int = 1, c_min: float = 0.25, c_max: float = 2.0, c0: float = 1.0):
        self.dim = dim
        self.c_min = c_min
        self.c_max = c_max
        self.c0 = c0

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        return 0.5 * (x * x).sum(dim=-1)

    def log_q(self, x, c, context=None):
        self.check_condition(c)
        return -self.energy(x) / _c_vec(c, x.shape[0])

    def dlogq_dc(self, x, c, context=None):
        self.check_condition(c)
        t = _c_vec(c, x.shape[0])
        return self.energy(x) / (t * t)

    def grad_log_q(self, x, c):
        return -x / _c_vec(c, x.shape[0]).unsqueeze(-1)

    def exact_sample(self, n: int, c, generator: torch.Generator) -> torch.Tensor:
        t = _c_vec(c, n).unsqueeze(-1)
        return torch.sqrt(t) * torch.randn(n, self.dim, dtype=torch.float64, generator=generator)

    def exact_log_prob(self, x, c):
        t = _c_vec(c, x.shape[0])
        return -self.energy(x) / t - 0.5 * self.dim * (LOG_2PI + torch.log(t))

    def exact_log_z(self, c: float) -> float:
        return 0.5 * self.dim * (LOG_2PI + math.log(c))


class MultiWell(ConditionalTarget):
    """Separable double-well energy per coordinate, Boltzmann-distributed in T.

    E(x) = sum_i a x_i + b x_i^2 + c4 x_i^4 with b < 0 < c4, giving two basins
    per coordinate (2^d in total). k_B = 1.
    """

    def __init__(
        self,
        dim: int = 5,
        a: float = 0.1,
        b: float = -2.0,
        c_quartic: float = 0.5,
        c_min: float = 0.4,
        c_max: float = 1.2,
        c0: float = 1.0,
    ):
        self.dim = dim
        self.a = a
        self.b = b
        self.c_quartic = c_quartic
        self.c_min = c_min
        self.c_max = c_max
        self.c0 = c0

    def energy_1d(self, x: torch.Tensor) -> torch.Tensor:
        return self.a * x + self.b * x * x + self.c_quartic * x**4

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        return self.energy_1d(x).sum(dim=-1)

    def log_q(self, x, c, context=None):
        self.check_condition(c)
        return -self.energy(x) / _c_vec(c, x.shape[0])

    def dlogq_dc(self, x, c, context=None):
        self.check_condition(c)
        t = _c_vec(c, x.shape[0])
        return self.energy(x) / (t * t)

    def grad_log_q(self, x, c):
        de = self.a + 2.0 * self.b * x + 4.0 * self.c_quartic * x**3
        return -de / _c_vec(c, x.shape[0]).unsqueeze(-1)

    def minima(self) -> tuple[float, float]:
        """Locations of the two local minima of the 1-d energy."""
        roots = np.roots([4.0 * self.c_quartic, 0.0, 2.0 * self.b, self.a])
        real = sorted(float(r.real) for r in roots if abs(r.imag) < 1e-12)
        if len(real) != 3:
            raise RuntimeError("energy does not have two basins")
        return real[0], real[2]

    def basin_centers(self) -> torch.Tensor:
        """(2^d, d) grid of per-coordinate minima, one row per basin."""
        lo, hi = self.minima()
        rows = []
        for mask in range(2**self.dim):
            rows.append([hi if (mask >> i) & 1 else lo for i in range(self.dim)])
        return torch.tensor(rows, dtype=torch.float64)


class PowerScaledGMM(ConditionalTarget):
    """Two-dimensional six-mode Gaussian mixture raised to the power c/c0."""

    has_exact_sampler = True  # exact only at c == c0
    has_quadrature_logz = True

    MEANS = [[-1.0, 2.0], [3.0, 7.0], [-4.0, 2.0], [-2.0, -4.0], [0.0, 4.0], [5.0, -2.0]]
    COVS = [
        [[0.2778, 0.4797], [0.4797, 0.8615]],
        [[0.8958, -0.0249], [-0.0249, 0.1001]],
        # printed asymmetric in the source; symmetrized via (S + S^T)/2
        [[1.3074, 0.9223], [0.7744, 0.1001]],
        [[0.0305, 0.0142], [0.0142, 0.4409]],
        [[0.0463, 0.0294], [0.0294, 0.3441]],
        [[0.1500, 0.0294], [0.0294, 1.5000]],
    ]

    def __init__(self, c_min: float = 0.16238, c_max: float = 6.15848, c0: float = 1.0):
        self.dim = 2
        self.c_min = c_min
        self.c_max = c_max
        self.c0 = c0
        means = torch.tensor(self.MEANS, dtype=torch.float64)
        covs = torch.tensor(self.COVS, dtype=torch.float64)
        covs = 0.5 * (covs + covs.transpose(-1, -2))
        # the symmetrized third matrix is indefinite; project to the nearest
        # positive-definite matrix with eigenvalues floored at the scale of
        # the smallest eigenvalue of the well-formed modes
        eigs, vecs = torch.linalg.eigh(covs)
        eigs = eigs.clamp(min=0.03)
        covs = torch.einsum("kde,ke,kfe->kdf", vecs, eigs, vecs)
        if bool((torch.linalg.eigvalsh(covs) <= 0).any()):
            raise ValueError("mixture covariances must be positive definite")
        self.means = means
        self.covs = covs
        self.precisions = torch.linalg.inv(covs)
        self.log_norms = -0.5 * (2 * LOG_2PI + torch.logdet(covs)) - math.log(len(self.MEANS))
        self._chols = torch.linalg.cholesky(covs)

    def base_log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """log p*(x|c0): the normalized mixture density."""
        diff = x.unsqueeze(1) - self.means.unsqueeze(0)  # (n, 6, 2)
        mahal = torch.einsum("nkd,kde,nke->nk", diff, self.precisions, diff)
        comp = self.log_norms.unsqueeze(0) - 0.5 * mahal
        return torch.logsumexp(comp, dim=-1)

    def log_q(self, x, c, context=None):
        self.check_condition(c)
        return _c_vec(c, x.shape[0]) / self.c0 * self.base_log_prob(x)

    def dlogq_dc(self, x, c, context=None):
        self.check_condition(c)
        return self.base_log_prob(x) / self.c0

    def exact_sample(self, n: int, c, generator: torch.Generator) -> torch.Tensor:
        if abs(float(torch.as_tensor(c).reshape(-1)[0]) - self.c0) > 1e-12:
            raise ValueError("exact sampling only available at the reference condition")
        comp = torch.randint(0, len(self.MEANS), (n,), generator=generator)
        eps = torch.randn(n, 2, dtype=torch.float64, generator=generator)
        return self.means[comp] + torch.einsum("nde,ne->nd", self._chols[comp], eps)


class TwoMoonsPosterior(ConditionalTarget):
    """Tempered posterior of the crescent-shaped simulator benchmark.

    q(psi | y, beta) = p(psi) * p(y|psi)^beta with a Gaussian prior; the
    condition is the likelihood power beta, the observation y is per-sample
    context (or a fixed stored observation).
    """

    R_MEAN = 0.1
    R_STD = 0.01
    OFFSET = 0.25

    def __init__(
        self,
        observation=None,
        prior_std: float = 0.3,
        c_min: float = 0.5,
        c_max: float = 2.0,
        c0: float = 1.0,
    ):
        self.dim = 2
        self.prior_std = prior_std
        self.c_min = c_min
        self.c_max = c_max
        self.c0 = c0
        self.observation = None
        if observation is not None:
            self.observation = torch.as_tensor(observation, dtype=torch.float64).reshape(1, 2)

    def _context(self, x: torch.Tensor, context) -> torch.Tensor:
        if context is not None:
            return context
        if self.observation is None:
            raise ValueError("no observation stored and no context given")
        return self.observation.expand(x.shape[0], 2)

    def log_prior(self, psi: torch.Tensor) -> torch.Tensor:
        v = self.prior_std * self.prior_std
        return -0.5 * (psi * psi).sum(dim=-1) / v - math.log(2.0 * math.pi * v)

    def log_likelihood(self, psi: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Closed-form log p(y|psi) from the polar noise construction."""
        u = y[:, 0] + (psi[:, 0] - psi[:, 1]).abs() / math.sqrt(2.0) - self.OFFSET
        v = y[:, 1] + (-psi[:, 0] + psi[:, 1]) / math.sqrt(2.0)
        r = torch.sqrt(u * u + v * v)
        log_pr = -0.5 * ((r - self.R_MEAN) / self.R_STD) ** 2 - math.log(
            self.R_STD
        ) - 0.5 * LOG_2PI
        # alpha uniform on (-pi/2, pi/2); polar Jacobian contributes -log r
        ll = log_pr - math.log(math.pi) - torch.log(r.clamp(min=1e-12))
        return torch.where(u > 0, ll, torch.full_like(ll, -1e4) - u * u)

    def log_q(self, x, c, context=None):
        self.check_condition(c)
        y = self._context(x, context)
        return self.log_prior(x) + _c_vec(c, x.shape[0]) * self.log_likelihood(x, y)

    def dlogq_dc(self, x, c, context=None):
        self.check_condition(c)
        return self.log_likelihood(x, self._context(x, context))

    def sample_prior(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return self.prior_std * torch.randn(n, 2, dtype=torch.float64, generator=generator)


def two_moons_observation(psi: torch.Tensor, r: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Deterministic part of the simulator: (psi, noise draws) -> observation."""
    tm = TwoMoonsPosterior
    y1 = -(psi[:, 0] - psi[:, 1]).abs() / math.sqrt(2.0) + r * torch.cos(alpha) + tm.OFFSET
    y2 = -(-psi[:, 0] + psi[:, 1]) / math.sqrt(2.0) + r * torch.sin(alpha)
    return torch.stack([y1, y2], dim=-1)


def two_moons_simulate(psi: torch.Tensor, beta: float, generator: torch.Generator) -> torch.Tensor:
    """Draw observations y given parameters psi from the tempered simulator.

    r ~ N(0.1, 0.01^2 / beta), alpha ~ U(-pi/2, pi/2); valid for
    beta in [0.5, 2] where tempering the r-noise approximates tempering the
    likelihood.
    """
    if not (0.5 - 1e-9 <= beta <= 2.0 + 1e-9):
        raise ConditionOutOfRange("tempered simulator valid for beta in [0.5, 2]")
    n = psi.shape[0]
    tm = TwoMoonsPosterior
    r = tm.R_MEAN + tm.R_STD / math.sqrt(beta) * torch.randn(
        n, dtype=torch.float64, generator=generator
    )
    alpha = (torch.rand(n, dtype=torch.float64, generator=generator) - 0.5) * math.pi
    return two_moons_observation(psi, r, alpha)


def two_moons_radius(psi: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Invert the simulator geometry: the radial noise consistent with (psi, y)."""
    tm = TwoMoonsPosterior
    u = y[:, 0] + (psi[:, 0] - psi[:, 1]).abs() / math.sqrt(2.0) - tm.OFFSET
    v = y[:, 1] + (-psi[:, 0] + psi[:, 1]) / math.sqrt(2.0)
    return torch.sqrt(u * u + v * v)


class Phi4Lattice(ConditionalTarget):
    """Two-dimensional scalar field theory on an L x L periodic lattice.

    S(phi) = sum_x [-2 kappa sum_mu phi_x phi_{x+mu} + (1-2 lambda) phi_x^2
    + lambda phi_x^4]; q(phi|kappa) = exp(-S). States are flattened to (n, L*L).
    """

    def __init__(
        self,
        lattice_size: int = 8,
        quartic: float = 0.02,
        c_min: float = 0.22,
        c_max: float = 0.32,
        c0: float = 0.25,
    ):
        self.L = lattice_size
        self.dim = lattice_size * lattice_size
        self.quartic = quartic
        self.c_min = c_min
        self.c_max = c_max
        self.c0 = c0

    def _grid(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(-1, self.L, self.L)

    def neighbor_sum_forward(self, phi: torch.Tensor) -> torch.Tensor:
        """sum_x sum_mu phi_x phi_{x+mu} over the two forward directions."""
        return (phi * torch.roll(phi, -1, dims=-1)).sum(dim=(-1, -2)) + (
            phi * torch.roll(phi, -1, dims=-2)
        ).sum(dim=(-1, -2))

    def action(self, x: torch.Tensor, kappa) -> torch.Tensor:
        phi = self._grid(x)
        k = _c_vec(kappa, phi.shape[0])
        hop = self.neighbor_sum_forward(phi)
        p2 = (phi * phi).sum(dim=(-1, -2))
        p4 = (phi**4).sum(dim=(-1, -2))
        return -2.0 * k * hop + (1.0 - 2.0 * self.quartic) * p2 + self.quartic * p4

    def log_q(self, x, c, context=None):
        self.check_condition(c)
        return -self.action(x, c)

    def dlogq_dc(self, x, c, context=None):
        self.check_condition(c)
        return 2.0 * self.neighbor_sum_forward(self._grid(x))

    def grad_log_q(self, x, c):
        phi = self._grid(x)
        k = _c_vec(c, phi.shape[0]).reshape(-1, 1, 1)
        nn_sum = (
            torch.roll(phi, 1, dims=-1)
            + torch.roll(phi, -1, dims=-1)
            + torch.roll(phi, 1, dims=-2)
            + torch.roll(phi, -1, dims=-2)
        )
        dS = -2.0 * k * nn_sum + 2.0 * (1.0 - 2.0 * self.quartic) * phi + 4.0 * self.quartic * phi**3
        return -dS.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# quadrature normalizer (d <= 2)
# ---------------------------------------------------------------------------


def _trapezoid_log_weights(n: int, spacing: float) -> torch.Tensor:
    w = torch.full((n,), spacing, dtype=torch.float64)
    w[0] *= 0.5
    w[-1] *= 0.5
    return torch.log(w)


def _grid_log_integral(target, c, lo: float, hi: float, n: int, context=None) -> float:
    if target.dim == 1:
        xs = torch.linspace(lo, hi, n, dtype=torch.float64).unsqueeze(-1)
        logw = _trapezoid_log_weights(n, (hi - lo) / (n - 1))
        logq = target.log_q(xs, c, context)
        return float(torch.logsumexp(logq + logw, dim=0))
    if target.dim == 2:
        axis = torch.linspace(lo, hi, n, dtype=torch.float64)
        gx, gy = torch.meshgrid(axis, axis, indexing="ij")
        pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
        logw1 = _trapezoid_log_weights(n, (hi - lo) / (n - 1))
        logw = (logw1.unsqueeze(0) + logw1.unsqueeze(1)).reshape(-1)
        logq = target.log_q(pts, c, context)
        return float(torch.logsumexp(logq + logw, dim=0))
    raise ValueError("quadrature normalizer supports d <= 2 only")


def quadrature_logz(
    target,
    c,
    lo: float,
    hi: float,
    n: int,
    context=None,
    tol: float = 1e-4,
) -> float:
    """log of the trapezoid-rule integral of q over [lo, hi]^d.

    Raises GridTooCoarse when doubling the resolution moves the result by
    more than `tol`; the refined value is returned.
    """
    coarse = _grid_log_integral(target, c, lo, hi, n, context)
    fine = _grid_log_integral(target, c, lo, hi, 2 * n - 1, context)
    if abs(fine - coarse) > tol:
        raise GridTooCoarse(
            f"logZ moved by {abs(fine - coarse):.3e} when doubling the grid"
        )
    return fine
