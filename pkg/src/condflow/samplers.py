"""Ground-truth data generation: MCMC chains, autocorrelation thinning,
rejection sampling for the power-scaled mixture, lattice augmentation, and
the dataset file format."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .targets import Phi4Lattice, PowerScaledGMM

DATASET_MAGIC = b"CNDDATA1"
DATASET_VERSION = 1


class ChainTooShort(RuntimeError):
    pass


class DivergedChain(RuntimeError):
    pass


class EnvelopeTooLoose(RuntimeError):
    pass


@dataclass
class Dataset:
    """Samples at a single condition plus enough provenance to regenerate them."""

    samples: torch.Tensor
    c: float
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def save(self, path) -> None:
        header = {
            "c": self.c,
            "n": self.n,
            "d": self.dim,
            "provenance": self.provenance,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<I", DATASET_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(self.samples.numpy().astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "Dataset":
        with open(path, "rb") as fh:
            magic = fh.read(len(DATASET_MAGIC))
            if magic != DATASET_MAGIC:
                raise ValueError(f"{path}: not a dataset file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != DATASET_VERSION:
                raise ValueError(f"{path}: unsupported dataset version {version}")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            raw = fh.read(8 * header["n"] * header["d"])
        samples = torch.frombuffer(bytearray(raw), dtype=torch.float64).clone()
        return Dataset(
            samples.reshape(header["n"], header["d"]),
            header["c"],
            header["provenance"],
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.dim)])
            for row in self.samples.tolist():
                writer.writerow([repr(v) for v in row])


# ---------------------------------------------------------------------------
# Metropolis-Hastings
# ---------------------------------------------------------------------------


def metropolis_run(
    target,
    c: float,
    n_chains: int,
    n_steps: int,
    step_size: float,
    init: torch.Tensor,
    generator: torch.Generator,
    burn_in: int = 0,
    thin_stride: int = 1,
):
    """Gaussian-proposal MH, vectorized over chains.

    Returns (states, info): states has shape (n_chains, n_kept, d); info
    carries the acceptance rate. Rejections are normal operation.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    x = init.clone().to(torch.float64)
    logq = target.log_q(x, c)
    kept = []
    accepted = 0
    total = 0
    for step in range(n_steps):
        prop = x + step_size * torch.randn(x.shape, dtype=torch.float64, generator=generator)
        logq_prop = target.log_q(prop, c)
        logu = torch.log(torch.rand(x.shape[0], dtype=torch.float64, generator=generator))
        accept = logu < (logq_prop - logq)
        x = torch.where(accept.unsqueeze(-1), prop, x)
        logq = torch.where(accept, logq_prop, logq)
        accepted += int(accept.sum())
        total += x.shape[0]
        if step >= burn_in and (step - burn_in) % thin_stride == 0:
            kept.append(x.clone())
    states = torch.stack(kept, dim=1) if kept else torch.zeros(n_chains, 0, x.shape[1])
    return states, {"acceptance": accepted / max(total, 1)}


def lattice_metropolis_run(
    target: Phi4Lattice,
    c: float,
    n_chains: int,
    n_sweeps: int,
    step_size: float,
    generator: torch.Generator,
    init: torch.Tensor | None = None,
    burn_in: int = 0,
    thin_stride: int = 1,
):
    """Checkerboard single-site Metropolis sweeps for the lattice action.

    Sites of one parity only interact with the other parity, so half the
    lattice updates in parallel; a sweep touches every site once.
    """
    L = target.L
    lam = target.quartic
    if init is None:
        phi = torch.randn(n_chains, L, L, dtype=torch.float64, generator=generator)
    else:
        phi = init.reshape(n_chains, L, L).clone().to(torch.float64)
    ii, jj = torch.meshgrid(torch.arange(L), torch.arange(L), indexing="ij")
    masks = [((ii + jj) % 2 == p).unsqueeze(0) for p in (0, 1)]
    kept = []
    accepted = 0
    total = 0
    for sweep in range(n_sweeps):
        for mask in masks:
            nn_sum = (
                torch.roll(phi, 1, dims=-1)
                + torch.roll(phi, -1, dims=-1)
                + torch.roll(phi, 1, dims=-2)
                + torch.roll(phi, -1, dims=-2)
            )
            prop = phi + step_size * torch.randn(phi.shape, dtype=torch.float64, generator=generator)
            d_action = (
                -2.0 * c * (prop - phi) * nn_sum
                + (1.0 - 2.0 * lam) * (prop * prop - phi * phi)
                + lam * (prop**4 - phi**4)
            )
            logu = torch.log(torch.rand(phi.shape, dtype=torch.float64, generator=generator))
            accept = (logu < -d_action) & mask
            phi = torch.where(accept, prop, phi)
            accepted += int(accept.sum())
            total += int(mask.sum()) * n_chains
        if sweep >= burn_in and (sweep - burn_in) % thin_stride == 0:
            kept.append(phi.reshape(n_chains, -1).clone())
    states = torch.stack(kept, dim=1)
    return states, {"acceptance": accepted / max(total, 1)}


def langevin_run(
    target,
    c: float,
    n_chains: int,
    n_steps: int,
    dt: float,
    generator: torch.Generator,
    init: torch.Tensor | None = None,
    burn_in: int = 0,
    thin_stride: int = 1,
    bound: float = 1e4,
):
    """Euler-Maruyama chains x <- x + dt grad log q + sqrt(2 dt) xi."""
    if init is None:
        x = torch.randn(n_chains, target.dim, dtype=torch.float64, generator=generator)
    else:
        x = init.clone().to(torch.float64)
    noise_scale = math.sqrt(2.0 * dt)
    kept = []
    for step in range(n_steps):
        x = x + dt * target.grad_log_q(x, c) + noise_scale * torch.randn(
            x.shape, dtype=torch.float64, generator=generator
        )
        if bool((x.abs() > bound).any()) or not bool(torch.isfinite(x).all()):
            raise DivergedChain(f"chain left |x| <= {bound} at step {step}")
        if step >= burn_in and (step - burn_in) % thin_stride == 0:
            kept.append(x.clone())
    states = torch.stack(kept, dim=1)
    return states, {}


# ---------------------------------------------------------------------------
# autocorrelation thinning
# ---------------------------------------------------------------------------


def integrated_autocorrelation_time(series: np.ndarray, window_factor: float = 5.0) -> float:
    """Sokal-windowed integrated autocorrelation time of a 1-d series."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    x = x - x.mean()
    var = float(np.mean(x * x))
    if var == 0.0:
        return 0.5
    # FFT autocovariance
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conjugate(f), m)[:n].real / n
    rho = acov / acov[0]
    tau = 0.5
    for t in range(1, n):
        tau += rho[t]
        if t >= window_factor * tau:
            return max(tau, 0.5)
    return max(tau, 0.5)


def thin_by_autocorrelation(chains: torch.Tensor, observable, c: float, provenance=None) -> Dataset:
    """Estimate tau of the observable per chain, keep every ceil(2 tau)-th state.

    chains: (n_chains, n_steps, d). Order within each chain is preserved.
    """
    n_chains, n_steps, _ = chains.shape
    taus = []
    for k in range(n_chains):
        obs = observable(chains[k]).numpy()
        taus.append(integrated_autocorrelation_time(obs))
    tau = float(np.mean(taus))
    if n_steps < 20.0 * tau:
        raise ChainTooShort(f"need at least 20 correlation times, have {n_steps / tau:.1f}")
    stride = max(int(math.ceil(2.0 * tau)), 1)
    thinned = chains[:, ::stride].reshape(-1, chains.shape[-1])
    prov = dict(provenance or {})
    prov.update({"tau": tau, "stride": stride})
    return Dataset(thinned, c, prov)


# ---------------------------------------------------------------------------
# rejection sampling for the power-scaled mixture
# ---------------------------------------------------------------------------


def _proposal_log_prob(gmm: PowerScaledGMM, x: torch.Tensor, noise_var: float) -> torch.Tensor:
    covs = gmm.covs + noise_var * torch.eye(2, dtype=torch.float64)
    prec = torch.linalg.inv(covs)
    log_norm = -0.5 * (2 * math.log(2 * math.pi) + torch.logdet(covs)) - math.log(len(gmm.MEANS))
    diff = x.unsqueeze(1) - gmm.means.unsqueeze(0)
    mahal = torch.einsum("nkd,kde,nke->nk", diff, prec, diff)
    return torch.logsumexp(log_norm.unsqueeze(0) - 0.5 * mahal, dim=-1)


def _sample_proposal(gmm: PowerScaledGMM, n: int, noise_var: float, generator: torch.Generator):
    comp = torch.randint(0, len(gmm.MEANS), (n,), generator=generator)
    covs = gmm.covs + noise_var * torch.eye(2, dtype=torch.float64)
    chols = torch.linalg.cholesky(covs)
    eps = torch.randn(n, 2, dtype=torch.float64, generator=generator)
    return gmm.means[comp] + torch.einsum("nde,ne->nd", chols[comp], eps)


def rejection_sample_power_gmm(
    gmm: PowerScaledGMM,
    c: float,
    n: int,
    generator: torch.Generator,
    noise_std: float = 0.75,
    envelope_margin: float = 1.5,
    max_batches: int = 10_000,
) -> torch.Tensor:
    """Exact samples from the power-scaled mixture via rejection.

    The proposal convolves each mode with isotropic noise; for c < 1 the
    noise is widened so the proposal tails dominate the flattened target.
    The envelope constant is found by grid search over the density ratio.
    """
    gmm.check_condition(c)
    lam_max = float(torch.linalg.eigvalsh(gmm.covs).max())
    noise_var = noise_std * noise_std
    if c < 1.0:
        # tail domination requires noise_var > lam_max (1 - c) / c per mode
        noise_var = max(noise_var, 1.3 * lam_max * (1.0 - c) / c)

    # envelope grid search: coarse global grid plus fine per-mode grids
    grids = [torch.cartesian_prod(
        torch.linspace(-14.0, 16.0, 181, dtype=torch.float64),
        torch.linspace(-14.0, 16.0, 181, dtype=torch.float64),
    )]
    span = 3.0 * math.sqrt(lam_max + noise_var)
    for mu in gmm.means:
        ax = torch.linspace(-span, span, 81, dtype=torch.float64)
        grids.append(mu.unsqueeze(0) + torch.cartesian_prod(ax, ax))
    log_m = -math.inf
    for g in grids:
        ratio = gmm.log_q(g, c) - _proposal_log_prob(gmm, g, noise_var)
        log_m = max(log_m, float(ratio.max()))
    log_m += math.log(envelope_margin)

    out = []
    n_drawn = 0
    n_accepted = 0
    batch = max(4 * n, 1024)
    for _ in range(max_batches):
        x = _sample_proposal(gmm, batch, noise_var, generator)
        log_ratio = gmm.log_q(x, c) - _proposal_log_prob(gmm, x, noise_var) - log_m
        if bool((log_ratio > 0).any()):
            raise EnvelopeTooLoose("density ratio exceeded the envelope constant")
        logu = torch.log(torch.rand(batch, dtype=torch.float64, generator=generator))
        acc = x[logu < log_ratio]
        out.append(acc)
        n_drawn += batch
        n_accepted += acc.shape[0]
        if n_accepted >= n:
            break
        if n_drawn >= 1e6 and n_accepted / n_drawn < 1e-4:
            raise EnvelopeTooLoose(f"acceptance rate {n_accepted / n_drawn:.2e}")
    if n_accepted < n:
        raise EnvelopeTooLoose("could not accept enough samples")
    return torch.cat(out, dim=0)[:n]


# ---------------------------------------------------------------------------
# lattice augmentation
# ---------------------------------------------------------------------------


def augment_lattice(batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random sign flip, mirrors, and periodic translations; the action is invariant."""
    flat_input = batch.dim() == 2
    if flat_input:
        n = batch.shape[0]
        L = int(math.isqrt(batch.shape[1]))
        phi = batch.reshape(n, L, L).clone()
    else:
        phi = batch.clone()
        n, L = phi.shape[0], phi.shape[1]

    sign = torch.randint(0, 2, (n, 1, 1), generator=generator) * 2 - 1
    phi = phi * sign.to(phi.dtype)
    flip_h = torch.rand(n, generator=generator) < 0.5
    phi[flip_h] = torch.flip(phi[flip_h], dims=[-1])
    flip_v = torch.rand(n, generator=generator) < 0.5
    phi[flip_v] = torch.flip(phi[flip_v], dims=[-2])

    shifts = torch.randint(0, L, (n, 2), generator=generator)
    rows = (torch.arange(L).view(1, L, 1) + shifts[:, 0].view(n, 1, 1)) % L
    cols = (torch.arange(L).view(1, 1, L) + shifts[:, 1].view(n, 1, 1)) % L
    pos = (rows * L + cols).expand(n, L, L).reshape(n, -1)
    phi = phi.reshape(n, -1).gather(1, pos).reshape(n, L, L)

    return phi.reshape(n, -1) if flat_input else phi
