"""Evaluation metrics: NLL, relative effective sample size, histogram KL,
lattice observables, posterior calibration, and mixture validation KL."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .samplers import rejection_sample_power_gmm
from .targets import quadrature_logz, two_moons_radius, two_moons_simulate


class EmptyDataset(ValueError):
    pass


def nll(model, dataset: torch.Tensor, c, context=None) -> float:
    """Mean negative log-likelihood of a dataset at condition c."""
    if dataset.shape[0] == 0:
        raise EmptyDataset("empty dataset")
    with torch.no_grad():
        return float(-model.log_prob(dataset, c, context).mean())


def relative_ess(model, target, c, n: int, generator: torch.Generator, context=None) -> float:
    """Kish effective sample size fraction of q/p_model weights on model samples.

    Computed entirely in log space; a positive rescaling of q cancels.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    with torch.no_grad():
        x, log_p = model.sample(n, c, generator, context)
        log_w = target.log_q(x, c, context) - log_p
        lse1 = torch.logsumexp(log_w, dim=0)
        lse2 = torch.logsumexp(2.0 * log_w, dim=0)
        return float(torch.exp(2.0 * lse1 - lse2 - math.log(n)))


def hist_kl_2d(
    samples_a: torch.Tensor,
    samples_b: torch.Tensor,
    bins: int = 50,
    value_range=None,
) -> float:
    """KL(hist_a || hist_b) over a shared 2-d binning.

    Each histogram receives 1/(total count) pseudo-mass per bin before
    normalization so empty bins stay finite. Asymmetric in its arguments.
    """
    a = samples_a.numpy() if isinstance(samples_a, torch.Tensor) else np.asarray(samples_a)
    b = samples_b.numpy() if isinstance(samples_b, torch.Tensor) else np.asarray(samples_b)
    if value_range is None:
        lo = np.minimum(a.min(axis=0), b.min(axis=0))
        hi = np.maximum(a.max(axis=0), b.max(axis=0))
        value_range = [[lo[0], hi[0]], [lo[1], hi[1]]]
    ha, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=bins, range=value_range)
    hb, _, _ = np.histogram2d(b[:, 0], b[:, 1], bins=bins, range=value_range)
    pa = ha + 1.0 / a.shape[0]
    pb = hb + 1.0 / b.shape[0]
    pa /= pa.sum()
    pb /= pb.sum()
    return float(np.sum(pa * (np.log(pa) - np.log(pb))))


# ---------------------------------------------------------------------------
# lattice observables
# ---------------------------------------------------------------------------


@dataclass
class ObservableReport:
    kappa: float
    n_samples: int
    values: dict = field(default_factory=dict)  # name -> (value, bootstrap std)

    def value(self, name: str) -> float:
        return self.values[name][0]

    def err(self, name: str) -> float:
        return self.values[name][1]


def _bootstrap(stat_fn, arrays: list[np.ndarray], n_boot: int, rng: np.random.Generator):
    n = arrays[0].shape[0]
    vals = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, n)
        vals[b] = stat_fn(*[a[idx] for a in arrays])
    return float(np.std(vals, ddof=1))


def lattice_observables(
    samples: torch.Tensor,
    target,
    kappa: float,
    n_boot: int = 200,
    seed: int = 0,
) -> ObservableReport:
    """Absolute magnetization, action per spin, susceptibility, Binder cumulant.

    Bootstrap errors over resampled configurations.
    """
    n_sites = target.dim
    m = (samples.sum(dim=-1).abs() / n_sites).numpy()
    s = (target.action(samples, kappa) / n_sites).numpy()
    rng = np.random.default_rng(seed)

    def chi2(mv):
        return n_sites * (np.mean(mv**2) - np.mean(mv) ** 2)

    def binder(mv):
        m2 = np.mean(mv**2)
        return 1.0 - np.mean(mv**4) / (3.0 * m2 * m2) if m2 > 0 else 0.0

    report = ObservableReport(kappa=kappa, n_samples=samples.shape[0])
    report.values["abs_magnetization"] = (
        float(np.mean(m)),
        _bootstrap(lambda mv: np.mean(mv), [m], n_boot, rng),
    )
    report.values["action_per_spin"] = (
        float(np.mean(s)),
        _bootstrap(lambda sv: np.mean(sv), [s], n_boot, rng),
    )
    report.values["susceptibility"] = (float(chi2(m)), _bootstrap(chi2, [m], n_boot, rng))
    report.values["binder_cumulant"] = (float(binder(m)), _bootstrap(binder, [m], n_boot, rng))
    return report


# ---------------------------------------------------------------------------
# two-moons calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationCurve:
    beta: float
    nominal: np.ndarray
    empirical: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.empirical - self.nominal)))


def two_moons_calibration(
    model,
    beta: float,
    n_pairs: int,
    n_post: int,
    generator: torch.Generator,
    prior_std: float = 0.3,
    n_boot: int = 200,
    nominal=None,
    chunk: int = 200_000,
) -> CalibrationCurve:
    """Coverage of the radial noise under model posteriors vs tempered truth.

    Draws (psi, y) from prior x tempered simulator; per observation draws
    n_post model samples, reconstructs their radial noise, and measures the
    central (median-outward) mass needed to reach the true radius. Calibrated
    models make that mass uniform.
    """
    if n_post < 10:
        raise ValueError("n_post must be at least 10 for a meaningful interval")
    psi = prior_std * torch.randn(n_pairs, 2, dtype=torch.float64, generator=generator)
    y = two_moons_simulate(psi, beta, generator)
    r_true = two_moons_radius(psi, y)

    cover = torch.empty(n_pairs, dtype=torch.float64)
    rows_per_chunk = max(chunk // n_post, 1)
    with torch.no_grad():
        for start in range(0, n_pairs, rows_per_chunk):
            stop = min(start + rows_per_chunk, n_pairs)
            k = stop - start
            ctx = y[start:stop].repeat_interleave(n_post, dim=0)
            draws, _ = model.sample(k * n_post, beta, generator, ctx)
            r_model = two_moons_radius(draws, ctx).reshape(k, n_post)
            med = r_model.median(dim=1, keepdim=True).values
            dist_true = (r_true[start:stop].unsqueeze(1) - med).abs()
            cover[start:stop] = ((r_model - med).abs() <= dist_true).double().mean(dim=1)

    if nominal is None:
        nominal = np.linspace(0.05, 0.95, 19)
    cov = cover.numpy()
    empirical = np.array([np.mean(cov <= a) for a in nominal])
    rng = np.random.default_rng(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
    boot = np.empty((n_boot, len(nominal)))
    for b in range(n_boot):
        idx = rng.integers(0, n_pairs, n_pairs)
        cb = cov[idx]
        boot[b] = [np.mean(cb <= a) for a in nominal]
    return CalibrationCurve(
        beta=beta,
        nominal=np.asarray(nominal),
        empirical=empirical,
        band_lo=np.percentile(boot, 2.5, axis=0),
        band_hi=np.percentile(boot, 97.5, axis=0),
    )


# ---------------------------------------------------------------------------
# mixture validation KL
# ---------------------------------------------------------------------------


def gmm_validation_kld(
    model,
    gmm,
    c: float,
    n_val: int,
    generator: torch.Generator,
    n_boot: int = 20,
    logz: float | None = None,
    samples: torch.Tensor | None = None,
) -> tuple[float, float]:
    """Forward KL E_p*[log p* - log p_model] at condition c, with bootstrap error.

    The target is normalized through quadrature of the power-scaled density;
    validation samples come from the exact rejection sampler.
    """
    if samples is None:
        samples = rejection_sample_power_gmm(gmm, c, n_val, generator)
    if logz is None:
        logz = quadrature_logz(gmm, c, -14.0, 16.0, 601)
    with torch.no_grad():
        log_pstar = gmm.log_q(samples, c) - logz
        log_pm = model.log_prob(samples, c)
        diffs = (log_pstar - log_pm).numpy()
    rng = np.random.default_rng(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
    err = _bootstrap(lambda d: np.mean(d), [diffs], n_boot, rng)
    return float(np.mean(diffs)), err


# ---------------------------------------------------------------------------
# run-level records
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    """Flat metric records; one row per (condition, metric)."""

    rows: list = field(default_factory=list)

    def add(self, condition, metric: str, value: float, error: float | None = None):
        self.rows.append(
            {"condition": condition, "metric": metric, "value": value, "error": error}
        )

    def get(self, condition, metric: str) -> float:
        for r in self.rows:
            if r["metric"] == metric and r["condition"] == condition:
                return r["value"]
        raise KeyError((condition, metric))

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("condition,metric,value,error\n")
            for r in self.rows:
                err = "" if r["error"] is None else repr(r["error"])
                fh.write(f"{r['condition']!r},{r['metric']},{r['value']!r},{err}\n")

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.rows, fh, indent=1, sort_keys=True)
