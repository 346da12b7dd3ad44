"""Training objective: boundary losses at the reference condition plus the
condition-gradient penalty that propagates the density across conditions.

The gradient penalty enforces, per evaluation point x and condition c,

    rho = d/dc [log p_model(x|c) - log q(x|c)] + E_p[d/dc log q(.|c)]  -> 0,

where the expectation makes the unnormalized q usable (its normalizer's
condition derivative is exactly that expectation). rho is computed with a
forward tangent in c and stays differentiable in the model parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.autograd.forward_ad as fwAD

from .autodiff import stable_softmax
from .targets import ConditionalTarget

logger = logging.getLogger("condflow")


class EmptyBatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ObjectiveConfig:
    """All knobs of the combined objective."""

    boundary: str = "nll"  # nll | backward_kl | reweighted | nll+backward_kl
    use_gradient_loss: bool = True
    lambda_fixed: float = 1.0
    balance: bool = True
    alpha_balance: float = 0.1
    balance_interval: int = 25

    discretize: bool = False
    n_grid: int = 15
    epsilon: float = 1.0
    gamma_epsilon: float = 1.0
    r_epsilon: float = 1.0
    alpha_expectation: float = 0.5
    alpha_grad: float = 0.9
    expectation_interval: int = 100
    expectation_samples: int = 1000

    huber_delta: float = 0.0
    sigma_noise: float = 0.0
    s_min: float = 0.01
    s_max: float = 1.5
    warmup_steps: int = 0
    energy_free: bool = False
    p_base: str = "model"  # model | model_c0 | exact_c0
    grad_conditions_per_step: int = 1
    grad_points_per_condition: int = 128
    snis_samples: int = 500  # continuous mode, per condition
    snis_per_context: int = 64  # amortized targets, per evaluation pair
    augment_eval_points: bool = False
    backward_kl_samples: int = 128

    def validate(self) -> list[str]:
        errors = []
        if self.boundary not in ("nll", "backward_kl", "reweighted", "nll+backward_kl"):
            errors.append(f"unknown boundary loss {self.boundary!r}")
        for name in ("alpha_balance", "alpha_expectation", "alpha_grad"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                errors.append(f"{name} must be in (0, 1], got {v}")
        if self.s_min > self.s_max:
            errors.append("s_min must be <= s_max")
        if self.expectation_samples < 2 or self.snis_samples < 2:
            errors.append("importance-sampling estimates need at least 2 samples")
        if self.huber_delta < 0:
            errors.append("huber_delta must be >= 0")
        return errors


# ---------------------------------------------------------------------------
# self-normalized importance sampling
# ---------------------------------------------------------------------------


def snis_from_samples(
    target,
    c,
    samples: torch.Tensor,
    log_base: torch.Tensor,
    context: torch.Tensor | None = None,
) -> torch.Tensor:
    """SNIS estimate of E_p[d/dc log q] from base samples with known log-density.

    Weights are computed in log space with max subtraction; a positive
    rescaling of q cancels. Degenerate weights are logged, not raised.
    """
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    logw = target.log_q(samples, c, context) - log_base
    w = stable_softmax(logw, dim=0)
    if float(w.max()) > 1.0 - 1e-9:
        logger.warning("degenerate importance weights (max weight %.3g)", float(w.max()))
    g = target.dlogq_dc(samples, c, context)
    return (w * g).sum()


def snis_expectation(
    model,
    target,
    c: float,
    n: int,
    generator: torch.Generator,
    p_base: str = "model",
    c0: float | None = None,
    context: torch.Tensor | None = None,
) -> float:
    """Draw N base samples and estimate E_{p(x|c)}[d/dc log q(x|c)].

    p_base selects the base distribution: the model at c, the model at c0, or
    the target's exact sampler at c0 (whose density equals q(.|c0)/Z, so the
    unknown Z cancels in the self-normalization).
    """
    with torch.no_grad():
        if p_base == "model":
            x, logp = model.sample(n, c, generator, context)
        elif p_base == "model_c0":
            x, logp = model.sample(n, c0 if c0 is not None else target.c0, generator, context)
        elif p_base == "exact_c0":
            cc0 = c0 if c0 is not None else target.c0
            x = target.exact_sample(n, cc0, generator)
            logp = target.log_q(x, cc0, context)
        else:
            raise ValueError(f"unknown base distribution {p_base!r}")
        return float(snis_from_samples(target, c, x, logp, context))


# ---------------------------------------------------------------------------
# gradient loss
# ---------------------------------------------------------------------------


def pointwise_penalty(residual: torch.Tensor, delta: float) -> torch.Tensor:
    """Squared residual, or the Huber penalty when delta > 0."""
    if delta <= 0:
        return residual * residual
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual * residual, delta * (a - 0.5 * delta))


def gradient_residuals(
    model,
    target,
    x: torch.Tensor,
    c,
    expectation,
    context: torch.Tensor | None = None,
    huber_delta: float = 0.0,
) -> torch.Tensor:
    """Per-sample penalty of the condition-gradient residual.

    x is treated as a fixed evaluation point (detached); the model's
    condition derivative is obtained by threading a forward tangent in c
    through log_prob, which keeps the result differentiable in the
    parameters (reverse over the forward tangent). The target derivative and
    the expectation are constants.
    """
    x = x.detach()
    n = x.shape[0]
    c_t = c if isinstance(c, torch.Tensor) else torch.tensor(float(c), dtype=torch.float64)
    if c_t.dim() == 0:
        c_t = c_t.expand(n)
    c_t = c_t.detach().contiguous()
    exp_t = expectation if isinstance(expectation, torch.Tensor) else torch.tensor(
        float(expectation), dtype=torch.float64
    )
    if exp_t.dim() == 0:
        exp_t = exp_t.expand(n)
    with fwAD.dual_level():
        c_dual = fwAD.make_dual(c_t, torch.ones_like(c_t))
        log_p = model.log_prob(x, c_dual, context)
        tangent = fwAD.unpack_dual(log_p).tangent
        if tangent is None:
            tangent = torch.zeros_like(fwAD.unpack_dual(log_p).primal)
        dlogq = target.dlogq_dc(x, c_t, context)
        residual = tangent - dlogq.detach() + exp_t.detach()
        return pointwise_penalty(residual, huber_delta)


def gradient_loss(
    model,
    target,
    x: torch.Tensor,
    c,
    expectation,
    context: torch.Tensor | None = None,
    huber_delta: float = 0.0,
) -> torch.Tensor:
    """Mean condition-gradient penalty over a batch."""
    return gradient_residuals(model, target, x, c, expectation, context, huber_delta).mean()


def gradient_residual_stats(loss_values: torch.Tensor, indices: torch.Tensor, n_points: int):
    """Per-grid-point mean of the pointwise penalties in a batch."""
    sums = torch.zeros(n_points, dtype=torch.float64)
    counts = torch.zeros(n_points, dtype=torch.float64)
    sums.index_add_(0, indices, loss_values)
    counts.index_add_(0, indices, torch.ones_like(loss_values))
    mask = counts > 0
    means = torch.zeros(n_points, dtype=torch.float64)
    means[mask] = sums[mask] / counts[mask]
    return means, mask


# ---------------------------------------------------------------------------
# boundary losses
# ---------------------------------------------------------------------------


def nll_loss(model, batch: torch.Tensor, c, context=None) -> torch.Tensor:
    if batch.shape[0] == 0:
        raise EmptyBatch("empty batch")
    return -model.log_prob(batch, c, context).mean()


def backward_kl_loss(model, target, c, n: int, generator: torch.Generator, context=None) -> torch.Tensor:
    """E_model[log p_model - log q] with reparameterized model samples."""
    if n == 0:
        raise EmptyBatch("empty batch")
    x, log_p = model.sample(n, c, generator, context)
    return (log_p - target.log_q(x, c, context)).mean()


def reweighted_nll_loss(model, target, batch: torch.Tensor, c, c0: float, context=None) -> torch.Tensor:
    """Forward-KL surrogate: NLL at c with weights q(x|c)/q(x|c0) (self-normalized).

    The batch is drawn from the data distribution at c0; the unknown
    normalizer of the data density cancels in the self-normalization.
    """
    if batch.shape[0] == 0:
        raise EmptyBatch("empty batch")
    with torch.no_grad():
        logw = target.log_q(batch, c, context) - target.log_q(batch, c0, context)
        w = stable_softmax(logw, dim=0)
    return -(w * model.log_prob(batch, c, context)).sum()


# ---------------------------------------------------------------------------
# condition sampling
# ---------------------------------------------------------------------------


def condition_from_draws(
    r: float, w_up: bool, zeta: float, c0: float, c_min: float, c_max: float
) -> float:
    """Deterministic part of the widening condition schedule."""
    shift = 1.0 - r**zeta
    if w_up:
        return math.exp(math.log(c0) + shift * (math.log(c_max) - math.log(c0)))
    return math.exp(math.log(c0) + shift * (math.log(c_min) - math.log(c0)))


def sample_condition_continuous(
    t: int,
    t_max: int,
    c0: float,
    c_min: float,
    c_max: float,
    s_min: float,
    s_max: float,
    generator: torch.Generator,
) -> float:
    """Step-dependent schedule that widens from c0 toward the range ends.

    zeta interpolates log-linearly from s_min to s_max over training; zeta->0
    concentrates at c0, zeta=1 is log-uniform on each side, larger zeta pushes
    mass outward.
    """
    r = float(torch.rand((), dtype=torch.float64, generator=generator))
    p_up = (math.log(c_max) - math.log(c0)) / (math.log(c_max) - math.log(c_min))
    w = float(torch.rand((), dtype=torch.float64, generator=generator)) < p_up
    zeta = math.exp(math.log(s_min) + (t / max(t_max, 1)) * (math.log(s_max) - math.log(s_min)))
    return condition_from_draws(r, w, zeta, c0, c_min, c_max)


class ConditionGrid:
    """Log-equidistant condition grid with per-point expectation and loss EMAs.

    Sampling weights decay with the accumulated loss between a point and the
    nearest reference condition (causality: fix nearer conditions first).
    """

    def __init__(
        self,
        c_min: float,
        c_max: float,
        n_points: int,
        anchors: list[float],
        epsilon: float = 1.0,
        gamma_epsilon: float = 1.0,
        r_epsilon: float = 1.0,
    ):
        if n_points < 2:
            raise ValueError("need at least 2 grid points")
        self.points = torch.exp(
            torch.linspace(math.log(c_min), math.log(c_max), n_points, dtype=torch.float64)
        )
        self.n_points = n_points
        log_pts = torch.log(self.points)
        self.anchor_indices = sorted(
            {int(torch.argmin((log_pts - math.log(a)).abs())) for a in anchors}
        )
        self.epsilon0 = epsilon
        self.gamma_epsilon = gamma_epsilon
        self.r_epsilon = r_epsilon
        self.nabla_bar = torch.zeros(n_points, dtype=torch.float64)
        self.nabla_initialized = torch.zeros(n_points, dtype=torch.bool)
        self.loss_ema = torch.zeros(n_points, dtype=torch.float64)
        self.loss_initialized = torch.zeros(n_points, dtype=torch.bool)

    def epsilon_at(self, t: int, t_max: int) -> float:
        if self.r_epsilon == 1.0:
            return self.epsilon0
        return self.epsilon0 * self.r_epsilon ** (t / max(t_max, 1))

    def _epsilon_profile(self, epsilon: float) -> torch.Tensor:
        eps = torch.full((self.n_points,), epsilon, dtype=torch.float64)
        if len(self.anchor_indices) >= 2 and self.gamma_epsilon != 1.0:
            lo, hi = self.anchor_indices[0], self.anchor_indices[-1]
            eps[lo : hi + 1] *= self.gamma_epsilon
        return eps

    def causality_weights(self, epsilon: float | None = None) -> torch.Tensor:
        """Sampling probabilities; uniform when epsilon == 0 or all EMAs are 0."""
        eps = self._epsilon_profile(self.epsilon0 if epsilon is None else epsilon)
        weights = torch.zeros(self.n_points, dtype=torch.float64)
        for a in self.anchor_indices:
            w = torch.full((self.n_points,), -math.inf, dtype=torch.float64)
            w[a] = 0.0
            acc = 0.0  # sum of loss EMAs strictly between the anchor and the point
            for i in range(a + 1, self.n_points):
                w[i] = -eps[i] * acc
                acc += float(self.loss_ema[i])
            acc = 0.0
            for i in range(a - 1, -1, -1):
                w[i] = -eps[i] * acc
                acc += float(self.loss_ema[i])
            weights = torch.maximum(weights, torch.exp(w))
        return weights / weights.sum()

    def sample(self, n: int, generator: torch.Generator, epsilon: float | None = None):
        probs = self.causality_weights(epsilon)
        idx = torch.multinomial(probs, n, replacement=True, generator=generator)
        return idx, self.points[idx]

    def update_loss(self, indices: torch.Tensor, means: torch.Tensor, mask: torch.Tensor, alpha: float):
        upd = mask & ~self.loss_initialized
        self.loss_ema[upd] = means[upd]
        self.loss_initialized |= mask
        ema = mask & ~upd
        self.loss_ema[ema] = (1.0 - alpha) * self.loss_ema[ema] + alpha * means[ema]

    def update_expectations(self, values: torch.Tensor, alpha: float):
        first = ~self.nabla_initialized
        self.nabla_bar[first] = values[first]
        self.nabla_bar[~first] = (1.0 - alpha) * self.nabla_bar[~first] + alpha * values[~first]
        self.nabla_initialized.fill_(True)


def update_grid_expectations(
    grid: ConditionGrid,
    model,
    target,
    n: int,
    generator: torch.Generator,
    alpha: float,
    p_base: str = "model",
    c0: float | None = None,
) -> None:
    """Refresh the per-grid-point SNIS estimates of E_p[d/dc log q]."""
    values = torch.zeros(grid.n_points, dtype=torch.float64)
    for i in range(grid.n_points):
        values[i] = snis_expectation(
            model, target, float(grid.points[i]), n, generator, p_base=p_base, c0=c0
        )
    grid.update_expectations(values, alpha)


# ---------------------------------------------------------------------------
# energy-free substitution
# ---------------------------------------------------------------------------


class ModelDensityTarget(ConditionalTarget):
    """Conditional target whose unknown part is estimated by the model itself.

    kind="boltzmann": condition is a temperature, E(x) ~ -c0 log p_model(x|c0).
    kind="power": log q(x|c) = (c/c0) log p_model(x|c0).
    kind="tempered_posterior": the likelihood is estimated as
    log p_model(psi|y, c0) - log prior(psi).

    All model evaluations are detached: no parameter gradient flows through
    the substitution.
    """

    def __init__(self, model, kind: str, reference: ConditionalTarget):
        if kind not in ("boltzmann", "power", "tempered_posterior"):
            raise ValueError(f"unknown energy-free kind {kind!r}")
        self.model = model
        self.kind = kind
        self.reference = reference
        self.dim = reference.dim
        self.c_min = reference.c_min
        self.c_max = reference.c_max
        self.c0 = reference.c0

    def _log_p0(self, x: torch.Tensor, context) -> torch.Tensor:
        with torch.no_grad():
            return self.model.log_prob(x, self.c0, context)

    def log_q(self, x, c, context=None):
        self.check_condition(c)
        logp0 = self._log_p0(x, context)
        c_t = torch.as_tensor(c, dtype=torch.float64)
        c_t = c_t.expand(x.shape[0]) if c_t.dim() == 0 else c_t
        if self.kind == "boltzmann":
            return (self.c0 / c_t) * logp0
        if self.kind == "power":
            return (c_t / self.c0) * logp0
        log_prior = self.reference.log_prior(x)
        return log_prior + c_t * (logp0 - log_prior)

    def dlogq_dc(self, x, c, context=None):
        self.check_condition(c)
        logp0 = self._log_p0(x, context)
        c_t = torch.as_tensor(c, dtype=torch.float64)
        c_t = c_t.expand(x.shape[0]) if c_t.dim() == 0 else c_t
        if self.kind == "boltzmann":
            return -self.c0 * logp0 / (c_t * c_t)
        if self.kind == "power":
            return logp0 / self.c0
        return logp0 - self.reference.log_prior(x)


def energy_free_dlogq(model, x: torch.Tensor, c, kind: str, reference: ConditionalTarget):
    """Condition derivative of log q with the unknown term estimated by the model."""
    return ModelDensityTarget(model, kind, reference).dlogq_dc(x, c)


# ---------------------------------------------------------------------------
# adaptive loss balancing
# ---------------------------------------------------------------------------


@dataclass
class BalancerState:
    lambda_fixed: float = 1.0
    alpha: float = 0.1
    interval: int = 25
    lam_boundary: float = 0.0
    lam_grad: float = 0.0
    initialized: bool = False
    cached: float = field(default=1.0)

    def current(self) -> float:
        return self.cached


def balance_weights(norm_boundary: float, norm_grad: float, state: BalancerState) -> float:
    """Update the relative weight so both loss terms push with equal gradient force.

    Norms below 1e-12 skip the update and reuse the cached weight.
    """
    if norm_boundary < 1e-12 or norm_grad < 1e-12:
        logger.debug("zero gradient in balance update; reusing cached weight")
        return state.cached
    total = norm_boundary + norm_grad
    lam_b = total / norm_boundary
    lam_g = total / norm_grad
    if not state.initialized:
        state.lam_boundary = lam_b
        state.lam_grad = lam_g
        state.initialized = True
    else:
        a = state.alpha
        state.lam_boundary = (1.0 - a) * state.lam_boundary + a * lam_b
        state.lam_grad = (1.0 - a) * state.lam_grad + a * lam_g
    state.cached = state.lambda_fixed * state.lam_grad / state.lam_boundary
    return state.cached
