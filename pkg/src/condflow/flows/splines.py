"""Monotone rational-quadratic spline transforms with identity tails.

The spline maps [-B, B] onto itself through K rational-quadratic segments
joined at knots with matching values and derivatives; outside the interval it
is the identity. Boundary derivatives are fixed to 1 so the transform is
continuously differentiable across the tail boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..autodiff import stable_softmax

MIN_BIN_SIZE = 1e-3
MIN_DERIVATIVE = 1e-6
# softplus(x + SOFTPLUS_UNIT_SHIFT) == 1 at x == 0, so zero subnet output
# yields unit knot derivatives and an identity spline.
SOFTPLUS_UNIT_SHIFT = 0.5413248546129181


class SplineInversionFailure(RuntimeError):
    """The in-bin quadratic had no valid root; spline parameters are corrupt."""


def param_count(n_bins: int) -> int:
    """Raw parameters per transformed coordinate: K widths, K heights, K-1 derivatives."""
    return 3 * n_bins - 1


def _normalize(raw: torch.Tensor, n_bins: int, bound: float):
    """Split raw params into bin widths/heights summing to 2B and positive knot derivatives."""
    w_raw, h_raw, d_raw = torch.split(raw, [n_bins, n_bins, n_bins - 1], dim=-1)
    widths = MIN_BIN_SIZE + (1.0 - MIN_BIN_SIZE * n_bins) * stable_softmax(w_raw, dim=-1)
    heights = MIN_BIN_SIZE + (1.0 - MIN_BIN_SIZE * n_bins) * stable_softmax(h_raw, dim=-1)
    widths = widths * (2.0 * bound)
    heights = heights * (2.0 * bound)
    derivs = MIN_DERIVATIVE + torch.nn.functional.softplus(d_raw + SOFTPLUS_UNIT_SHIFT)
    # boundary derivatives pinned to 1
    ones = torch.ones_like(derivs[..., :1])
    derivs = torch.cat([ones, derivs, ones], dim=-1)
    return widths, heights, derivs


def _searchsorted(edges: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    # comparison-based bin lookup; works under forward-mode AD where
    # torch.searchsorted does not accept dual tensors
    return (x.unsqueeze(-1) >= edges[..., :-1]).sum(dim=-1) - 1


def rational_quadratic_spline(
    x: torch.Tensor,
    raw_params: torch.Tensor,
    bound: float,
    inverse: bool = False,
):
    """Apply the spline (or its inverse) elementwise.

    x: (...,) values; raw_params: (..., 3K-1) unconstrained parameters.
    Returns (y, log_deriv) where log_deriv is the log of dy/dx of the forward
    map evaluated at the relevant point (negated internally for the inverse).
    """
    n_bins = (raw_params.shape[-1] + 1) // 3
    widths, heights, derivs = _normalize(raw_params, n_bins, bound)
    return _apply_spline(x, widths, heights, derivs, bound, inverse)


def _apply_spline(
    x: torch.Tensor,
    widths: torch.Tensor,
    heights: torch.Tensor,
    derivs: torch.Tensor,
    bound: float,
    inverse: bool,
):
    x_edges = torch.cumsum(widths, dim=-1)
    x_edges = torch.cat([torch.zeros_like(x_edges[..., :1]), x_edges], dim=-1) - bound
    y_edges = torch.cumsum(heights, dim=-1)
    y_edges = torch.cat([torch.zeros_like(y_edges[..., :1]), y_edges], dim=-1) - bound

    inside = (x > -bound) & (x < bound)
    # clamp the lookup input so out-of-range values index bin 0 harmlessly
    x_safe = torch.where(inside, x, torch.zeros_like(x))

    edges = y_edges if inverse else x_edges
    k = _searchsorted(edges, x_safe).clamp(0, widths.shape[-1] - 1)
    ku = k.unsqueeze(-1)

    xk = x_edges.gather(-1, ku).squeeze(-1)
    yk = y_edges.gather(-1, ku).squeeze(-1)
    wk = widths.gather(-1, ku).squeeze(-1)
    hk = heights.gather(-1, ku).squeeze(-1)
    dk = derivs.gather(-1, ku).squeeze(-1)
    dk1 = derivs.gather(-1, ku + 1).squeeze(-1)
    sk = hk / wk

    if not inverse:
        xi = (x_safe - xk) / wk
        om = xi * (1.0 - xi)
        denom = sk + (dk1 + dk - 2.0 * sk) * om
        y = yk + hk * (sk * xi * xi + dk * xi * (1.0 - xi)) / denom
        deriv = sk * sk * (dk1 * xi * xi + 2.0 * sk * om + dk * (1.0 - xi) ** 2) / (denom * denom)
        log_deriv = torch.log(deriv)
        y = torch.where(inside, y, x)
        log_deriv = torch.where(inside, log_deriv, torch.zeros_like(log_deriv))
        return y, log_deriv

    # inverse: solve the in-bin quadratic a xi^2 + b xi + cc = 0 for xi
    dy = x_safe - yk
    a = hk * (sk - dk) + dy * (dk1 + dk - 2.0 * sk)
    b = hk * dk - dy * (dk1 + dk - 2.0 * sk)
    cc = -sk * dy
    disc = b * b - 4.0 * a * cc
    if bool((disc < 0).any()):
        raise SplineInversionFailure("negative discriminant in spline inversion")
    xi = 2.0 * cc / (-b - torch.sqrt(disc))
    if bool(((xi < -1e-9) | (xi > 1.0 + 1e-9)).any()):
        raise SplineInversionFailure("root outside bin in spline inversion")
    xi = xi.clamp(0.0, 1.0)
    om = xi * (1.0 - xi)
    denom = sk + (dk1 + dk - 2.0 * sk) * om
    deriv = sk * sk * (dk1 * xi * xi + 2.0 * sk * om + dk * (1.0 - xi) ** 2) / (denom * denom)
    y = xk + wk * xi
    log_deriv = -torch.log(deriv)
    y = torch.where(inside, y, x)
    log_deriv = torch.where(inside, log_deriv, torch.zeros_like(log_deriv))
    return y, log_deriv


@dataclass
class RQSplineParams:
    """Explicit (already normalized) spline parameters for one coordinate."""

    widths: torch.Tensor  # (K,), positive, sums to 2*bound
    heights: torch.Tensor  # (K,), positive, sums to 2*bound
    interior_derivs: torch.Tensor  # (K-1,), strictly positive
    bound: float

    def validate(self) -> None:
        if (self.widths <= 0).any() or (self.heights <= 0).any():
            raise ValueError("bin widths and heights must be positive")
        for name, t in (("widths", self.widths), ("heights", self.heights)):
            if abs(float(t.sum()) - 2.0 * self.bound) > 1e-8:
                raise ValueError(f"{name} must sum to 2*bound")
        if (self.interior_derivs <= 0).any():
            raise ValueError("knot derivatives must be strictly positive")


def rq_spline_apply(x: float, params: RQSplineParams) -> tuple[float, float]:
    """Scalar spline evaluation; identity with log-derivative 0 outside [-B, B]."""
    params.validate()
    derivs = torch.cat(
        [
            torch.ones(1, dtype=torch.float64),
            params.interior_derivs.to(torch.float64),
            torch.ones(1, dtype=torch.float64),
        ]
    )
    y, ld = _apply_spline(
        torch.tensor(x, dtype=torch.float64),
        params.widths.to(torch.float64),
        params.heights.to(torch.float64),
        derivs,
        params.bound,
        inverse=False,
    )
    return float(y), float(ld)
