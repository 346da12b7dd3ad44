"""Differentiation engine: reverse-mode gradients in the model parameters,
a forward tangent in the scalar condition, and their composition.

The mixed derivative (parameter gradient of a quantity containing the
condition derivative of the model density) is computed forward-over-reverse:
a single scalar tangent in c is threaded through the forward pass with dual
tensors, and the resulting tangent stays connected to the autograd graph, so
one ordinary backward pass yields the parameter gradient. Finite differences
are kept purely as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.autograd.forward_ad as fwAD


class NonFiniteLoss(RuntimeError):
    """Forward value of a loss was NaN or infinite."""


class EmptyTape(RuntimeError):
    """A gradient was requested but no differentiable computation was recorded."""


class UnsupportedOp(RuntimeError):
    """An operation without a registered condition-tangent rule was used."""


# ---------------------------------------------------------------------------
# dual scalars: lightweight forward-mode carrier for plain-Python computations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualScalar:
    """Value and tangent with respect to the active condition scalar.

    Arithmetic follows the exact product/chain rules; lifting a plain number
    yields tangent 0.
    """

    value: float
    tangent: float = 0.0

    @staticmethod
    def lift(x) -> "DualScalar":
        if isinstance(x, DualScalar):
            return x
        return DualScalar(float(x), 0.0)

    def __add__(self, other):
        o = DualScalar.lift(other)
        return DualScalar(self.value + o.value, self.tangent + o.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        o = DualScalar.lift(other)
        return DualScalar(self.value - o.value, self.tangent - o.tangent)

    def __rsub__(self, other):
        return DualScalar.lift(other).__sub__(self)

    def __mul__(self, other):
        o = DualScalar.lift(other)
        return DualScalar(
            self.value * o.value,
            self.tangent * o.value + self.value * o.tangent,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = DualScalar.lift(other)
        inv = 1.0 / o.value
        return DualScalar(
            self.value * inv,
            (self.tangent * o.value - self.value * o.tangent) * inv * inv,
        )

    def __rtruediv__(self, other):
        return DualScalar.lift(other).__truediv__(self)

    def __neg__(self):
        return DualScalar(-self.value, -self.tangent)

    def __pow__(self, power):
        if isinstance(power, DualScalar):
            # a^b = exp(b log a), requires a > 0
            return (self.log() * power).exp()
        val = self.value**power
        return DualScalar(val, power * self.value ** (power - 1.0) * self.tangent)

    def exp(self):
        v = math.exp(self.value)
        return DualScalar(v, v * self.tangent)

    def log(self):
        return DualScalar(math.log(self.value), self.tangent / self.value)

    def sqrt(self):
        v = math.sqrt(self.value)
        return DualScalar(v, 0.5 * self.tangent / v)

    def sin(self):
        return DualScalar(math.sin(self.value), math.cos(self.value) * self.tangent)

    def cos(self):
        return DualScalar(math.cos(self.value), -math.sin(self.value) * self.tangent)

    def tanh(self):
        v = math.tanh(self.value)
        return DualScalar(v, (1.0 - v * v) * self.tangent)


# ---------------------------------------------------------------------------
# forward-AD-safe numerics
# ---------------------------------------------------------------------------


def primal(t: torch.Tensor) -> torch.Tensor:
    """Primal part of a (possibly dual) tensor."""
    p = fwAD.unpack_dual(t).primal
    return t if p is None else p


def stable_logsumexp(t: torch.Tensor, dim: int, keepdim: bool = False) -> torch.Tensor:
    """logsumexp whose max-shift is a constant, safe under forward-over-reverse.

    torch.logsumexp's forward-AD formula mutates saved tensors in place and
    cannot be backpropagated through; this variant is mathematically identical.
    """
    m = primal(t).detach().amax(dim=dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    out = torch.log(torch.exp(t - m).sum(dim=dim, keepdim=True)) + m
    return out if keepdim else out.squeeze(dim)


def stable_softmax(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax safe under forward-over-reverse (see stable_logsumexp)."""
    e = torch.exp(t - primal(t).detach().amax(dim=dim, keepdim=True))
    return e / e.sum(dim=dim, keepdim=True)


# ---------------------------------------------------------------------------
# parameter store and gradients
# ---------------------------------------------------------------------------


class ParamStore:
    """Flat view of a model's trainable parameters with a gradient accumulator.

    The parameter count is fixed at construction; the accumulator is zeroed
    between loss evaluations by the gradient entry points below.
    """

    def __init__(self, module: torch.nn.Module):
        self.params = [p for p in module.parameters() if p.requires_grad]
        self._shapes = [p.shape for p in self.params]
        self.n_params = sum(p.numel() for p in self.params)

    def vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.params])

    def set_vector(self, vec: torch.Tensor) -> None:
        if vec.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} entries, got {vec.numel()}")
        offset = 0
        with torch.no_grad():
            for p in self.params:
                n = p.numel()
                p.copy_(vec[offset : offset + n].reshape(p.shape))
                offset += n

    def grad_vector(self) -> torch.Tensor:
        chunks = []
        for p in self.params:
            if p.grad is None:
                chunks.append(torch.zeros(p.numel(), dtype=p.dtype))
            else:
                chunks.append(p.grad.detach().reshape(-1).clone())
        return torch.cat(chunks)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_params(loss_fn: Callable[[], torch.Tensor], store: ParamStore) -> torch.Tensor:
    """Gradient of a scalar loss with respect to the flat parameter vector.

    The loss is evaluated once with recording enabled; the accumulator is
    reset afterwards.
    """
    store.zero_grad()
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss.item()}")
    if loss.grad_fn is None:
        raise EmptyTape("loss does not depend on any recorded computation")
    grads = torch.autograd.grad(loss, store.params, allow_unused=True)
    flat = torch.cat(
        [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, store.params)
        ]
    )
    store.zero_grad()
    return flat


def cond_tangent(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[float] | None,
    c: float | torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Value and exact forward-mode derivative of ``f(x, c)`` in the condition.

    ``c`` may be a scalar or a batch of per-sample conditions; the returned
    tangent has the same shape as the value. Parameters and ``x`` are held
    fixed.
    """
    if x is not None and not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float64)
    c_t = torch.as_tensor(c, dtype=torch.float64)
    try:
        with fwAD.dual_level():
            c_dual = fwAD.make_dual(c_t, torch.ones_like(c_t))
            out = f(x, c_dual)
            val, tan = fwAD.unpack_dual(out)
            if tan is None:
                tan = torch.zeros_like(val)
            # materialize inside the dual level; the graph survives exit
            return val, tan + 0.0
    except NotImplementedError as exc:  # missing forward-AD rule
        raise UnsupportedOp(str(exc)) from exc
    except RuntimeError as exc:
        if "forward AD" in str(exc) or "forward-mode AD" in str(exc):
            raise UnsupportedOp(str(exc)) from exc
        raise


def mixed_grad(loss_fn: Callable[[], torch.Tensor], store: ParamStore) -> torch.Tensor:
    """Parameter gradient of a loss built from condition tangents.

    The loss closure is expected to run its forward pass in value-tangent mode
    (via cond_tangent); the recorded tape carries both value and tangent
    partials, so a single reverse sweep yields the mixed derivative.
    """
    return grad_params(loss_fn, store)


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def finite_diff(f: Callable[[float], float], point: float, h: float) -> float:
    """Central difference (f(p+h) - f(p-h)) / (2h)."""
    if h <= 0:
        raise ValueError("h must be positive")
    return (f(point + h) - f(point - h)) / (2.0 * h)


def finite_diff_direction(
    f: Callable[[torch.Tensor], float],
    point: torch.Tensor,
    direction: torch.Tensor,
    h: float,
) -> float:
    """Directional central difference of a function of a vector argument."""
    return (f(point + h * direction) - f(point - h * direction)) / (2.0 * h)
