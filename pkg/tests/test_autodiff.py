import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from condflow.autodiff import (
    DualScalar,
    EmptyTape,
    NonFiniteLoss,
    ParamStore,
    UnsupportedOp,
    cond_tangent,
    finite_diff,
    finite_diff_direction,
    grad_params,
    mixed_grad,
    stable_logsumexp,
    stable_softmax,
)
from condflow.flows import build_flow
from condflow.targets import MultiWell, quadrature_logz


def small_flow(dim=2, coupling="spline", seed=0, jitter=0.05):
    arch = dict(
        dim=dim,
        n_blocks=2,
        coupling=coupling,
        hidden=[16],
        n_bins=4,
        bound=3.0,
        actnorm=True,
        conditional=True,
        embed_dim=3,
        embed_hidden=[8],
        latent={"kind": "standard_normal", "dim": dim},
        perm_seed=seed,
    )
    model = build_flow(arch)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(jitter * torch.randn(p.shape, dtype=torch.float64, generator=gen))
    return model


# ---------------------------------------------------------------------------
# dual scalars
# ---------------------------------------------------------------------------


def test_dual_product_rule_exact():
    a = DualScalar(2.0, 3.0)
    b = DualScalar(5.0, 7.0)
    prod = a * b
    assert prod.value == 10.0
    assert prod.tangent == 3.0 * 5.0 + 2.0 * 7.0


def test_dual_constant_lift_has_zero_tangent():
    assert DualScalar.lift(4.2).tangent == 0.0
    assert (DualScalar(1.0, 1.0) + 3.0).tangent == 1.0


UNARY_FUNCS = {
    "exp": (lambda d: d.exp(), (-2.0, 2.0)),
    "log": (lambda d: d.log(), (0.1, 5.0)),
    "sqrt": (lambda d: d.sqrt(), (0.1, 5.0)),
    "sin": (lambda d: d.sin(), (-3.0, 3.0)),
    "cos": (lambda d: d.cos(), (-3.0, 3.0)),
    "tanh": (lambda d: d.tanh(), (-3.0, 3.0)),
    "recip": (lambda d: 1.0 / d, (0.2, 5.0)),
    "pow3": (lambda d: d**3, (-2.0, 2.0)),
    "affine": (lambda d: 2.5 * d - 1.0, (-2.0, 2.0)),
}


@pytest.mark.parametrize("name", sorted(UNARY_FUNCS))
@given(u=st.floats(0.0, 1.0))
@settings(max_examples=25, deadline=None)
def test_dual_primitives_match_finite_differences(name, u):
    fn, (lo, hi) = UNARY_FUNCS[name]
    x = lo + (hi - lo) * u
    tangent = fn(DualScalar(x, 1.0)).tangent
    fd = finite_diff(lambda v: fn(DualScalar(v)).value, x, 1e-6)
    assert tangent == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_dual_chain_through_composite():
    x = 0.7

    def f(d):
        return (d * d + 1.0).log().exp().sin()

    tangent = f(DualScalar(x, 1.0)).tangent
    fd = finite_diff(lambda v: f(DualScalar(v)).value, x, 1e-6)
    assert tangent == pytest.approx(fd, rel=1e-7)


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------


class _TwoParams(nn.Module):
    def __init__(self, values):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(values, dtype=torch.float64))


def test_grad_params_quadratic():
    m = _TwoParams([1.0, 2.0])
    store = ParamStore(m)
    g = grad_params(lambda: (m.theta**2).sum(), store)
    assert torch.allclose(g, torch.tensor([2.0, 4.0], dtype=torch.float64))


def test_grad_params_product_rule():
    m = _TwoParams([3.0, 5.0])
    store = ParamStore(m)
    g = grad_params(lambda: m.theta[0] * m.theta[1], store)
    assert torch.allclose(g, torch.tensor([5.0, 3.0], dtype=torch.float64))


def test_grad_params_resets_accumulator():
    m = _TwoParams([1.0, 2.0])
    store = ParamStore(m)
    grad_params(lambda: (m.theta**2).sum(), store)
    assert all(p.grad is None for p in store.params)


def test_grad_params_flow_logprob_matches_finite_differences():
    model = build_flow(
        dict(
            dim=1,
            n_blocks=1,
            coupling="affine",
            hidden=[8],
            actnorm=False,
            conditional=True,
            embed_dim=1,
            embed_hidden=[],
            latent={"kind": "standard_normal", "dim": 1},
        )
    )
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn(p.shape, dtype=torch.float64, generator=gen))
    store = ParamStore(model)
    x = torch.tensor([[0.7]], dtype=torch.float64)
    g = grad_params(lambda: model.log_prob(x, 1.0).sum(), store)
    theta0 = store.vector()

    def loss_at(theta):
        store.set_vector(theta)
        with torch.no_grad():
            return float(model.log_prob(x, 1.0).sum())

    for k in range(store.n_params):
        d = torch.zeros(store.n_params, dtype=torch.float64)
        d[k] = 1.0
        fd = finite_diff_direction(loss_at, theta0, d, 1e-5)
        assert float(g[k]) == pytest.approx(fd, rel=1e-4, abs=1e-9)
    store.set_vector(theta0)


def test_grad_params_nonfinite_loss():
    m = _TwoParams([1.0, 2.0])
    store = ParamStore(m)
    with pytest.raises(NonFiniteLoss):
        grad_params(lambda: (m.theta / 0.0).sum(), store)


def test_grad_params_empty_tape():
    m = _TwoParams([1.0, 2.0])
    store = ParamStore(m)
    with pytest.raises(EmptyTape):
        grad_params(lambda: torch.tensor(1.0, dtype=torch.float64), store)


def test_param_store_roundtrip():
    model = small_flow()
    store = ParamStore(model)
    v = store.vector()
    store.set_vector(v * 2.0)
    assert torch.allclose(store.vector(), v * 2.0)
    store.set_vector(v)
    with pytest.raises(ValueError):
        store.set_vector(v[:-1])


# ---------------------------------------------------------------------------
# condition tangents
# ---------------------------------------------------------------------------


def test_cond_tangent_square():
    val, tan = cond_tangent(lambda x, c: c * c, None, 3.0)
    assert float(val) == pytest.approx(9.0)
    assert float(tan) == pytest.approx(6.0)


def test_cond_tangent_linear_in_x():
    val, tan = cond_tangent(lambda x, c: c * x[0], [2.0], 5.0)
    assert float(val) == pytest.approx(10.0)
    assert float(tan) == pytest.approx(2.0)


def test_cond_tangent_spline_flow_matches_finite_differences():
    model = small_flow(dim=2, coupling="spline", seed=11)
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(8, 2, dtype=torch.float64, generator=gen)

    def f(xv, c):
        cc = torch.as_tensor(c, dtype=torch.float64)
        return model.log_prob(xv, cc.expand(xv.shape[0]).contiguous())

    for c in (0.6, 1.0, 1.7):
        _, tan = cond_tangent(f, x, c)
        h = 1e-4 * c
        with torch.no_grad():
            fd = (f(x, c + h) - f(x, c - h)) / (2 * h)
        assert torch.allclose(tan, fd, rtol=1e-4, atol=1e-8)


def test_cond_tangent_unsupported_op():
    def f(x, c):
        # the regularized incomplete gamma has no forward-AD rule
        return torch.special.gammainc(c, c)

    with pytest.raises(UnsupportedOp):
        cond_tangent(f, None, 1.0)


# ---------------------------------------------------------------------------
# mixed derivatives
# ---------------------------------------------------------------------------


def test_mixed_grad_linear_model():
    m = _TwoParams([1.5])
    store = ParamStore(m)

    def loss():
        _, tan = cond_tangent(lambda x, c: m.theta[0] * c, None, 2.0)
        return tan**2

    g = mixed_grad(loss, store)
    assert float(loss()) == pytest.approx(2.25)
    assert float(g[0]) == pytest.approx(3.0)


def test_mixed_grad_stationary_point():
    m = _TwoParams([2.0])
    store = ParamStore(m)

    def loss():
        _, tan = cond_tangent(lambda x, c: m.theta[0] * c * c, None, 1.0)
        return (tan - 4.0) ** 2

    g = mixed_grad(loss, store)
    assert float(g[0]) == pytest.approx(0.0, abs=1e-12)


def test_mixed_grad_flow_matches_nested_finite_differences():
    from condflow.objective import gradient_loss
    from condflow.targets import GaussianTemperature

    model = small_flow(dim=2, coupling="spline", seed=7)
    target = GaussianTemperature(dim=2, c_min=0.3, c_max=3.0)
    gen = torch.Generator().manual_seed(9)
    x = torch.randn(1, 2, dtype=torch.float64, generator=gen) * 0.7
    store = ParamStore(model)
    c, expv = 0.9, 0.2
    g = mixed_grad(lambda: gradient_loss(model, target, x, c, expv), store)
    theta0 = store.vector()

    def loss_at(theta):
        store.set_vector(theta)
        h = 1e-3 * c
        with torch.no_grad():
            tang = (model.log_prob(x, c + h) - model.log_prob(x, c - h)) / (2 * h)
            res = tang - target.dlogq_dc(x, c) + expv
            return float((res * res).mean())

    gen_d = torch.Generator().manual_seed(10)
    for _ in range(5):
        d = torch.randn(store.n_params, dtype=torch.float64, generator=gen_d)
        d /= d.norm()
        fd = finite_diff_direction(loss_at, theta0, d, 1e-4)
        assert float(g @ d) == pytest.approx(fd, rel=1e-3, abs=1e-10)
    store.set_vector(theta0)


def test_gradients_are_deterministic():
    model = small_flow(dim=2, seed=21)
    store = ParamStore(model)
    x = torch.randn(16, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    g1 = grad_params(lambda: model.log_prob(x, 0.8).mean(), store)
    g2 = grad_params(lambda: model.log_prob(x, 0.8).mean(), store)
    assert torch.equal(g1, g2)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def test_finite_diff_cube():
    assert finite_diff(lambda x: x**3, 2.0, 1e-5) == pytest.approx(12.0, abs=1e-6)


def test_finite_diff_sin():
    assert finite_diff(math.sin, 0.0, 1e-5) == pytest.approx(1.0, abs=1e-9)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff(math.sin, 0.0, 0.0)


def test_finite_diff_logz_matches_quadrature_energy():
    """d logZ / d beta of a quartic well equals -E_p[E] (quadrature oracle)."""
    well = MultiWell(dim=1, c_min=0.2, c_max=5.0)

    class InverseTempWell(MultiWell):
        # q(x|beta) = exp(-beta E(x))
        def log_q(self, x, c, context=None):
            return -torch.as_tensor(c, dtype=torch.float64) * self.energy(x)

    itw = InverseTempWell(dim=1, c_min=0.2, c_max=5.0)
    beta = 1.3

    def logz(b):
        return quadrature_logz(itw, b, -6.0, 6.0, 2001)

    lhs = finite_diff(logz, beta, 1e-5)
    xs = torch.linspace(-6.0, 6.0, 4001, dtype=torch.float64).unsqueeze(-1)
    logq = itw.log_q(xs, beta)
    w = torch.softmax(logq, dim=0)
    rhs = -float((w * well.energy(xs)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-6)


# ---------------------------------------------------------------------------
# forward-AD-safe numerics
# ---------------------------------------------------------------------------


def test_stable_numerics_match_builtins():
    gen = torch.Generator().manual_seed(0)
    t = torch.randn(7, 9, dtype=torch.float64, generator=gen) * 3.0
    assert torch.allclose(stable_logsumexp(t, -1), torch.logsumexp(t, -1))
    assert torch.allclose(stable_softmax(t, -1), torch.softmax(t, -1))
