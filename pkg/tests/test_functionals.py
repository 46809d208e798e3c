"""The functional-derivative calculus.

Every symbolic derivative is cross-checked against an independent numeric
route (Gateaux slopes with Richardson extrapolation), and the structural
rules (normalization, symmetry, linearity, product rule) are asserted on
random measures.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfclt.functionals import (
    ExternalIntegral,
    FunctionalError,
    Linear,
    NestedIntegrand,
    Quantile,
    SmoothOfLinear,
    UStatistic,
    derivative_pairing,
    evaluate,
    finite_difference_identity_check,
    gateaux_numeric,
    growth_class_check,
    lfd,
    make_functional,
    mix,
    quantile,
    registry_names,
)
from mfclt.laws import SamplerSpec, as_law
from mfclt.measures import DiscreteMeasure
from mfclt.rng import stream

CONCRETE = ["linear-mean", "linear-square", "mean-square",
            "cube-of-second-moment", "sin-five-halves", "ustat-product",
            "quantile:0.5"]


def rand_measure(rng, k=5, dim=1):
    return DiscreteMeasure(rng.normal(size=(int(k), dim)))


def functional_and_base(name, rng):
    u = make_functional(name)
    if name.startswith("quantile"):
        return u, as_law(SamplerSpec.normal(0.0, 1.0))
    return u, rand_measure(rng)


# ---------------------------------------------------------------------------
# registry and evaluation oracles


def test_registry_lists_everything():
    names = registry_names()
    for required in ("linear-mean", "linear-square", "mean-square",
                     "cube-of-second-moment", "sin-five-halves",
                     "ustat-product", "quantile:<v>"):
        assert required in names


def test_alias_mean_squared():
    mu = DiscreteMeasure(np.array([[1.0], [3.0]]))
    a = evaluate(make_functional("mean-squared"), mu)
    b = evaluate(make_functional("mean-square"), mu)
    assert a == b == pytest.approx(4.0)


def test_unknown_name_lists_registry():
    with pytest.raises(FunctionalError, match="linear-mean"):
        make_functional("nope")


def test_registry_values_on_known_measure():
    mu = DiscreteMeasure(np.array([[1.0], [2.0]]))  # mean 1.5, second moment 2.5
    vals = {
        "linear-mean": 1.5,
        "linear-square": 2.5,
        "mean-square": 1.5 ** 2,
        "cube-of-second-moment": 2.5 ** 3,
        "sin-five-halves": abs(0.5 * (np.sin(1) + np.sin(2))) ** 2.5,
        "ustat-product": 1.5 ** 2,
    }
    for name, want in vals.items():
        assert evaluate(make_functional(name), mu) == pytest.approx(want), name


def test_quantile_value_and_helper():
    law = as_law(SamplerSpec.normal(0.0, 2.0))
    u = Quantile(0.25)
    assert evaluate(u, law) == pytest.approx(2.0 * -0.6744897501960817, abs=1e-8)
    assert quantile(law, 0.25) == pytest.approx(evaluate(u, law))


# ---------------------------------------------------------------------------
# normalization and structure of the derivative field


@pytest.mark.parametrize("name", CONCRETE)
def test_lfd_vanishes_at_origin(name):
    rng = stream(41, "origin", name)
    u, mu = functional_and_base(name, rng)
    field = lfd(u, 1)
    val = field.values(mu, np.zeros((1, 1)))
    assert abs(float(val[0])) < 1e-12


def test_second_derivative_symmetric_in_arguments():
    rng = stream(42, "sym2")
    u = make_functional("cube-of-second-moment")
    mu = rand_measure(rng)
    y = rng.normal(size=(6, 1))
    z = rng.normal(size=(6, 1))
    field = lfd(u, 2)
    assert np.allclose(field.values(mu, y, z), field.values(mu, z, y),
                       atol=1e-12)


def test_order_beyond_max_rejected():
    u = make_functional("linear-mean")
    with pytest.raises(FunctionalError):
        lfd(u, 3)
    with pytest.raises(FunctionalError):
        lfd(Quantile(0.5), 2)


# ---------------------------------------------------------------------------
# symbolic vs numeric cross-checks


@pytest.mark.parametrize("name", CONCRETE)
def test_symbolic_matches_numeric_gateaux(name):
    rng = stream(43, "cross", name)
    u, _ = functional_and_base(name, rng)
    worst = 0.0
    for _ in range(20):
        if name.startswith("quantile"):
            mu = as_law(SamplerSpec.normal(float(rng.normal()) * 0.2, 1.0))
        else:
            mu = rand_measure(rng)
        nu = rand_measure(rng, k=3)
        num = gateaux_numeric(u, mu, nu, eps=1e-3, richardson=2)
        sym = derivative_pairing(lfd(u, 1), mu, nu)
        worst = max(worst, abs(num - sym) / (1.0 + abs(sym)))
    assert worst < 1e-6, worst


def test_richardson_levels_tighten_the_slope():
    u = make_functional("cube-of-second-moment")
    rng = stream(44, "richardson")
    mu, nu = rand_measure(rng), rand_measure(rng)
    sym = derivative_pairing(lfd(u, 1), mu, nu)
    errs = [abs(gateaux_numeric(u, mu, nu, eps=0.05, richardson=lv) - sym)
            for lv in (0, 1, 2)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-8


def test_gateaux_slope_decays_linearly_in_eps():
    u = make_functional("mean-square")
    rng = stream(45, "eps-decay")
    mu, nu = rand_measure(rng), rand_measure(rng)
    sym = derivative_pairing(lfd(u, 1), mu, nu)
    e1 = abs(gateaux_numeric(u, mu, nu, eps=0.2) - sym)
    e2 = abs(gateaux_numeric(u, mu, nu, eps=0.1) - sym)
    e3 = abs(gateaux_numeric(u, mu, nu, eps=0.05) - sym)
    assert e2 == pytest.approx(e1 / 2, rel=0.05)
    assert e3 == pytest.approx(e2 / 2, rel=0.05)


@pytest.mark.parametrize("name", ["mean-square", "cube-of-second-moment",
                                  "ustat-product"])
def test_finite_difference_identity(name):
    rng = stream(46, "fd-identity", name)
    u = make_functional(name)
    for _ in range(10):
        m, m2 = rand_measure(rng), rand_measure(rng, k=4)
        assert finite_difference_identity_check(u, m, m2) < 1e-10


def test_second_order_pairing_via_nested_slopes():
    # d/ds of the first pairing along mu -> nu equals the second pairing
    u = make_functional("cube-of-second-moment")
    rng = stream(47, "second-pair")
    mu, nu = rand_measure(rng), rand_measure(rng)
    field2 = lfd(u, 2)
    fn = lambda pts_y: None  # placeholder, built below

    def first_pair(s):
        at = mix(mu, nu, s)
        return derivative_pairing(lfd(u, 1), mu, nu, at=at)

    h = 1e-4
    num = (first_pair(h) - first_pair(0.0)) / h
    # symbolic: int int d2U(mu; y, z) (nu-mu)(dy) (nu-mu)(dz)
    inner = lambda pts: np.asarray(
        [derivative_pairing(
            DerivativeFieldView(field2, row), mu, nu) for row in pts])

    class DerivativeFieldView:
        def __init__(self, field, z):
            self.field, self.z = field, z

        def values(self, m, y):
            zz = np.broadcast_to(self.z, y.shape)
            return self.field.values(m, y, zz)

    sym = float(nu.expect(inner) - mu.expect(inner))
    assert num == pytest.approx(sym, rel=1e-3, abs=1e-6)


# ---------------------------------------------------------------------------
# combinators: linearity and the product rule


def test_sum_and_scale_derivatives_are_linear():
    rng = stream(48, "combo")
    u, v = make_functional("mean-square"), make_functional("linear-square")
    mu, nu = rand_measure(rng), rand_measure(rng)
    w = u + 2.5 * v
    got = derivative_pairing(lfd(w, 1), mu, nu)
    want = derivative_pairing(lfd(u, 1), mu, nu) + 2.5 * derivative_pairing(
        lfd(v, 1), mu, nu)
    assert got == pytest.approx(want, rel=1e-12)
    assert evaluate(w, mu) == pytest.approx(
        evaluate(u, mu) + 2.5 * evaluate(v, mu), rel=1e-12)


def test_product_rule():
    rng = stream(49, "product")
    u, v = make_functional("linear-mean"), make_functional("linear-square")
    w = u * v
    for _ in range(10):
        mu, nu = rand_measure(rng), rand_measure(rng)
        got = derivative_pairing(lfd(w, 1), mu, nu)
        want = (evaluate(u, mu) * derivative_pairing(lfd(v, 1), mu, nu)
                + evaluate(v, mu) * derivative_pairing(lfd(u, 1), mu, nu))
        assert got == pytest.approx(want, rel=1e-10, abs=1e-12)


def test_product_value_factorizes():
    rng = stream(50, "product-val")
    u, v = make_functional("linear-mean"), make_functional("linear-square")
    mu = rand_measure(rng)
    assert evaluate(u * v, mu) == pytest.approx(
        evaluate(u, mu) * evaluate(v, mu), rel=1e-12)


# ---------------------------------------------------------------------------
# U-statistics


def test_ustat_value_is_product_of_means():
    mu = DiscreteMeasure(np.array([[1.0], [2.0], [4.0]]),
                         np.array([0.5, 0.25, 0.25]))
    u = make_functional("ustat-product")
    mean = 0.5 * 1 + 0.25 * 2 + 0.25 * 4
    assert evaluate(u, mu) == pytest.approx(mean ** 2, rel=1e-12)


def test_ustat_rejects_asymmetric_kernel():
    with pytest.raises(FunctionalError, match="symmetric"):
        UStatistic(lambda x, y: x[..., 0] * 2.0 + y[..., 0], 2, dim=1)


def test_ustat_generic_route_matches_product_route():
    phi = lambda x, y: np.cos(x[..., 0]) * np.cos(y[..., 0])
    fast = UStatistic(phi, 2, product_kernel=lambda p: np.cos(p[..., 0]), dim=1)
    slow = UStatistic(phi, 2, dim=1)
    rng = stream(51, "ustat-routes")
    mu, nu = rand_measure(rng), rand_measure(rng, k=3)
    assert evaluate(fast, mu) == pytest.approx(evaluate(slow, mu), rel=1e-10)
    a = derivative_pairing(lfd(fast, 1), mu, nu)
    b = derivative_pairing(lfd(slow, 1), mu, nu)
    assert a == pytest.approx(b, rel=1e-8, abs=1e-10)


# ---------------------------------------------------------------------------
# quantile derivative against its closed form


def test_quantile_lfd_closed_form():
    law = as_law(SamplerSpec.normal(0.0, 1.0))
    u = Quantile(0.5)
    y = np.array([[-1.0], [0.5], [2.0]])
    got = lfd(u, 1).values(law, y)
    p0 = float(law.pdf(0.0))
    want = -((y[:, 0] <= 0.0).astype(float) - 1.0) / p0  # 1{0<=q} = 1
    assert np.allclose(got, want, atol=1e-10)


def test_quantile_needs_density():
    u = Quantile(0.5)
    mu = DiscreteMeasure(np.array([[0.0], [1.0]]))
    with pytest.raises(FunctionalError, match="density"):
        lfd(u, 1).values(mu, np.array([[0.5]]))


# ---------------------------------------------------------------------------
# probe-grade functional wrappers


def test_external_integral_matches_linear_case():
    lam = DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    # phi(x, mu) = x * mean(mu): U(mu) = 0.5 * mean, lfd = 0.5 * (y - 0)
    u = ExternalIntegral(
        phi=lambda x, mu: float(x[0]) * mu.expect(lambda p: p[:, 0]),
        lam=lam,
        phi_lfd=lambda x, mu, y: float(x[0]) * float(y[0]),
        dim=1)
    rng = stream(52, "external")
    mu, nu = rand_measure(rng), rand_measure(rng)
    mean = lambda m: float(m.expect(lambda p: p[:, 0]))
    assert evaluate(u, mu) == pytest.approx(0.5 * mean(mu), rel=1e-12)
    got = derivative_pairing(lfd(u, 1), mu, nu)
    assert got == pytest.approx(0.5 * (mean(nu) - mean(mu)), rel=1e-9)


def test_nested_integrand_matches_ustat():
    # phi(x1, x2, mu) = x1 * x2 with no measure dependence: the mean squared
    u = NestedIntegrand(
        phi=lambda xs, mu: float(xs[0][0]) * float(xs[1][0]),
        n=2,
        phi_lfd=lambda xs, mu, y: 0.0,
        dim=1)
    mu = DiscreteMeasure(np.array([[1.0], [2.0]]))
    assert evaluate(u, mu) == pytest.approx(2.25, rel=1e-10)
    nu = DiscreteMeasure(np.array([[0.0], [3.0]]))
    got = derivative_pairing(lfd(u, 1), mu, nu)
    ref = derivative_pairing(lfd(make_functional("ustat-product"), 1), mu, nu)
    assert got == pytest.approx(ref, rel=1e-8)


def test_nested_integrand_with_measure_dependence():
    # phi(x, mu) = x * mean(mu): U(mu) = mean^2, matching mean-square
    mean = lambda m: float(m.expect(lambda p: p[:, 0]))
    u = NestedIntegrand(
        phi=lambda xs, mu: float(xs[0][0]) * mean(mu),
        n=1,
        phi_lfd=lambda xs, mu, y: float(xs[0][0]) * float(y[0]),
        dim=1)
    mu = DiscreteMeasure(np.array([[1.0], [2.0]]))
    nu = DiscreteMeasure(np.array([[0.5], [-1.0]]))
    got = derivative_pairing(lfd(u, 1), mu, nu)
    ref = derivative_pairing(lfd(make_functional("mean-square"), 1), mu, nu)
    assert got == pytest.approx(ref, rel=1e-8)


# ---------------------------------------------------------------------------
# growth classes and mixing


def test_growth_class_bound_finite_and_small():
    rng = stream(53, "growth")
    u = make_functional("cube-of-second-moment")
    measures = [rand_measure(rng) for _ in range(5)]
    points = [rng.normal(size=1) * 3 for _ in range(8)]
    sup = growth_class_check(u, 2, 6.0, 2.0, measures, points)
    assert np.isfinite(sup)
    assert sup < 1e3


def test_mix_interpolates_moments():
    mu = DiscreteMeasure(np.array([[0.0]]))
    nu = DiscreteMeasure(np.array([[1.0]]))
    m = mix(mu, nu, 0.25)
    assert m.expect(lambda p: p[:, 0]) == pytest.approx(0.25)
    assert mix(mu, nu, 0.0).expect(lambda p: p[:, 0]) == pytest.approx(0.0)


@settings(max_examples=40, deadline=None)
@given(
    xs=st.lists(st.floats(-5, 5), min_size=2, max_size=5),
    ys=st.lists(st.floats(-5, 5), min_size=2, max_size=5),
    s=st.floats(0.01, 0.99),
)
def test_mix_property_linear_functionals_affine(xs, ys, s):
    mu = DiscreteMeasure(np.asarray(xs)[:, None])
    nu = DiscreteMeasure(np.asarray(ys)[:, None])
    u = make_functional("linear-square")
    mixed = evaluate(u, mix(mu, nu, s))
    want = (1 - s) * evaluate(u, mu) + s * evaluate(u, nu)
    assert mixed == pytest.approx(want, rel=1e-10, abs=1e-10)
