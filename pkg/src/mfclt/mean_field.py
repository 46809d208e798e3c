"""Interacting particles, their mean-field limit, and the fluctuation CLT.

The particle system is the Euler-Maruyama discretization of
Y_{k+1} = Y_k + b(Y_k, mu^N_k) dt + sigma(Y_k, mu^N_k) sqrt(dt) xi_k with
mu^N_k the current (possibly weighted) empirical measure.  On top of the
integrator sit:

* a frozen high-M reference run standing in for the limit law mu_t (variance
  reduced: stratified initial cloud plus antithetic noise pairs; its residual
  bias is estimated by split-half and reported, never absorbed),
* the fluctuation process F^N_t = sqrt(N) [Phi(mu^N_t) - Phi(mu_t)] replicated
  over independent particle runs,
* a MasterEvaluator for V(t, mu) = Phi(Law(X_t^theta)) and its measure
  derivatives by common-random-number finite differences: the perturbed
  initial condition (1 - eps) mu + eps delta_y is realized by reweighting the
  same support atoms plus one extra atom, so perturbation noise is zero by
  construction,
* the two-term limit covariance Sigma of the fluctuation CLT by nested Monte
  Carlo, and a master-equation residual diagnostic.

Time discretization is an artifact parameter (default dt = 1e-2); every
quantity here is the Euler approximation of its continuous counterpart, and
oracle comparisons budget for that explicitly.

Determinism: every noise tensor comes from a counter-based stream keyed by
(seed, purpose, replication), so identical seeds give bit-identical results
for any worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .functionals import Functional, Linear, evaluate
from .laws import Law, SamplerSpec, as_law
from .measures import DiscreteMeasure
from .rng import stream
from .stats import empirical_cov, ks_test_normal, loglog_slope

DEFAULT_DT = 1e-2
DEFAULT_EPS = 0.05
DEFAULT_H = 0.05
_REF_FACTOR = 10  # reference cloud size = factor * largest particle count


class MeanFieldError(ValueError):
    """Simulation misuse or blow-up (bad grids, non-finite states, gates)."""


# ---------------------------------------------------------------------------
# batched empirical measures and models


class BatchEmpirical:
    """Measure view of a batch of weighted clouds: points (B, n, d).

    ``expect(fn)`` returns a (B, 1) array ready to broadcast against the
    particle axis; ``mean()`` returns (B, 1, d).  Weights are per-batch rows
    (B, n) or a shared (n,) vector; None means equal weights.
    """

    def __init__(self, points: np.ndarray, weights: np.ndarray | None = None):
        self.points = points
        self.weights = weights

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        vals = np.asarray(fn(self.points), dtype=float)  # (B, n)
        if self.weights is None:
            return vals.mean(axis=-1, keepdims=True)
        w = np.broadcast_to(self.weights, vals.shape)
        return np.sum(vals * w, axis=-1, keepdims=True)

    def mean(self) -> np.ndarray:
        if self.weights is None:
            return self.points.mean(axis=-2, keepdims=True)
        w = np.broadcast_to(self.weights, self.points.shape[:-1])
        return np.sum(self.points * w[..., None], axis=-2, keepdims=True)


@dataclass(frozen=True)
class MkvModel:
    """McKean-Vlasov coefficients plus their initial law.

    ``drift(x, mu) -> like x`` and ``diffusion(x, mu) -> x.shape + (noise_dim,)``
    must be vectorized over (B, n, d) point tensors with ``mu`` the matching
    BatchEmpirical.  ``flags`` may contain "is_dirac_initial" and
    "claims_bounded_coeffs"; they gate the covariance estimator.  Lipschitz
    continuity is the constructor's contract, spot-checked on probes.
    a(x, mu) = sigma sigma^T is positive semidefinite by construction.
    """

    name: str
    dim: int
    noise_dim: int
    drift: Callable[[np.ndarray, BatchEmpirical], np.ndarray]
    diffusion: Callable[[np.ndarray, BatchEmpirical], np.ndarray]
    initial: SamplerSpec
    flags: frozenset = frozenset()


def _lipschitz_spot_check(model: MkvModel, cap: float = 1e6) -> None:
    rng = stream(7321, "lipschitz-probe", model.name)
    x = rng.normal(size=(1, 6, model.dim))
    dx = 1e-3 * rng.normal(size=x.shape)
    mu = BatchEmpirical(x)
    for f in (model.drift, model.diffusion):
        a = np.asarray(f(x, mu), dtype=float)
        b = np.asarray(f(x + dx, mu), dtype=float)
        num = float(np.max(np.abs(b - a)))
        den = float(np.max(np.abs(dx)))
        if num > cap * den:
            raise MeanFieldError(
                f"model {model.name!r}: coefficient jump {num:.2e} over step "
                f"{den:.2e} fails the Lipschitz spot check")


def _ou_drift(x, mu):
    return -x


def _unit_diffusion(x, mu):
    return np.ones(x.shape + (1,))


def _mean_revert_drift(x, mu):
    return mu.mean() - x


def _half_diffusion(x, mu):
    return np.full(x.shape + (1,), 0.5)


def _sine_drift(x, mu):
    pull = mu.expect(lambda p: np.sin(p[..., 0]))  # (B, 1)
    return np.sin(x) + pull[..., None]


def make_model(name: str) -> MkvModel:
    """Built-in d = 1 models: ``ou``, ``mean-revert``, ``bounded-sine``."""
    if name == "ou":
        model = MkvModel("ou", 1, 1, _ou_drift, _unit_diffusion,
                         SamplerSpec.normal())
    elif name == "mean-revert":
        model = MkvModel("mean-revert", 1, 1, _mean_revert_drift,
                         _half_diffusion, SamplerSpec.normal())
    elif name == "bounded-sine":
        model = MkvModel("bounded-sine", 1, 1, _sine_drift, _unit_diffusion,
                         SamplerSpec.normal(),
                         flags=frozenset({"claims_bounded_coeffs"}))
    else:
        raise MeanFieldError(
            f"unknown model {name!r}; known: {', '.join(model_names())}")
    _lipschitz_spot_check(model)
    return model


def model_names() -> list[str]:
    return ["bounded-sine", "mean-revert", "ou"]


# ---------------------------------------------------------------------------
# Euler-Maruyama core


def _steps_for(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise MeanFieldError(f"time {t} is not on the dt={dt} grid")
    return k


def _integrate(model: MkvModel, points: np.ndarray,
               weights: np.ndarray | None, steps: int, dt: float,
               noise_fn: Callable[[int], np.ndarray],
               snapshot_steps: Sequence[int] = ()) -> tuple[np.ndarray, dict]:
    """Run the batched integrator; snapshots are copies keyed by step index."""
    x = np.array(points, dtype=float)
    snaps = {}
    if 0 in snapshot_steps:
        snaps[0] = x.copy()
    root_dt = np.sqrt(dt)
    for k in range(steps):
        mu = BatchEmpirical(x, weights)
        bx = np.asarray(model.drift(x, mu), dtype=float)
        sx = np.asarray(model.diffusion(x, mu), dtype=float)
        xi = noise_fn(k)  # (n, noise_dim), shared across the batch (CRN)
        if sx.shape[-1] == 1:
            x = x + bx * dt + root_dt * (sx[..., 0] * xi)
        else:
            x = x + bx * dt + root_dt * np.einsum(
                "...ij,...j->...i", sx,
                np.broadcast_to(xi, x.shape[:-1] + xi.shape[-1:]))
        if not np.all(np.isfinite(x)):
            raise MeanFieldError(f"non-finite particle state at step {k + 1}")
        if (k + 1) in snapshot_steps:
            snaps[k + 1] = x.copy()
    return x, snaps


def _plain_noise(rng: np.random.Generator, n: int, d_noise: int
                 ) -> Callable[[int], np.ndarray]:
    return lambda k: rng.standard_normal((n, d_noise))


def _antithetic_noise(rng: np.random.Generator, n: int, extra: int,
                      d_noise: int) -> Callable[[int], np.ndarray]:
    """Interleaved +/- pairs over all rows (n and extra even)."""
    if n % 2 or extra % 2:
        raise MeanFieldError("antithetic noise needs even row counts")
    total = n + extra

    def draw(k: int) -> np.ndarray:
        g = rng.standard_normal((total // 2, d_noise))
        out = np.empty((total, d_noise))
        out[0::2] = g
        out[1::2] = -g
        return out

    return draw


def simulate_particles(model: MkvModel, n: int, dt: float, t: float,
                       seed: int) -> np.ndarray:
    """(steps+1, N, d) Euler-Maruyama trajectory of the N-particle system."""
    if n < 2:
        raise MeanFieldError("need at least two particles")
    if dt <= 0 or t < dt:
        raise MeanFieldError("need dt > 0 and T >= dt")
    steps = _steps_for(t, dt)
    rng = stream(seed, "particles")
    x0 = model.initial.sample(rng, n)[None]  # (1, N, d)
    noise = _plain_noise(stream(seed, "particles-noise"), n, model.noise_dim)
    _, snaps = _integrate(model, x0, None, steps, dt, noise,
                          snapshot_steps=range(steps + 1))
    return np.stack([snaps[k][0] for k in range(steps + 1)])


def _stratified_initial(base: object, m: int, rng: np.random.Generator
                        ) -> np.ndarray:
    """(m, d) cloud: inverse-CDF midpoints when available, else i.i.d."""
    law = as_law(base)
    if isinstance(law, DiscreteMeasure) and law.dim == 1:
        order = np.argsort(law.points[:, 0], kind="stable")
        cum = np.cumsum(law.weights[order])
        idx = np.searchsorted(cum, (np.arange(m) + 0.5) / m, side="left")
        return law.points[order[np.minimum(idx, law.natoms - 1)]]
    if law.dim == 1 and hasattr(law, "quantile"):
        try:
            return np.asarray(
                [law.quantile((j + 0.5) / m) for j in range(m)])[:, None]
        except Exception:
            pass
    if isinstance(law, DiscreteMeasure):
        idx = rng.choice(law.natoms, size=m, p=law.weights)
        return law.points[idx]
    if hasattr(law, "sample"):
        return law.sample(rng, m)
    raise MeanFieldError("cannot draw an initial cloud from this base measure")


def simulate_limit_reference(model: MkvModel, m: int, dt: float, t: float,
                             seed: int, antithetic: bool = True,
                             snapshot_times: Sequence[float] = ()
                             ) -> tuple[np.ndarray, dict]:
    """High-M self-interacting run whose clouds proxy the limit law mu_t.

    Returns (trajectory-final cloud (m, d), {time: cloud}).  The initial cloud
    is stratified and the noise antithetically paired by default; that removes
    the O(M^-1/2) mean noise for linear models and shrinks it otherwise.  The
    remaining bias is the caller's to estimate (see reference_spread).
    """
    if m % 2:
        m += 1
    steps = _steps_for(t, dt)
    snap_steps = {_steps_for(s, dt): s for s in snapshot_times}
    rng = stream(seed, "reference-init")
    x0 = _stratified_initial(model.initial, m, rng)[None]
    if antithetic:
        noise = _antithetic_noise(stream(seed, "reference-noise"), m, 0,
                                  model.noise_dim)
    else:
        noise = _plain_noise(stream(seed, "reference-noise"), m, model.noise_dim)
    final, snaps = _integrate(model, x0, None, steps, dt, noise,
                              snapshot_steps=sorted({*snap_steps, steps}))
    clouds = {snap_steps[k]: snaps[k][0] for k in snap_steps}
    return final[0], clouds


def reference_spread(phi: Functional, cloud: np.ndarray) -> float:
    """Split-half spread of Phi on a reference cloud: |Phi(A) - Phi(B)| / 2.

    Halves take alternating antithetic pairs so each is itself balanced.
    """
    a = np.concatenate([cloud[0::4], cloud[1::4]])
    b = np.concatenate([cloud[2::4], cloud[3::4]])
    return abs(evaluate(phi, DiscreteMeasure(a)) - evaluate(phi, DiscreteMeasure(b))) / 2.0


# ---------------------------------------------------------------------------
# fluctuation process


@dataclass(frozen=True)
class FluctuationReport:
    times: tuple[float, ...]
    n: int
    replications: int
    seed: int
    dt: float
    f_samples: np.ndarray  # (R, K)
    sigma_empirical: np.ndarray  # (K, K)
    sigma_empirical_stderr: np.ndarray
    ref_size: int
    ref_bias_scaled: np.ndarray  # (K,) sqrt(N)-scaled reference spread
    model: str
    phi: str
    sigma_theory: np.ndarray | None = None
    sigma_theory_stderr: np.ndarray | None = None
    cramer_wold: tuple | None = None


def _phi_on_cloud(phi: Functional, cloud: np.ndarray) -> float:
    mf = phi.moment_form()
    if mf is not None:
        return float(mf.value(mf.stats(cloud).mean(axis=0)))
    return evaluate(phi, DiscreteMeasure(cloud))


def fluctuation_process(phi: Functional, model: MkvModel, n: int,
                        times: Sequence[float], r: int, seed: int,
                        dt: float = DEFAULT_DT, ref_size: int | None = None,
                        workers: int = 1) -> FluctuationReport:
    """R replications of F^N_t = sqrt(N) [Phi(mu^N_t) - Phi(mu_t)].

    The limit law is one frozen reference run (size 10 N by default, seed
    tag separated from the particle streams) shared by every replication; its
    sqrt(N)-scaled split-half spread is reported as ref_bias_scaled.
    """
    times = tuple(float(t) for t in times)
    if any(b <= a for a, b in zip(times, times[1:])) or not times:
        raise MeanFieldError("times must be strictly increasing and nonempty")
    horizon = times[-1]
    m_ref = int(ref_size) if ref_size is not None else _REF_FACTOR * n
    _, ref_clouds = simulate_limit_reference(
        model, m_ref, dt, horizon, seed, snapshot_times=times)
    ref_values = np.asarray([_phi_on_cloud(phi, ref_clouds[t]) for t in times])
    ref_bias = np.asarray(
        [reference_spread(phi, ref_clouds[t]) for t in times])
    steps = _steps_for(horizon, dt)
    snap_steps = {_steps_for(t, dt): i for i, t in enumerate(times)}
    root_n = float(np.sqrt(n))

    def one_rep(rep: int) -> np.ndarray:
        init_rng = stream(seed, "fluct-init", rep)
        x0 = model.initial.sample(init_rng, n)[None]
        noise = _plain_noise(stream(seed, "fluct-noise", rep), n, model.noise_dim)
        _, snaps = _integrate(model, x0, None, steps, dt, noise,
                              snapshot_steps=snap_steps.keys())
        out = np.empty(len(times))
        for k_step, idx in snap_steps.items():
            out[idx] = root_n * (_phi_on_cloud(phi, snaps[k_step][0]) - ref_values[idx])
        return out

    if workers <= 1:
        rows = [one_rep(rep) for rep in range(r)]
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            rows = list(pool.map(one_rep, range(r)))
    f_samples = np.asarray(rows)
    f_samples.setflags(write=False)
    cov = empirical_cov(f_samples)
    return FluctuationReport(
        times=times, n=int(n), replications=int(r), seed=int(seed), dt=float(dt),
        f_samples=f_samples, sigma_empirical=cov.cov,
        sigma_empirical_stderr=cov.stderr, ref_size=m_ref,
        ref_bias_scaled=root_n * ref_bias, model=model.name,
        phi=phi.name or type(phi).__name__)


# ---------------------------------------------------------------------------
# master function V(t, mu) and its derivatives


@dataclass(frozen=True)
class MasterEvaluator:
    """Nested Monte Carlo evaluator of V(t, mu) = Phi(Law(X_t | X_0 ~ mu)).

    ``m`` inner particles (even), measure step ``eps``, spatial step ``h``.
    All runs with the same seed share one noise tensor (CRN): clouds are laid
    out as [m base atoms | slot z | slot y], and perturbations only reweight
    or move the slots, so finite differences subtract coupled runs.
    """

    phi: Functional
    model: MkvModel
    m: int = 2000
    dt: float = DEFAULT_DT
    eps: float = DEFAULT_EPS
    h: float = DEFAULT_H
    antithetic: bool = True

    def __post_init__(self):
        if self.m < 4 or self.m % 2:
            raise MeanFieldError("inner particle count must be even and >= 4")
        if self.eps <= 0 or self.h <= 0 or self.dt <= 0:
            raise MeanFieldError("eps, h, dt must be positive")


def _even_counts(weights: np.ndarray, m: int) -> np.ndarray:
    """Even per-atom replication counts summing to m (largest remainder)."""
    half = m // 2
    raw = weights * half
    counts = np.maximum(np.floor(raw).astype(int), 1)
    frac = raw - np.floor(raw)
    gap = half - counts.sum()
    order = np.argsort(-frac)
    idx = 0
    while gap > 0:
        counts[order[idx % len(order)]] += 1
        idx += 1
        gap -= 1
    while gap < 0:
        big = int(np.argmax(counts))
        if counts[big] <= 1:
            raise MeanFieldError("inner cloud too small for the atom count")
        counts[big] -= 1
        gap += 1
    return 2 * counts


def _base_cloud(ev: MasterEvaluator, mu: object, seed: int
                ) -> tuple[np.ndarray, np.ndarray]:
    """(points (m, d), weights (m,)) representing mu exactly when possible."""
    law = as_law(mu)
    m = ev.m
    if isinstance(law, DiscreteMeasure):
        if 2 * law.natoms <= m:
            counts = _even_counts(law.weights, m)
            points = np.repeat(law.points, counts, axis=0)
            weights = np.repeat(law.weights / counts, counts)
            return points, weights
        if law.natoms <= m:
            return law.points, law.weights
        # more atoms than inner particles: deterministic stratified thinning
        rng = stream(seed, "master-cloud-thin")
        pts = _stratified_initial(law, m, rng)
        return pts, np.full(m, 1.0 / m)
    rng = stream(seed, "master-cloud")
    pts = _stratified_initial(law, m, rng)
    return pts, np.full(pts.shape[0], 1.0 / pts.shape[0])


def _phi_batch(phi: Functional, points: np.ndarray, weights: np.ndarray
               ) -> np.ndarray:
    """Phi of each weighted cloud in a (B, n, d) batch."""
    b, n, d = points.shape
    mf = phi.moment_form()
    if mf is not None:
        g = mf.stats(points.reshape(-1, d)).reshape(b, n, -1)
        v = np.einsum("bnq,bn->bq", g, weights)
        return np.asarray(mf.value(v), dtype=float).reshape(b)
    out = np.empty(b)
    for i in range(b):
        keep = weights[i] > 0
        out[i] = evaluate(phi, DiscreteMeasure(points[i, keep], weights[i, keep]))
    return out


def _run_configs(ev: MasterEvaluator, steps: int, base_pts: np.ndarray,
                 base_w: np.ndarray,
                 configs: Sequence[tuple[np.ndarray, float, np.ndarray, float]],
                 base_scale: np.ndarray, seed: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Evolve a batch of perturbed initial conditions under CRN.

    Each config is (slot_z_point, slot_z_weight, slot_y_point, slot_y_weight);
    ``base_scale`` (B,) multiplies the shared base weights so each row still
    sums to one.  Each slot is realized as an antithetic pair of rows with
    half the slot weight each, so slot noise has exactly zero mean under
    linear dynamics.  Row layout: [m base | z z | y y].
    Returns (final states (B, m+4, d), weights (B, m+4)).
    """
    m, d = base_pts.shape
    b = len(configs)
    points = np.empty((b, m + 4, d))
    weights = np.empty((b, m + 4))
    for i, (zp, zw, yp, yw) in enumerate(configs):
        points[i, :m] = base_pts
        points[i, m] = points[i, m + 1] = zp
        points[i, m + 2] = points[i, m + 3] = yp
        weights[i, :m] = base_scale[i] * base_w
        weights[i, m] = weights[i, m + 1] = zw / 2.0
        weights[i, m + 2] = weights[i, m + 3] = yw / 2.0
    if ev.antithetic:
        noise = _antithetic_noise(stream(seed, "master-noise"), m, 4,
                                  ev.model.noise_dim)
    else:
        noise = _plain_noise(stream(seed, "master-noise"), m + 4,
                             ev.model.noise_dim)
    final, _ = _integrate(ev.model, points, weights, steps, ev.dt, noise)
    return final, weights


def _master_batch(ev: MasterEvaluator, steps: int, base_pts: np.ndarray,
                  base_w: np.ndarray, configs, base_scale: np.ndarray,
                  seed: int) -> np.ndarray:
    final, weights = _run_configs(ev, steps, base_pts, base_w, configs,
                                  base_scale, seed)
    return _phi_batch(ev.phi, final, weights)


def master_value(ev: MasterEvaluator, t: float, mu: object, seed: int) -> float:
    """V(t, mu) = Phi of the evolved inner cloud; t = 0 is exact."""
    law = as_law(mu)
    if t == 0:
        return evaluate(ev.phi, law)
    steps = _steps_for(t, ev.dt)
    pts, base_w = _base_cloud(ev, law, seed)
    zero = np.zeros(ev.model.dim)
    vals = _master_batch(ev, steps, pts, base_w, [(zero, 0.0, zero, 0.0)],
                         np.ones(1), seed)
    return float(vals[0])


def master_lfd_batch(ev: MasterEvaluator, t: float, nu: object,
                     ys: np.ndarray, seed: int,
                     richardson: bool = False) -> np.ndarray:
    """dV/dm(t, nu, y) for each row y: [V((1-eps)nu + eps delta_y) -
    V((1-eps)nu + eps delta_0)] / eps, CRN-coupled (normalization built in)."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    law = as_law(nu)
    steps = _steps_for(t, ev.dt)
    pts, base_w = _base_cloud(ev, law, seed)
    zero = np.zeros(ev.model.dim)

    def at_eps(eps: float) -> np.ndarray:
        configs = [(zero, 0.0, zero, eps)]
        configs += [(zero, 0.0, y, eps) for y in ys]
        scale = np.full(len(configs), 1.0 - eps)
        vals = _master_batch(ev, steps, pts, base_w, configs, scale, seed)
        return (vals[1:] - vals[0]) / eps

    out = at_eps(ev.eps)
    if richardson:
        out = 2.0 * at_eps(ev.eps / 2) - out
    return out


def master_lfd(ev: MasterEvaluator, t: float, nu: object, y: object,
               seed: int, richardson: bool = False) -> float:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(master_lfd_batch(ev, t, nu, y[None], seed,
                                  richardson=richardson)[0])


def master_lderiv_batch(ev: MasterEvaluator, t: float, nu: object,
                        ys: np.ndarray, seed: int) -> np.ndarray:
    """L-derivative d_mu V(t, nu)(y) = grad_y dV/dm, central differences.

    Returns (P, d).  The y = 0 baseline cancels, so only shifted slots run.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    p, d = ys.shape
    law = as_law(nu)
    steps = _steps_for(t, ev.dt)
    pts, base_w = _base_cloud(ev, law, seed)
    zero = np.zeros(d)
    configs = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = ev.h
        for y in ys:
            configs.append((zero, 0.0, y + e, ev.eps))
            configs.append((zero, 0.0, y - e, ev.eps))
    scale = np.full(len(configs), 1.0 - ev.eps)
    vals = _master_batch(ev, steps, pts, base_w, configs, scale, seed)
    vals = vals.reshape(d, p, 2)
    return ((vals[..., 0] - vals[..., 1]) / (2.0 * ev.h * ev.eps)).T


def master_lderiv(ev: MasterEvaluator, t: float, nu: object, y: object,
                  seed: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return master_lderiv_batch(ev, t, nu, y[None], seed)[0]


def master_lfd2(ev: MasterEvaluator, t: float, nu: object, y: object,
                z: object, seed: int) -> float:
    """Second measure derivative d2V/dm2(t, nu, y, z) by iterated eps-steps:
    [dV/dm((1-eps)nu + eps delta_z, y) - dV/dm(nu, y)] / eps."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    law = as_law(nu)
    steps = _steps_for(t, ev.dt)
    pts, base_w = _base_cloud(ev, law, seed)
    eps = ev.eps
    zero = np.zeros(ev.model.dim)
    configs = [
        (z, eps * (1 - eps), y, eps),      # V over (1-eps)nu_z + eps delta_y
        (z, eps * (1 - eps), zero, eps),
        (zero, 0.0, y, eps),               # V over (1-eps)nu + eps delta_y
        (zero, 0.0, zero, eps),
    ]
    scale = np.asarray([(1 - eps) ** 2, (1 - eps) ** 2, 1 - eps, 1 - eps])
    v = _master_batch(ev, steps, pts, base_w, configs, scale, seed)
    return float(((v[0] - v[1]) - (v[2] - v[3])) / eps ** 2)


def theta_second_derivative(ev: MasterEvaluator, t: float, nu: object,
                            z: object, y: object, seed: int) -> float:
    """Mixed spatial second derivative d_z d_y of d2V/dm2(t, nu, z, y).

    This is the kernel weighting the O(N^-3/2) Ito remainder; it vanishes
    identically for linear Phi under linear dynamics.  For Linear Phi the
    estimator differences the statistic tensors before reducing, so that
    structural cancellations survive floating point exactly.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if ev.model.dim != 1:
        raise MeanFieldError("theta probe implemented for d = 1")
    law = as_law(nu)
    steps = _steps_for(t, ev.dt)
    pts, base_w = _base_cloud(ev, law, seed)
    eps, h = ev.eps, ev.h
    e = np.asarray([h])
    configs = [(z + a * e, eps * (1 - eps), y + b * e, eps)
               for a in (+1, -1) for b in (+1, -1)]
    scale = np.full(4, (1 - eps) ** 2)
    final, weights = _run_configs(ev, steps, pts, base_w, configs, scale, seed)
    denom = 4.0 * h ** 2 * eps ** 2
    if isinstance(ev.phi, Linear):
        # difference the per-atom statistics first: rows identical across
        # configs cancel exactly, so the estimate is 0.0 bit-for-bit when the
        # value truly does not depend on the slot positions
        g = np.asarray(ev.phi.phi(final), dtype=float)  # (4, m+2)
        diff = (g[0] - g[1]) + (g[3] - g[2])
        return float(np.dot(weights[0], diff)) / denom
    v = _phi_batch(ev.phi, final, weights)
    return float((v[0] - v[1]) - (v[2] - v[3])) / denom


# ---------------------------------------------------------------------------
# limit covariance Sigma


@dataclass(frozen=True)
class CovarianceConfig:
    """Estimator knobs for the two-term fluctuation covariance."""

    inner_m: int = 2000
    dt: float = DEFAULT_DT
    eps: float = DEFAULT_EPS
    h: float = DEFAULT_H
    xi_probes: int = 64
    path_probes: int = 32
    s_stride: int = 1  # left-Riemann stride over the dt grid
    ref_size: int = 4000
    force: bool = False


@dataclass(frozen=True)
class CovarianceResult:
    matrix: np.ndarray  # (K, K) = term1 + term2
    stderr: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    times: tuple[float, ...]
    gate: str


def _xi_probes(initial: object, p: int, seed: int
               ) -> tuple[np.ndarray, np.ndarray]:
    """Probe points and weights quadrating the initial law.

    Gauss-Hermite for normal laws, Gauss-Legendre for uniform, the atoms
    themselves for small discrete laws, stratified midpoints otherwise.
    """
    law = as_law(initial)
    spec = getattr(law, "spec", None)
    if spec is not None and spec.dim == 1:
        if spec.kind == "normal":
            nodes, w = np.polynomial.hermite_e.hermegauss(p)
            return (spec.mean + spec.sd * nodes)[:, None], w / w.sum()
        if spec.kind == "uniform":
            nodes, w = np.polynomial.legendre.leggauss(p)
            mid, half = (spec.low + spec.high) / 2, (spec.high - spec.low) / 2
            return (mid + half * nodes)[:, None], w / w.sum()
    if isinstance(law, DiscreteMeasure) and law.natoms <= p:
        return law.points, law.weights
    rng = stream(seed, "xi-probes")
    pts = _stratified_initial(law, p, rng)
    return pts, np.full(pts.shape[0], 1.0 / pts.shape[0])


def _cov_of_values(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(K, K) covariance of rows of a under probe weights w."""
    mean = a @ w
    centered = a - mean[:, None]
    return (centered * w) @ centered.T


def theoretical_covariance(phi: Functional, model: MkvModel,
                           times: Sequence[float], config: CovarianceConfig,
                           seed: int) -> CovarianceResult:
    """Sigma_ij = Cov(dV/dm(t_i, nu, xi), dV/dm(t_j, nu, xi))
    + E int_0^{t_i ^ t_j} d_mu V(t_i - s, mu_s)(X_s)^T a(X_s, mu_s)
    d_mu V(t_j - s, mu_s)(X_s) ds, both by nested Monte Carlo.

    Gate: the fluctuation theorem needs a Dirac initial law or bounded
    coefficients; models claiming neither flag require ``config.force``
    (documented as a diagnostic run outside the theorem's hypotheses).
    Standard errors combine probe-halving with an independent-seed re-run.
    """
    times = tuple(float(t) for t in times)
    k = len(times)
    if k < 1 or k > 8:
        raise MeanFieldError("between 1 and 8 time points (cost cap)")
    if not (model.flags & {"is_dirac_initial", "claims_bounded_coeffs"}):
        if not config.force:
            raise MeanFieldError(
                f"model {model.name!r} claims neither a Dirac initial law nor "
                "bounded coefficients; pass force=True to run anyway")
        gate = "forced (outside the theorem's stated hypotheses)"
    else:
        gate = "hypothesis flags satisfied"

    ev = MasterEvaluator(phi, model, m=config.inner_m, dt=config.dt,
                         eps=config.eps, h=config.h)
    nu = as_law(model.initial)

    def term1_at(p: int, sub_seed: int) -> np.ndarray:
        xis, xi_w = _xi_probes(model.initial, p, sub_seed)
        rows = np.stack([
            master_lfd_batch(ev, t, nu, xis, sub_seed) for t in times])
        return _cov_of_values(rows, xi_w)

    def term2_at(p: int, sub_seed: int) -> np.ndarray:
        horizon = times[-1]
        _, ref_clouds = simulate_limit_reference(
            model, config.ref_size, config.dt, horizon, sub_seed,
            snapshot_times=_s_grid(times, config))
        m_ref = next(iter(ref_clouds.values())).shape[0]
        # spread antithetic pairs across the cloud as path probes
        pair_idx = (np.arange(p // 2) * (m_ref // 2) // max(p // 2, 1)) * 2
        idx = np.sort(np.concatenate([pair_idx, pair_idx + 1]))
        d = model.dim
        zero = np.zeros(d)
        out = np.zeros((k, k))
        for s in _s_grid(times, config):
            cloud = ref_clouds[s]
            mu_s = DiscreteMeasure(cloud)
            base_pts, base_w = _base_cloud(ev, mu_s, sub_seed)
            xs = cloud[idx]
            live = [i for i, t in enumerate(times) if t > s + 1e-12]
            g = np.zeros((k, len(idx), d))
            for i in live:
                steps = _steps_for(times[i] - s, config.dt)
                configs = []
                for j in range(d):
                    e = np.zeros(d)
                    e[j] = ev.h
                    for x_probe in xs:
                        configs.append((zero, 0.0, x_probe + e, ev.eps))
                        configs.append((zero, 0.0, x_probe - e, ev.eps))
                scale = np.full(len(configs), 1.0 - ev.eps)
                vals = _master_batch(ev, steps, base_pts, base_w, configs,
                                     scale, sub_seed).reshape(d, len(idx), 2)
                g[i] = ((vals[..., 0] - vals[..., 1]) / (2 * ev.h * ev.eps)).T
            batch = BatchEmpirical(cloud[None])
            sx = np.asarray(model.diffusion(xs[None], batch), dtype=float)[0]
            a = np.einsum("pij,pkj->pik", sx, sx)  # sigma sigma^T at probes
            for i in live:
                for j in live:
                    vals = np.einsum("pi,pik,pk->p", g[i], a, g[j])
                    out[i, j] += config.s_stride * config.dt * float(vals.mean())
        return out

    t1 = term1_at(config.xi_probes, seed)
    t1_half = term1_at(max(config.xi_probes // 2, 2), seed)
    t1_alt = term1_at(config.xi_probes, seed + 1)
    se1 = np.abs(t1 - t1_half) + np.abs(t1 - t1_alt) / 2.0

    t2 = term2_at(config.path_probes, seed)
    t2_half = term2_at(max(config.path_probes // 2, 2), seed)
    t2_alt = term2_at(config.path_probes, seed + 1)
    se2 = np.abs(t2 - t2_half) + np.abs(t2 - t2_alt) / 2.0

    return CovarianceResult(
        matrix=t1 + t2, stderr=se1 + se2, term1=t1, term2=t2,
        times=times, gate=gate)


def _s_grid(times: Sequence[float], config: CovarianceConfig) -> list[float]:
    horizon = max(times)
    n_steps = _steps_for(horizon, config.dt)
    return [k * config.dt for k in range(0, n_steps, config.s_stride)]


# ---------------------------------------------------------------------------
# master-equation residual


@dataclass(frozen=True)
class MasterResidual:
    lhs: float  # d/ds V(t, mu), central difference
    rhs: float  # int [d_mu V . b + 1/2 tr(a d_v d_mu V)] dmu
    residual: float
    budget: float
    mc_spread: float
    tau: float


def master_equation_residual(ev: MasterEvaluator, t: float, mu: object,
                             seed: int, tau: float | None = None
                             ) -> MasterResidual:
    """|dV/dt - int [d_mu V . b + 1/2 tr(a d_v d_mu V)] dmu| at (t, mu).

    All derivatives are finite differences under CRN; d = 1 only.  The budget
    3 * spread + (5 dt + 5 tau^2 + 5 h^2 + eps) * (1 + |lhs| + |rhs|) combines
    a two-seed Monte Carlo spread with first-order discretization allowances;
    it is a smoke-test tolerance, not a proven bound.
    """
    if ev.model.dim != 1:
        raise MeanFieldError("master-equation residual implemented for d = 1")
    law = as_law(mu)
    tau = 2 * ev.dt if tau is None else float(tau)
    if t - tau < -1e-12:
        raise MeanFieldError("need t >= tau for the centered time difference")
    _steps_for(tau, ev.dt)

    if isinstance(law, DiscreteMeasure):
        support = law
    elif isinstance(law, Law):
        support = law.proxy_measure(32)
    else:
        raise MeanFieldError("residual probe needs a discrete or basic law")
    if support.natoms > 64:
        raise MeanFieldError("residual probe capped at 64 atoms")

    def lhs_at(s: int) -> float:
        up = master_value(ev, t + tau, law, s)
        down = master_value(ev, t - tau, law, s)
        return (up - down) / (2.0 * tau)

    def rhs_at(s: int) -> float:
        steps = _steps_for(t, ev.dt)
        pts, base_w = _base_cloud(ev, law, s)
        eps, h = ev.eps, ev.h
        zero = np.zeros(1)
        configs = []
        for v in support.points:
            for shift in (h, 0.0, -h):
                configs.append((zero, 0.0, v + shift, eps))
        scale = np.full(len(configs), 1.0 - eps)
        vals = _master_batch(ev, steps, pts, base_w, configs, scale, s)
        vals = vals.reshape(support.natoms, 3)
        lderiv = (vals[:, 0] - vals[:, 2]) / (2.0 * h * eps)
        second = (vals[:, 0] - 2.0 * vals[:, 1] + vals[:, 2]) / (eps * h * h)
        batch = BatchEmpirical(support.points[None],
                               support.weights[None])
        bx = np.asarray(ev.model.drift(support.points[None], batch))[0, :, 0]
        sx = np.asarray(ev.model.diffusion(support.points[None], batch))[0, :, 0, 0]
        integrand = lderiv * bx + 0.5 * sx * sx * second
        return float(support.weights @ integrand)

    lhs, rhs = lhs_at(seed), rhs_at(seed)
    lhs_b, rhs_b = lhs_at(seed + 1), rhs_at(seed + 1)
    spread = max(abs(lhs - lhs_b), abs(rhs - rhs_b))
    residual = abs(lhs - rhs)
    scale = 1.0 + abs(lhs) + abs(rhs)
    budget = 3.0 * spread + (5 * ev.dt + 5 * tau ** 2 + 5 * ev.h ** 2 + ev.eps) * scale
    return MasterResidual(lhs=lhs, rhs=rhs, residual=residual, budget=budget,
                          mc_spread=spread, tau=tau)


# ---------------------------------------------------------------------------
# regularity probes and the Cramer-Wold check


@dataclass(frozen=True)
class ProbeReport:
    n_grid: tuple[int, ...]
    values: tuple[float, ...]
    slope: float
    r2: float


def time_regularity_probe(phi: Functional, model: MkvModel, t1: float,
                          t2: float, n_grid: Sequence[int], r: int, seed: int,
                          dt: float = DEFAULT_DT) -> ProbeReport:
    """Slope in N of E|(V(t2, mu0^N) - V(t2, nu)) - (V(t1, mu0^N) - V(t1, nu))|^4.

    The N initial atoms are used directly as the inner cloud (one CRN run per
    replication, snapshot at t1); the limit values come from one big
    stratified antithetic reference.  The fourth moment should fall like N^-2.
    """
    if not 0 < t1 < t2:
        raise MeanFieldError("need 0 < t1 < t2")
    grid = tuple(int(n) for n in n_grid)
    m_ref = _REF_FACTOR * max(grid)
    _, ref_clouds = simulate_limit_reference(model, m_ref, dt, t2, seed,
                                             snapshot_times=(t1, t2))
    ref1 = _phi_on_cloud(phi, ref_clouds[t1])
    ref2 = _phi_on_cloud(phi, ref_clouds[t2])
    steps2 = _steps_for(t2, dt)
    k1 = _steps_for(t1, dt)
    values = []
    for n in grid:
        acc = 0.0
        for rep in range(r):
            x0 = model.initial.sample(stream(seed, "time-reg-init", n, rep), n)[None]
            noise = _plain_noise(stream(seed, "time-reg-noise", n, rep), n,
                                 model.noise_dim)
            _, snaps = _integrate(model, x0, None, steps2, dt, noise,
                                  snapshot_steps=(k1, steps2))
            d2 = _phi_on_cloud(phi, snaps[steps2][0]) - ref2
            d1 = _phi_on_cloud(phi, snaps[k1][0]) - ref1
            acc += (d2 - d1) ** 4
        values.append(acc / r)
    fit = loglog_slope(np.asarray(grid, dtype=float), np.asarray(values))
    return ProbeReport(grid, tuple(values), fit.slope, fit.r2)


def fourth_moment_bound_probe(phi: Functional, m0: object,
                              n_grid: Sequence[int], r: int, seed: int
                              ) -> ProbeReport:
    """N^2 E|Phi(m^N) - Phi(m0)|^4 across the grid (bounded when Phi is
    smooth with bounded derivatives); equals E|sqrt(N) delta|^4 directly."""
    from .clt_engine import run_clt_experiment

    grid = tuple(int(n) for n in n_grid)
    values = []
    for n in grid:
        sub_seed = int(stream(seed, "fourth-moment", n).integers(1 << 62))
        rep = run_clt_experiment(phi, m0, n, r, sub_seed)
        values.append(float(np.mean(rep.samples ** 4)))
    fit = loglog_slope(np.asarray(grid, dtype=float), np.asarray(values))
    return ProbeReport(grid, tuple(values), fit.slope, fit.r2)


@dataclass(frozen=True)
class DirectionTest:
    direction: tuple[float, ...]
    variance: float
    ks_stat: float
    pvalue: float
    skipped: bool


def cramer_wold_normality(f_samples: np.ndarray, sigma_theory: np.ndarray,
                          directions: Sequence[Sequence[float]] | None = None
                          ) -> list[DirectionTest]:
    """KS test of theta^T F^N against N(0, theta^T Sigma theta) per direction.

    Defaults: the coordinate axes plus the normalized all-ones direction.
    Degenerate directions (zero theoretical variance) are skipped and flagged.
    """
    f = np.asarray(f_samples, dtype=float)
    sigma = np.asarray(sigma_theory, dtype=float)
    k = f.shape[1]
    if directions is None:
        directions = [tuple(np.eye(k)[i]) for i in range(k)]
        directions.append(tuple(np.full(k, 1.0 / np.sqrt(k))))
    out = []
    for theta in directions:
        th = np.asarray(theta, dtype=float)
        var = float(th @ sigma @ th)
        if var < 1e-12:
            out.append(DirectionTest(tuple(th), var, float("nan"),
                                     float("nan"), True))
            continue
        ks = ks_test_normal(f @ th, 0.0, var)
        out.append(DirectionTest(tuple(th), var, ks.statistic, ks.pvalue, False))
    return out
