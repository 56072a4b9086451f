"""Replica-symmetric free energy and its comparison with exact finite-N values.

``G(gamma) = alpha log sum_p Poisson_gamma(p) E[Vbar_{p+1} / Vbar_p]`` where
``Vbar_p`` is the average of ``exp u(sum_{i<=p} g_i s_i)`` over spins with
i.i.d. means drawn from the fixed point. That average is multilinear in the
means, so integrating them out is the same as evaluating at the population
mean. ``F`` integrates ``G`` from ``F(0) = log 2 + alpha u(0)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline
from scipy.stats import poisson

from .errors import CapacityError, NumericalError, ParameterError
from .exact_gibbs import disorder_samples, summarize
from .fixed_point import PopulationMeasure, solve_fixed_point
from .model import BoundedPotential, ModelParams, check_conditions, u_eval
from .streams import substream
from .transport import w1_cdf, w1_joint

MAX_VBAR_SPINS = 24
TAIL_MASS = 1e-9
LOG2 = math.log(2.0)


@njit(cache=True, nogil=True)
def _vbar_pair(g, p, mbar, kind, a, b):
    """``(Vbar_p, Vbar_{p+1})``; the first ``p`` weights are shared, ``g[p]`` is the extra one."""
    lp = 0.5 * (1.0 + mbar)
    lm = 0.5 * (1.0 - mbar)
    wtab = np.empty(p + 1)
    for k in range(p + 1):
        wtab[k] = lp**k * lm ** (p - k)
    sigma = -np.ones(p)
    arg = 0.0
    for i in range(p):
        arg -= g[i]
    n_plus = 0
    gl = g[p]
    vp = 0.0
    vp1 = 0.0
    for t in range(1 << p):
        if t > 0:
            j = 0
            while (t >> j) & 1 == 0:
                j += 1
            sigma[j] = -sigma[j]
            arg += 2.0 * sigma[j] * g[j]
            n_plus += 1 if sigma[j] > 0 else -1
        w = wtab[n_plus]
        vp += w * math.exp(u_eval(kind, a, b, arg))
        vp1 += w * (lp * math.exp(u_eval(kind, a, b, arg + gl))
                    + lm * math.exp(u_eval(kind, a, b, arg - gl)))
    return vp, vp1


@njit(cache=True, nogil=True)
def _ratio_batch(G, p, mbar, kind, a, b, out):
    for s in range(G.shape[0]):
        vp, vp1 = _vbar_pair(G[s], p, mbar, kind, a, b)
        out[s] = vp1 / vp


def vbar(p: int, weights, u: BoundedPotential, mbar: float) -> float:
    """``sum_s exp(u(sum_i w_i s_i)) prod_i (1 + s_i mbar) / 2`` over ``s`` in ``{-1,1}^p``."""
    if p > MAX_VBAR_SPINS:
        raise CapacityError(f"p={p} exceeds the enumeration cap {MAX_VBAR_SPINS}")
    if abs(mbar) > 1.0:
        raise ParameterError("mbar must lie in [-1, 1]")
    w = np.zeros(p + 1)
    w[:p] = np.asarray(weights, dtype=float).ravel()[:p]
    if len(np.ravel(weights)) != p:
        raise ParameterError(f"expected {p} weights")
    return float(_vbar_pair(w, p, float(mbar), *u.params)[0])


def poisson_cutoff(gamma: float, tail: float = TAIL_MASS) -> int:
    """Smallest ``p`` with ``P(Poisson(gamma) > p) < tail``."""
    p = 0
    while poisson.sf(p, gamma) >= tail:
        p += 1
    return p


@dataclass(frozen=True)
class GEstimate:
    G: float
    std_error: float
    truncation_error: float
    p_max: int

    @property
    def error(self) -> float:
        return self.std_error + self.truncation_error


def estimate_G(
    gamma: float,
    alpha: float,
    u: BoundedPotential,
    pop: PopulationMeasure,
    n_mc: int,
    p_max: int | None = None,
    seed: int = 0,
    *,
    stream_index: int = 0,
    min_draws: int = 16,
) -> GEstimate:
    """Monte Carlo estimate of ``G(gamma)`` with a delta-method standard error.

    ``E[Vbar_{p+1} / Vbar_p]`` is estimated for each ``p <= p_max`` from
    Gaussian vectors whose first ``p`` entries are shared by numerator and
    denominator. Term ``p`` gets ``max(min_draws, n_mc * w_p / max_q w_q)``
    draws, ``w_p`` being its Poisson weight. The kept weights are renormalised;
    the mass beyond ``p_max`` is bounded through ``e^{-2U} <= ratio <= e^{2U}``
    and reported separately.
    """
    if gamma < 0:
        raise ParameterError("gamma must be >= 0")
    if p_max is None:
        p_max = poisson_cutoff(gamma)
    if p_max + 1 > MAX_VBAR_SPINS:
        raise CapacityError(f"p_max={p_max} needs {p_max + 1} spins, cap is {MAX_VBAR_SPINS}")
    mbar = pop.mean()
    U = u.sup_norm
    lo, hi = math.exp(-2.0 * U), math.exp(2.0 * U)
    weights = poisson.pmf(np.arange(p_max + 1), gamma)
    w_max = weights.max()
    total = 0.0
    var = 0.0
    for p in range(p_max + 1):
        w = weights[p]
        if w == 0.0:
            continue
        n = max(min_draws, int(math.ceil(n_mc * w / w_max)))
        rng = substream(seed, "G", stream_index, p)
        G = rng.standard_normal((n, p + 1))
        ratios = np.empty(n)
        _ratio_batch(G, p, mbar, *u.params, ratios)
        if np.any(ratios < lo * (1 - 1e-12)) or np.any(ratios > hi * (1 + 1e-12)):
            raise NumericalError("Vbar ratio outside [e^{-2U}, e^{2U}]")
        total += w * ratios.mean()
        var += w**2 * ratios.var(ddof=1) / n
    if not total > 0.0:
        raise NumericalError("non-positive Poisson mixture of Vbar ratios")
    # renormalise the truncated weights; the dropped terms then move the
    # mixture by at most tail * (hi - lo)
    kept = float(weights.sum())
    total /= kept
    var /= kept**2
    tail = max(0.0, 1.0 - kept)
    return GEstimate(
        G=alpha * math.log(total),
        std_error=alpha * math.sqrt(var) / total,
        truncation_error=alpha * (hi - lo) * tail / total,
        p_max=p_max,
    )


# --- quadrature --------------------------------------------------------------

def cumulative_simpson_weights(x: np.ndarray) -> np.ndarray:
    """Matrix ``C`` with ``(C @ y)[j] ~ integral of y from x[0] to x[j]`` on a uniform grid.

    Even nodes use composite Simpson; an odd node adds the three-point
    single-interval rule ``h/12 (5 y0 + 8 y1 - y2)`` to the preceding even node.
    """
    n = x.size
    if n < 3 or n % 2 == 0:
        raise ParameterError("Simpson quadrature needs an odd number of nodes >= 3")
    h = (x[-1] - x[0]) / (n - 1)
    if not np.allclose(np.diff(x), h, rtol=1e-9, atol=1e-15):
        raise ParameterError("grid must be uniform")
    C = np.zeros((n, n))
    for j in range(2, n, 2):
        C[j] = C[j - 2]
        C[j, j - 2:j + 1] += h / 3.0 * np.array([1.0, 4.0, 1.0])
    for j in range(1, n, 2):
        C[j] = C[j - 1]
        C[j, j - 1:j + 2] += h / 12.0 * np.array([5.0, 8.0, -1.0])
    return C


@dataclass(frozen=True)
class RSCurve:
    gamma_grid: np.ndarray
    G_values: np.ndarray
    F_values: np.ndarray
    F_errors: np.ndarray
    F0: float
    quadrature_delta: float
    coarse: bool

    def F_at(self, gamma: float) -> tuple[float, float]:
        """``(F, error)`` at ``gamma``; off-grid values use a cubic spline."""
        grid = self.gamma_grid
        if not grid[0] - 1e-12 <= gamma <= grid[-1] + 1e-12:
            raise ParameterError(f"gamma={gamma} outside the curve grid")
        hit = np.nonzero(np.isclose(grid, gamma, rtol=0, atol=1e-12))[0]
        if hit.size:
            j = int(hit[0])
            return float(self.F_values[j]), float(self.F_errors[j])
        F = float(CubicSpline(grid, self.F_values)(gamma))
        return F, float(np.interp(gamma, grid, self.F_errors))


def build_rs_curve(
    alpha: float,
    u: BoundedPotential,
    gamma_max: float = 2.0,
    n_grid: int = 17,
    pop_size: int = 100_000,
    n_mc: int = 20_000,
    seed: int = 0,
    *,
    quad_tol: float = 1e-4,
    fp_tol: float = 1e-3,
    workers: int = 1,
) -> RSCurve:
    """Solve the fixed point and estimate ``G`` on a uniform grid, then integrate."""
    grid = np.linspace(0.0, gamma_max, n_grid)
    if check_conditions(alpha, gamma_max, u).contraction_ok is False:
        warnings.warn(f"contraction condition fails at gamma={gamma_max}", stacklevel=2)
    G = np.empty((n_grid, 2))
    for j, gamma in enumerate(grid):
        pop, _ = solve_fixed_point(alpha, gamma, u, pop_size, fp_tol, seed=seed + j,
                                   workers=workers)
        est = estimate_G(gamma, alpha, u, pop, n_mc, seed=seed, stream_index=j)
        G[j] = est.G, est.error
    C = cumulative_simpson_weights(grid)
    F0 = LOG2 + alpha * float(u(0.0))
    F = F0 + C @ G[:, 0]
    F_err = np.sqrt((C**2) @ (G[:, 1] ** 2))

    delta = float("nan")
    coarse = False
    if (n_grid - 1) % 4 == 0:
        half = cumulative_simpson_weights(grid[::2]) @ G[::2, 0]
        delta = abs(float(half[-1]) - float(F[-1] - F0))
        coarse = delta > quad_tol
    return RSCurve(grid, G, F, F_err, F0, delta, coarse)


# --- comparisons with exact enumeration -----------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    N: int
    pN_mean: float
    pN_stderr: float
    F_value: float
    F_error: float
    abs_diff: float

    @property
    def combined_error(self) -> float:
        return math.hypot(self.pN_stderr, self.F_error)


@dataclass(frozen=True)
class ComparisonReport:
    rows: list
    fitted_decay: float
    fitted_intercept: float


def compare_pN_vs_F(
    alpha: float,
    u: BoundedPotential,
    gamma: float,
    N_list,
    n_disorder: int,
    curve: RSCurve,
    seed: int,
    *,
    m_rounding: str = "nearest",
    chunk_size: int = 8192,
    workers: int = 1,
) -> ComparisonReport:
    """Exact disorder-averaged ``p_N`` against ``F(gamma)`` for each ``N``.

    ``fitted_decay`` is the least-squares slope of ``|p_N - F|`` against ``1/N``.
    """
    F, F_err = curve.F_at(gamma)
    rows = []
    for N in N_list:
        params = ModelParams(int(N), alpha, gamma, m_rounding=m_rounding)
        data = disorder_samples(params, u, n_disorder, seed, chunk_size=chunk_size,
                                workers=workers)
        st = summarize("pN", data["pN"])
        rows.append(ComparisonRow(int(N), st.mean, st.std_error, F, F_err, abs(st.mean - F)))
    slope, intercept = float("nan"), float("nan")
    if len(rows) >= 2:
        inv = np.array([1.0 / r.N for r in rows])
        diffs = np.array([r.abs_diff for r in rows])
        slope, intercept = (float(v) for v in np.polyfit(inv, diffs, 1))
    return ComparisonReport(rows, slope, intercept)


@dataclass(frozen=True)
class MagnetizationLaw:
    joint_w1: float
    marginal_w1: float
    magnetizations: np.ndarray


def magnetization_law_test(
    alpha: float,
    u: BoundedPotential,
    gamma: float,
    N: int,
    m: int,
    n_disorder: int,
    pop: PopulationMeasure,
    seed: int,
    *,
    m_rounding: str = "nearest",
    pool_all_sites: bool = False,
    workers: int = 1,
) -> MagnetizationLaw:
    """Distance between the disorder law of ``(<s_1>, ..., <s_m>)`` and ``pop^{(x) m}``.

    ``joint_w1`` compares against ``n_disorder`` i.i.d. ``m``-vectors drawn from
    ``pop``; ``marginal_w1`` compares the pooled single-site magnetizations
    (sites ``1..m``, or all ``N`` sites with ``pool_all_sites``) with ``pop``.
    """
    if m < 1 or m > N:
        raise ParameterError(f"need 1 <= m <= N, got m={m}")
    params = ModelParams(N, alpha, gamma, m_rounding=m_rounding)
    n_sites = N if pool_all_sites else max(m, 2)
    data = disorder_samples(params, u, n_disorder, seed, m=min(max(n_sites, 2), N),
                            workers=workers)
    mags = data["magnetization"]
    rng = substream(seed, "law-draws", N, m)
    draws = pop.values[rng.integers(0, pop.size, size=(n_disorder, m))]
    joint = w1_joint(mags[:, :m], draws)
    pooled = mags if pool_all_sites else mags[:, :m]
    marginal = w1_cdf(pooled.ravel(), pop.values)
    return MagnetizationLaw(joint, marginal, mags[:, :m])
