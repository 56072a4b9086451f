"""Population dynamics for the cavity map on probability measures over [-1, 1].

A measure is represented by a pool of samples. One application of the map
draws, for every output slot, a random tree shape (``theta`` constraints
around the cavity spin, ``tau_k`` further spins in constraint ``k``) with
Gaussian weights, picks the ``t = sum tau_k`` incoming magnetizations
uniformly from the pool and returns the exact cavity ratio

    <Av eps xi>_x / <Av xi>_x,   xi = exp sum_k u(sum_i g_{i,k} s_i + g_k eps),

summed over ``eps = +-1`` and over spins ``s`` under the product measure with
means ``x``.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import CapacityError, NumericalError, ParameterError
from .model import BoundedPotential, check_conditions, contraction_factor, u_eval
from .streams import as_generator, substream
from .transport import w1_sorted

MAX_TREE_SPINS = 24
DEFAULT_CHUNK = 16384
_MAGIC = b"DPPOP001"


@dataclass(frozen=True)
class TreeSample:
    theta: int
    tau: np.ndarray
    spin_weights: list
    cavity_weights: np.ndarray

    @property
    def total_spins(self) -> int:
        return int(np.sum(self.tau))


@dataclass(frozen=True, eq=False)
class PopulationMeasure:
    values: np.ndarray
    alpha: float = float("nan")
    gamma: float = float("nan")
    potential: str = ""
    seed: int | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size < 1:
            raise ParameterError("a population needs at least one value")
        if not np.all(np.abs(v) <= 1.0):
            raise ParameterError("population values must lie in [-1, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(np.mean(self.values))

    def save(self, path):
        """Binary form: magic, header length, JSON header, little-endian doubles."""
        header = json.dumps({
            "S": self.size,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "potential": self.potential,
            "seed": self.seed,
        }, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PopulationMeasure":
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise ParameterError(f"{path} is not a population file")
            (n,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(n).decode("utf-8"))
            values = np.frombuffer(fh.read(), dtype="<f8")
        if values.size != header["S"]:
            raise ParameterError(f"{path}: expected {header['S']} values, found {values.size}")
        return cls(values.astype(np.float64), header["alpha"], header["gamma"],
                   header["potential"], header["seed"])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("value\n")
            for v in self.values:
                fh.write(f"{float(v)!r}\n")


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    final_step_w1: float
    trajectory: list = field(default_factory=list)
    converged: bool = False
    plateau: bool = False
    conditions_ok: bool = True


# --- tree sampling -----------------------------------------------------------

def mixture_weight(alpha: float, gamma: float, tau) -> float:
    """Probability of the tree shape ``(theta = len(tau), tau)``."""
    tau = [int(t) for t in tau]
    theta = len(tau)
    lam = alpha * gamma
    w = math.exp(-lam) * lam**theta / math.factorial(theta)
    w *= math.exp(-theta * gamma) * gamma ** sum(tau)
    for t in tau:
        w /= math.factorial(t)
    return w


def _draw_trees(alpha, gamma, rng, n):
    theta = rng.poisson(alpha * gamma, size=n)
    tau = rng.poisson(gamma, size=int(theta.sum()))
    spin_w = rng.standard_normal(int(tau.sum()))
    cav_w = rng.standard_normal(tau.size)
    return theta, tau, spin_w, cav_w


def _tree_totals(theta, tau):
    ends = np.cumsum(theta)
    csum = np.concatenate([[0], np.cumsum(tau)])
    return csum[ends] - csum[ends - theta]


def sample_trees(alpha: float, gamma: float, rng, n: int):
    """``n`` tree shapes and weights in flat form.

    Returns ``(theta, tau, spin_weights, cavity_weights, totals)``. Trees with
    more than ``MAX_TREE_SPINS`` spins are redrawn from the same generator;
    their probability is negligible in the contractive regime.
    """
    if alpha * gamma < 0:
        raise ParameterError("alpha * gamma must be >= 0")
    rng = as_generator(rng)
    theta, tau, spin_w, cav_w = _draw_trees(alpha, gamma, rng, n)
    totals = _tree_totals(theta, tau)
    bad = np.nonzero(totals > MAX_TREE_SPINS)[0]
    if bad.size == 0:
        return theta, tau, spin_w, cav_w, totals

    trees = _split_trees(theta, tau, spin_w, cav_w)
    for i in bad:
        while True:
            th, ta, sw, cw = _draw_trees(alpha, gamma, rng, 1)
            if ta.sum() <= MAX_TREE_SPINS:
                break
        trees[i] = (int(th[0]), ta, sw, cw)
    theta = np.array([t[0] for t in trees], dtype=np.int64)
    tau = np.concatenate([t[1] for t in trees]).astype(np.int64)
    spin_w = np.concatenate([t[2] for t in trees])
    cav_w = np.concatenate([t[3] for t in trees])
    return theta, tau, spin_w, cav_w, _tree_totals(theta, tau)


def _split_trees(theta, tau, spin_w, cav_w):
    out = []
    ti = si = 0
    for th in theta:
        ta = tau[ti:ti + th]
        t = int(ta.sum())
        out.append((int(th), ta, spin_w[si:si + t], cav_w[ti:ti + th]))
        ti += th
        si += t
    return out


def sample_tree(alpha: float, gamma: float, rng) -> TreeSample:
    """One draw: ``theta ~ Poisson(alpha gamma)``, ``tau_k ~ Poisson(gamma)``."""
    theta, tau, spin_w, cav_w, _ = sample_trees(alpha, gamma, rng, 1)
    rows = np.split(spin_w, np.cumsum(tau)[:-1]) if tau.size else []
    return TreeSample(int(theta[0]), tau, rows, cav_w)


# --- cavity ratio --------------------------------------------------------------

@njit(cache=True, nogil=True)
def _cavity_batch(theta, tau, spin_w, cav_w, x, kind, a, b, sup, out):
    ti = 0
    si = 0
    for s in range(theta.shape[0]):
        th = theta[s]
        if th == 0:
            out[s] = 0.0
            continue
        t = 0
        for k in range(th):
            t += tau[ti + k]
        shift = th * sup
        num = 0.0
        den = 0.0
        for c in range(1 << t):
            w = 1.0
            for i in range(t):
                if (c >> i) & 1:
                    w *= 0.5 * (1.0 + x[si + i])
                else:
                    w *= 0.5 * (1.0 - x[si + i])
            if w == 0.0:
                continue
            lp = 0.0
            lm = 0.0
            pos = 0
            for k in range(th):
                arg = 0.0
                for i in range(tau[ti + k]):
                    if (c >> pos) & 1:
                        arg += spin_w[si + pos]
                    else:
                        arg -= spin_w[si + pos]
                    pos += 1
                gk = cav_w[ti + k]
                lp += u_eval(kind, a, b, arg + gk)
                lm += u_eval(kind, a, b, arg - gk)
            ep = math.exp(lp - shift)
            em = math.exp(lm - shift)
            num += w * (ep - em)
            den += w * (ep + em)
        r = num / den
        out[s] = min(1.0, max(-1.0, r))
        ti += th
        si += t


def cavity_ratios(theta, tau, spin_w, cav_w, x, u: BoundedPotential) -> np.ndarray:
    """Vectorised cavity ratio over flat tree arrays; ``x`` is flat like ``spin_w``."""
    theta = np.ascontiguousarray(theta, dtype=np.int64)
    tau = np.ascontiguousarray(tau, dtype=np.int64)
    out = np.empty(theta.size)
    _cavity_batch(theta, tau, np.ascontiguousarray(spin_w, dtype=float),
                  np.ascontiguousarray(cav_w, dtype=float),
                  np.ascontiguousarray(x, dtype=float), *u.params, u.sup_norm, out)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite cavity ratio")
    return out


def cavity_ratio(tree: TreeSample, u: BoundedPotential, x) -> float:
    """Cavity ratio for one tree; ``x`` holds the ``t`` incoming magnetizations."""
    x = np.asarray(x, dtype=float).ravel()
    t = tree.total_spins
    if x.size != t:
        raise ParameterError(f"x has {x.size} entries, tree has {t} spins")
    if t > MAX_TREE_SPINS:
        raise CapacityError(f"tree has {t} spins, cap is {MAX_TREE_SPINS}")
    if np.any(np.abs(x) > 1.0):
        raise ParameterError("x must lie in [-1, 1]")
    spin_w = np.concatenate([np.asarray(r, float) for r in tree.spin_weights]) if t else np.empty(0)
    return float(cavity_ratios([tree.theta], tree.tau, spin_w, tree.cavity_weights, x, u)[0])


# --- the map and its fixed point ------------------------------------------------

def _apply_chunk(values, alpha, gamma, u, size, rng):
    theta, tau, spin_w, cav_w, totals = sample_trees(alpha, gamma, rng, size)
    idx = rng.integers(0, values.size, size=spin_w.size)
    return cavity_ratios(theta, tau, spin_w, cav_w, values[idx], u)


def apply_T(
    pop: PopulationMeasure,
    alpha: float,
    gamma: float,
    u: BoundedPotential,
    n_out: int,
    seed: int,
    *,
    iteration: int = 0,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> PopulationMeasure:
    """One synchronous population update of size ``n_out``.

    Chunk ``c`` draws from the substream ``(seed, "apply_T", iteration, c)``,
    so the result is fixed by the chunk size whatever the worker count.
    """
    if n_out < 1:
        raise ParameterError("n_out must be >= 1")
    values = pop.values
    n_chunks = -(-n_out // chunk_size)

    def job(c):
        size = min(chunk_size, n_out - c * chunk_size)
        rng = substream(seed, "apply_T", iteration, c)
        return _apply_chunk(values, alpha, gamma, u, size, rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(n_chunks)))
    else:
        parts = [job(c) for c in range(n_chunks)]
    return PopulationMeasure(np.concatenate(parts), alpha, gamma, u.descriptor, seed)


def _plateaued(deltas, window=3, spread=0.1) -> bool:
    if len(deltas) < window:
        return False
    tail = deltas[-window:]
    lo, hi = min(tail), max(tail)
    return hi <= (1.0 + spread) * lo


def solve_fixed_point(
    alpha: float,
    gamma: float,
    u: BoundedPotential,
    S: int = 100_000,
    tol: float = 1e-3,
    max_iter: int = 200,
    seed: int = 0,
    *,
    init=None,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> tuple[PopulationMeasure, ConvergenceReport]:
    """Iterate the population map from all zeros (or ``init``).

    Stops when successive populations are closer than ``tol`` in W1, when the
    last three steps agree within 10% (the Monte Carlo floor), or after
    ``max_iter`` steps. Outside the contraction regime a warning is issued
    and the run proceeds.
    """
    report = check_conditions(alpha, gamma, u) if 0 < alpha < 1 else None
    conditions_ok = bool(report is None or report.contraction_ok)
    if not conditions_ok:
        warnings.warn(
            f"contraction factor {report.contraction_factor:.3g} >= 1/2; "
            "uniqueness of the fixed point is not guaranteed",
            stacklevel=2,
        )
    if init is None:
        values = np.zeros(S)
    else:
        values = np.broadcast_to(np.asarray(init, dtype=float), (S,))
    pop = PopulationMeasure(values, alpha, gamma, u.descriptor, seed)
    deltas = []
    converged = plateau = False
    for it in range(max_iter):
        new = apply_T(pop, alpha, gamma, u, S, seed, iteration=it,
                      chunk_size=chunk_size, workers=workers)
        deltas.append(w1_sorted(pop.values, new.values))
        pop = new
        if deltas[-1] < tol:
            converged = True
            break
        if _plateaued(deltas):
            plateau = True
            break
    return pop, ConvergenceReport(
        iterations=len(deltas),
        final_step_w1=deltas[-1],
        trajectory=deltas,
        converged=converged,
        plateau=plateau,
        conditions_ok=conditions_ok,
    )


@dataclass(frozen=True)
class ContractionResult:
    coupled_w1_image: float
    bound: float
    std_error: float


def contraction_test(
    pop1: PopulationMeasure,
    pop2: PopulationMeasure,
    alpha: float,
    gamma: float,
    u: BoundedPotential,
    n: int,
    rng,
) -> ContractionResult:
    """Coupled estimate of ``W1(T pop1, T pop2)`` against the contraction bound.

    Both populations are sorted and indexed together (the optimal 1-D
    coupling); shared trees and shared indices then couple the two images,
    so the mean absolute difference upper-bounds their W1 distance.
    """
    if pop1.size != pop2.size:
        raise ParameterError("populations must have equal size")
    rng = as_generator(rng)
    x1 = np.sort(pop1.values)
    x2 = np.sort(pop2.values)
    theta, tau, spin_w, cav_w, _ = sample_trees(alpha, gamma, rng, n)
    idx = rng.integers(0, x1.size, size=spin_w.size)
    r1 = cavity_ratios(theta, tau, spin_w, cav_w, x1[idx], u)
    r2 = cavity_ratios(theta, tau, spin_w, cav_w, x2[idx], u)
    diff = np.abs(r1 - r2)
    se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    bound = contraction_factor(alpha, gamma, u.sup_norm) * w1_sorted(x1, x2)
    return ContractionResult(float(diff.mean()), bound, se)


def continuity_bound(alpha: float, gamma: float, alpha2: float, gamma2: float) -> float:
    """Upper bound on the W1 distance between fixed points at two parameter pairs."""
    dg = abs(gamma - gamma2)
    dl = abs(alpha * gamma - alpha2 * gamma2)
    return 4.0 * (dg * alpha2 * gamma2 * math.exp(dg) + dl * math.exp(dl))
