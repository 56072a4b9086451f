"""Exact Gibbs averages by enumeration, and disorder averages over instances.

Enumeration walks the configurations in Gray-code order, so each step flips
one spin and only the constraints containing that spin change argument.
Spins that appear in no constraint decouple exactly: each contributes
``log 2`` to ``log Z`` and has zero magnetization, so the walk only visits
the sites that carry couplings. The result is identical to a sum over all
``2^N`` configurations.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import CapacityError, ParameterError
from .model import BoundedPotential, Instance, ModelParams, sample_dense, u_eval
from .streams import substream

MAX_SPINS = 24
MAX_CAVITY_SPINS = 20
LOG2 = math.log(2.0)
_RESYNC = 4096

STATISTICS = ("pN", "decorrelation", "pair_decorrelation", "magnetization")


@njit(cache=True, nogil=True)
def _enumerate_dense(W, eta, kind, a, b, pairs, all_pairs):
    M, N = W.shape
    active = np.zeros(N, np.bool_)
    for k in range(M):
        for i in range(N):
            if W[k, i] != 0.0:
                active[i] = True
    act = np.nonzero(active)[0]
    n = act.shape[0]
    local = -np.ones(N, np.int64)
    for j in range(n):
        local[act[j]] = j

    # constraints touching each active site
    adj_ptr = np.zeros(n + 1, np.int64)
    for j in range(n):
        c = 0
        for k in range(M):
            if W[k, act[j]] != 0.0:
                c += 1
        adj_ptr[j + 1] = adj_ptr[j] + c
    adj_k = np.empty(adj_ptr[n], np.int64)
    adj_w = np.empty(adj_ptr[n])
    for j in range(n):
        e = adj_ptr[j]
        for k in range(M):
            if W[k, act[j]] != 0.0:
                adj_k[e] = k
                adj_w[e] = W[k, act[j]]
                e += 1

    sigma = np.ones(n)
    args = np.zeros(M)
    uvals = np.empty(M)
    energy = 0.0
    for k in range(M):
        for j in range(n):
            args[k] += W[k, act[j]]
        uvals[k] = u_eval(kind, a, b, args[k])
        energy += eta[k] * uvals[k]

    P = pairs.shape[0]
    shift = energy
    Z = 0.0
    msum = np.zeros(n)
    psum = np.zeros(P)
    nm = n if all_pairs else 0
    csum = np.zeros((nm, nm))
    total = 1 << n
    for t in range(total):
        if t > 0:
            j = 0
            while (t >> j) & 1 == 0:
                j += 1
            sigma[j] = -sigma[j]
            s = sigma[j]
            for e in range(adj_ptr[j], adj_ptr[j + 1]):
                k = adj_k[e]
                args[k] += 2.0 * s * adj_w[e]
                nu = u_eval(kind, a, b, args[k])
                energy += eta[k] * (nu - uvals[k])
                uvals[k] = nu
            if t % _RESYNC == 0:
                # drop accumulated rounding in the incremental updates
                energy = 0.0
                for k in range(M):
                    acc = 0.0
                    for jj in range(n):
                        acc += W[k, act[jj]] * sigma[jj]
                    args[k] = acc
                    uvals[k] = u_eval(kind, a, b, acc)
                    energy += eta[k] * uvals[k]
        if energy > shift:
            r = math.exp(shift - energy)
            Z *= r
            for jj in range(n):
                msum[jj] *= r
            for p in range(P):
                psum[p] *= r
            for i0 in range(nm):
                for i1 in range(i0 + 1, nm):
                    csum[i0, i1] *= r
            shift = energy
        w = math.exp(energy - shift)
        Z += w
        for jj in range(n):
            msum[jj] += w * sigma[jj]
        for p in range(P):
            li = local[pairs[p, 0]]
            lj = local[pairs[p, 1]]
            if li >= 0 and lj >= 0:
                psum[p] += w * sigma[li] * sigma[lj]
        for i0 in range(nm):
            wi = w * sigma[i0]
            for i1 in range(i0 + 1, nm):
                csum[i0, i1] += wi * sigma[i1]

    # Z / 2^n is an exact rescaling, which keeps log Z exact when u is constant
    log_z = shift + math.log(Z / total) + N * math.log(2.0)
    mags = np.zeros(N)
    for j in range(n):
        mags[act[j]] = msum[j] / Z
    corr = np.zeros(P)
    for p in range(P):
        i0 = pairs[p, 0]
        i1 = pairs[p, 1]
        if i0 == i1:
            corr[p] = 1.0
        elif local[i0] >= 0 and local[i1] >= 0:
            corr[p] = psum[p] / Z
    # pairs with an isolated spin are exactly uncorrelated
    abs_connected = 0.0
    for i0 in range(nm):
        for i1 in range(i0 + 1, nm):
            abs_connected += abs(csum[i0, i1] / Z - mags[act[i0]] * mags[act[i1]])
    return log_z, mags, corr, abs_connected


@njit(cache=True, nogil=True)
def _batch_statistics(W, n_constraints, eta, kind, a, b, m, all_pairs,
                      log_z, mags, decor, pair_decor):
    pairs = np.zeros((1, 2), np.int64)
    pairs[0, 1] = 1
    for s in range(W.shape[0]):
        Mb = n_constraints[s]
        lz, mg, pc, ac = _enumerate_dense(W[s, :Mb], eta[:Mb], kind, a, b, pairs, all_pairs)
        log_z[s] = lz
        n_pairs = W.shape[2] * (W.shape[2] - 1) / 2.0
        pair_decor[s] = ac / n_pairs if n_pairs > 0 else 0.0
        for i in range(m):
            mags[s, i] = mg[i]
        decor[s] = abs(pc[0] - mg[0] * mg[1])


@dataclass(frozen=True)
class GibbsSummary:
    log_Z: float
    magnetizations: np.ndarray
    pair_correlations: dict

    def connected(self, i: int, j: int) -> float:
        """``<s_i s_j> - <s_i><s_j>`` for a requested pair."""
        return self.pair_correlations[(i, j)] - self.magnetizations[i] * self.magnetizations[j]


def _check_capacity(N: int, cap: int = MAX_SPINS):
    if N > cap:
        raise CapacityError(
            f"exact enumeration is capped at N <= {cap} (got N={N}); "
            "larger systems need a Monte Carlo sampler"
        )


def enumerate_gibbs(instance: Instance, u: BoundedPotential, want_pairs=()) -> GibbsSummary:
    """Exact ``log Z`` with magnetizations; pair averages ``<s_i s_j>`` on request.

    Site indices are 0-based.
    """
    _check_capacity(instance.N)
    pairs = np.asarray(list(want_pairs), dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= instance.N):
        raise ParameterError("pair index out of range")
    W = instance.dense_weights()
    eta = instance.eta.astype(np.float64)
    log_z, mags, corr, _ = _enumerate_dense(W, eta, *u.params, pairs, False)
    pc = {(int(i), int(j)): float(c) for (i, j), c in zip(pairs, corr)}
    return GibbsSummary(float(log_z), mags, pc)


# --- cavity decomposition ---------------------------------------------------

def _spin_table(n: int, start: int, stop: int) -> np.ndarray:
    """Rows ``start..stop`` of the ``2^n`` configurations, bit j -> spin j."""
    idx = np.arange(start, stop, dtype=np.int64)[:, None]
    bits = (idx >> np.arange(n, dtype=np.int64)[None, :]) & 1
    return (2 * bits - 1).astype(np.float64)


def _monomial_values(f, sigma):
    out = np.zeros(sigma.shape[0])
    for coef, sites in f:
        term = np.full(sigma.shape[0], float(coef))
        for i in sites:
            term = term * sigma[:, i]
        out += term
    return out


def _chunks(n: int, size: int = 1 << 16):
    total = 1 << n
    for start in range(0, total, size):
        yield start, min(total, start + size)


def cavity_check(instance: Instance, u: BoundedPotential, f) -> tuple[float, float]:
    """Both sides of the cavity decomposition for the last spin.

    ``f`` is a polynomial in the spins given as ``[(coef, (i, j, ...)), ...]``
    with 0-based sites; ``[(1.0, ())]`` is the constant 1. Returns
    ``(<f>, <Av f xi>_- / <Av xi>_-)`` where ``<.>_-`` is the Gibbs average of
    the reduced ``N - 1`` spin system (constraints touching the last spin
    removed) and ``Av`` averages the last spin over ``+-1``.
    """
    N = instance.N
    _check_capacity(N, MAX_CAVITY_SPINS)
    for _, sites in f:
        if any(not 0 <= i < N for i in sites):
            raise ParameterError("monomial site out of range")
    W = instance.dense_weights()
    eta = instance.eta.astype(float)
    bound = float(np.sum(eta)) * u.sup_norm

    # left side: the full N-spin measure
    num = den = 0.0
    for start, stop in _chunks(N):
        sigma = _spin_table(N, start, stop)
        weight = np.exp(u(sigma @ W.T) @ eta - bound)
        num += float(np.dot(weight, _monomial_values(f, sigma)))
        den += float(weight.sum())
    lhs = num / den

    # right side: reduced Hamiltonian on the first N-1 spins plus xi
    touches = instance.active_mask()[:, N - 1]
    eta_minus = eta * (~touches)
    eta_last = eta * touches
    W_rho = W[:, : N - 1]
    g_last = W[:, N - 1]
    num = den = 0.0
    for start, stop in _chunks(N - 1):
        rho = _spin_table(N - 1, start, stop)
        base = rho @ W_rho.T
        gibbs_minus = np.exp(u(base) @ eta_minus - bound)
        av_f_xi = np.zeros(rho.shape[0])
        av_xi = np.zeros(rho.shape[0])
        for s_last in (1.0, -1.0):
            xi = np.exp(u(base + s_last * g_last) @ eta_last)
            sigma = np.hstack([rho, np.full((rho.shape[0], 1), s_last)])
            av_f_xi += 0.5 * _monomial_values(f, sigma) * xi
            av_xi += 0.5 * xi
        num += float(np.dot(gibbs_minus, av_f_xi))
        den += float(np.dot(gibbs_minus, av_xi))
    rhs = num / den
    return lhs, rhs


# --- disorder averages --------------------------------------------------------

@dataclass(frozen=True)
class DisorderStatistic:
    name: str
    mean: float | np.ndarray
    std_error: float | np.ndarray
    n_samples: int
    values: np.ndarray

    def as_dict(self) -> dict:
        def plain(x):
            return x.tolist() if isinstance(x, np.ndarray) else float(x)

        return {
            "statistic": self.name,
            "mean": plain(self.mean),
            "std_error": plain(self.std_error),
            "n_samples": self.n_samples,
        }


def _chunk_statistics(params, u, seed, chunk, size, m, all_pairs):
    rng = substream(seed, "disorder", params.N, chunk)
    W, _, n_constraints = sample_dense(params, rng, size)
    eta = params.eta_array().astype(np.float64)
    log_z = np.empty(size)
    mags = np.empty((size, m))
    decor = np.empty(size)
    pair_decor = np.zeros(size)
    _batch_statistics(W, n_constraints, eta, *u.params, m, all_pairs,
                      log_z, mags, decor, pair_decor)
    return log_z, mags, decor, pair_decor


def disorder_samples(
    params: ModelParams,
    u: BoundedPotential,
    n_samples: int,
    seed: int,
    *,
    m: int = 2,
    all_pairs: bool = False,
    chunk_size: int = 512,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Per-instance statistics: ``pN``, ``decorrelation``, first-``m`` magnetizations.

    With ``all_pairs`` the result also holds ``pair_decorrelation``, the
    mean of ``|<s_i s_j> - <s_i><s_j>|`` over all ``i < j``. Sites are
    exchangeable under the disorder, so its expectation equals that of
    ``decorrelation`` while its variance is much smaller.

    Sample ``s`` lives in chunk ``s // chunk_size``, whose draws come from the
    substream ``(seed, "disorder", N, chunk)``; the output depends on the
    chunk size but not on the worker count.
    """
    _check_capacity(params.N)
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    m = max(int(m), 2)
    if m > params.N:
        raise ParameterError(f"m={m} exceeds N={params.N}")
    n_chunks = -(-n_samples // chunk_size)
    sizes = [min(chunk_size, n_samples - c * chunk_size) for c in range(n_chunks)]

    def job(c):
        return _chunk_statistics(params, u, seed, c, sizes[c], m, all_pairs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(n_chunks)))
    else:
        parts = [job(c) for c in range(n_chunks)]
    log_z = np.concatenate([p[0] for p in parts])
    out = {
        "pN": log_z / params.N,
        "decorrelation": np.concatenate([p[2] for p in parts]),
        "magnetization": np.concatenate([p[1] for p in parts]),
    }
    if all_pairs:
        out["pair_decorrelation"] = np.concatenate([p[3] for p in parts])
    return out


def summarize(name: str, values: np.ndarray) -> DisorderStatistic:
    n = values.shape[0]
    # centring on the first sample keeps identical samples at zero spread
    centred = values - values[0]
    mean = values[0] + centred.mean(axis=0)
    if n > 1:
        se = centred.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        se = np.zeros_like(mean) if np.ndim(mean) else 0.0
    if np.ndim(mean) == 0:
        mean, se = float(mean), float(se)
    return DisorderStatistic(name, mean, se, n, values)


def disorder_average(
    params: ModelParams,
    u: BoundedPotential,
    statistic: str,
    n_samples: int,
    seed: int,
    *,
    m: int = 1,
    chunk_size: int = 512,
    workers: int = 1,
) -> DisorderStatistic:
    """Sample mean and standard error of a per-instance statistic.

    ``statistic`` is ``"pN"`` (``log Z / N``), ``"decorrelation"``
    (``|<s_1 s_2> - <s_1><s_2>|``), ``"pair_decorrelation"`` (the same
    quantity averaged over all site pairs of each instance) or
    ``"magnetization"`` (the vector of the first ``m`` magnetizations).
    """
    if statistic not in STATISTICS:
        raise ParameterError(f"unknown statistic {statistic!r}; choose from {STATISTICS}")
    if n_samples < 2:
        raise ParameterError("n_samples must be >= 2 for a standard error")
    data = disorder_samples(params, u, n_samples, seed, m=max(m, 2),
                            all_pairs=statistic == "pair_decorrelation",
                            chunk_size=chunk_size, workers=workers)
    values = data[statistic]
    if statistic == "magnetization":
        values = values[:, :m]
    return summarize(statistic, values)
