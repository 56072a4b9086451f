"""Diluted perceptron model: potentials and parameters, plus disorder instances.

The Hamiltonian of a configuration ``sigma`` in ``{-1, 1}^N`` is

    -H(sigma) = sum_k eta_k * u( sum_i g_{i,k} gamma_{i,k} sigma_i )

where ``gamma_{i,k}`` are Bernoulli(gamma / N) masks and ``g_{i,k}`` standard
Gaussians. An :class:`Instance` stores only the active couplings.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ParameterError
from .streams import as_generator

# kind codes shared with the compiled kernels
ZERO, CONSTANT, SCALED_TANH, GAUSSIAN_BUMP, SMOOTH_STEP = 0, 1, 2, 3, 4

_KIND_NAMES = {
    "zero": ZERO,
    "const": CONSTANT,
    "tanh": SCALED_TANH,
    "bump": GAUSSIAN_BUMP,
    "step": SMOOTH_STEP,
}
_N_ARGS = {ZERO: 0, CONSTANT: 1, SCALED_TANH: 2, GAUSSIAN_BUMP: 2, SMOOTH_STEP: 2}


@njit(cache=True, nogil=True)
def u_eval(kind, a, b, x):
    if kind == ZERO:
        return 0.0
    if kind == CONSTANT:
        return a
    if kind == SCALED_TANH:
        return a * math.tanh(b * x)
    if kind == GAUSSIAN_BUMP:
        z = x / b
        return a * math.exp(-z * z)
    z = b * x
    if z >= 0.0:
        return a / (1.0 + math.exp(-z))
    e = math.exp(z)
    return a * e / (1.0 + e)


@dataclass(frozen=True)
class BoundedPotential:
    """A bounded interaction ``u`` from a closed family.

    ``kind`` is one of ``zero``, ``const`` (``u = a``), ``tanh``
    (``u = a tanh(b x)``), ``bump`` (``u = a exp(-x^2 / b^2)``, ``b > 0``) and
    ``step`` (``u = a / (1 + exp(-b x))``).
    """

    kind: str
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_NAMES:
            raise ParameterError(f"unknown potential kind {self.kind!r}")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ParameterError("potential parameters must be finite")
        if self.kind == "bump" and not self.b > 0:
            raise ParameterError("bump width must be positive")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def constant(cls, c):
        return cls("const", float(c))

    @classmethod
    def scaled_tanh(cls, a, b):
        return cls("tanh", float(a), float(b))

    @classmethod
    def gaussian_bump(cls, a, w):
        return cls("bump", float(a), float(w))

    @classmethod
    def smooth_step(cls, a, k):
        return cls("step", float(a), float(k))

    @classmethod
    def parse(cls, descriptor: str) -> "BoundedPotential":
        """Parse ``kind:arg1:arg2``, e.g. ``tanh:0.2:1`` or ``const:0.3``."""
        parts = descriptor.strip().split(":")
        kind = parts[0].lower()
        if kind not in _KIND_NAMES:
            raise ParameterError(f"unknown potential kind {kind!r} in {descriptor!r}")
        n_args = _N_ARGS[_KIND_NAMES[kind]]
        if len(parts) - 1 != n_args:
            raise ParameterError(
                f"potential {kind!r} takes {n_args} argument(s), got {descriptor!r}"
            )
        try:
            args = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParameterError(f"bad potential descriptor {descriptor!r}") from exc
        return cls(kind, *args)

    @property
    def descriptor(self) -> str:
        n_args = _N_ARGS[self.code]
        return ":".join([self.kind] + [repr(v) for v in (self.a, self.b)[:n_args]])

    @property
    def code(self) -> int:
        return _KIND_NAMES[self.kind]

    @property
    def params(self) -> tuple[int, float, float]:
        """``(kind code, a, b)`` as consumed by the compiled kernels."""
        return self.code, float(self.a), float(self.b)

    @property
    def sup_norm(self) -> float:
        code = self.code
        if code == ZERO:
            return 0.0
        if code == CONSTANT:
            return abs(self.a)
        if code == SCALED_TANH:
            return abs(self.a) if self.b != 0.0 else 0.0
        if code == GAUSSIAN_BUMP:
            return abs(self.a)
        # logistic values fill (0, a); at b = 0 it is the constant a / 2
        return abs(self.a) if self.b != 0.0 else abs(self.a) / 2.0

    @property
    def is_even(self) -> bool:
        code = self.code
        return code in (ZERO, CONSTANT, GAUSSIAN_BUMP) or self.b == 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        code = self.code
        if code == ZERO:
            return np.zeros_like(x)
        if code == CONSTANT:
            return np.full_like(x, self.a)
        if code == SCALED_TANH:
            return self.a * np.tanh(self.b * x)
        if code == GAUSSIAN_BUMP:
            return self.a * np.exp(-((x / self.b) ** 2))
        from scipy.special import expit

        return self.a * expit(self.b * x)


def nominal_m(alpha: float, N: int) -> int:
    """``alpha * N`` rounded half-up."""
    return int(math.floor(alpha * N + 0.5))


@dataclass(frozen=True)
class ModelParams:
    """Size and dilution of the model.

    ``m_rounding`` decides how the constraint count is realised when
    ``alpha * N`` is not an integer: ``"nearest"`` fixes ``M`` to the rounded
    value, ``"stochastic"`` draws ``M`` per instance as ``floor(alpha N)`` plus
    a Bernoulli of the fractional part, so that ``E[M] = alpha N`` exactly.
    """

    N: int
    alpha: float
    gamma: float
    eta: tuple[int, ...] | None = None
    m_rounding: str = "nearest"

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ParameterError(f"N must be a positive integer, got {self.N}")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (self.gamma >= 0.0 and math.isfinite(self.gamma)):
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if self.m_rounding not in ("nearest", "stochastic"):
            raise ParameterError(f"unknown m_rounding {self.m_rounding!r}")
        if self.m_rounding == "nearest" and self.M < 1:
            raise ParameterError(
                f"M = round(alpha N) = {self.M} for alpha={self.alpha}, N={self.N}; "
                "need at least one constraint"
            )
        if self.eta is not None:
            if self.m_rounding != "nearest":
                raise ParameterError("a custom eta mask requires m_rounding='nearest'")
            eta = tuple(int(e) for e in self.eta)
            if len(eta) != self.M or any(e not in (0, 1) for e in eta):
                raise ParameterError(f"eta must be {self.M} bits")
            object.__setattr__(self, "eta", eta)

    @property
    def M(self) -> int:
        return nominal_m(self.alpha, self.N)

    @property
    def max_m(self) -> int:
        if self.m_rounding == "nearest":
            return self.M
        return int(math.ceil(self.alpha * self.N))

    def eta_array(self) -> np.ndarray:
        if self.eta is None:
            return np.ones(self.max_m, dtype=np.int8)
        return np.asarray(self.eta, dtype=np.int8)


@dataclass(frozen=True, eq=False)
class Instance:
    """One disorder realisation, stored as CSR rows of active couplings.

    Sites are 0-based internally; the JSON form uses 1-based sites.
    """

    N: int
    alpha: float
    gamma: float
    eta: np.ndarray
    ptr: np.ndarray
    sites: np.ndarray
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.int8)
        ptr = np.asarray(self.ptr, dtype=np.int64)
        sites = np.asarray(self.sites, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if ptr.ndim != 1 or ptr[0] != 0 or ptr[-1] != len(sites) or np.any(np.diff(ptr) < 0):
            raise ParameterError("malformed constraint offsets")
        if len(eta) != len(ptr) - 1 or np.any((eta != 0) & (eta != 1)):
            raise ParameterError("eta must hold one bit per constraint")
        if len(weights) != len(sites) or not np.all(np.isfinite(weights)):
            raise ParameterError("weights must be finite, one per active site")
        if len(sites) and (sites.min() < 0 or sites.max() >= self.N):
            raise ParameterError("site index out of range")
        for k in range(len(ptr) - 1):
            row = sites[ptr[k]:ptr[k + 1]]
            if len(np.unique(row)) != len(row):
                raise ParameterError(f"duplicate site in constraint {k + 1}")
        for name, arr in (("eta", eta), ("ptr", ptr), ("sites", sites), ("weights", weights)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def M(self) -> int:
        return len(self.ptr) - 1

    @property
    def n_active(self) -> int:
        return len(self.sites)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.N == other.N
            and self.alpha == other.alpha
            and self.gamma == other.gamma
            and np.array_equal(self.eta, other.eta)
            and np.array_equal(self.ptr, other.ptr)
            and np.array_equal(self.sites, other.sites)
            and self.weights.tobytes() == other.weights.tobytes()
        )

    __hash__ = None

    def constraint(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        sl = slice(self.ptr[k], self.ptr[k + 1])
        return self.sites[sl], self.weights[sl]

    @property
    def constraints(self) -> list[list[tuple[int, float]]]:
        """Active ``(site, weight)`` pairs per constraint, sites 1-based."""
        out = []
        for k in range(self.M):
            s, w = self.constraint(k)
            out.append([(int(i) + 1, float(g)) for i, g in zip(s, w)])
        return out

    def dense_weights(self) -> np.ndarray:
        """``(M, N)`` matrix of ``g_{i,k} gamma_{i,k}``."""
        W = np.zeros((self.M, self.N))
        rows = np.repeat(np.arange(self.M), np.diff(self.ptr))
        W[rows, self.sites] = self.weights
        return W

    def active_mask(self) -> np.ndarray:
        mask = np.zeros((self.M, self.N), dtype=bool)
        rows = np.repeat(np.arange(self.M), np.diff(self.ptr))
        mask[rows, self.sites] = True
        return mask

    def with_eta(self, eta) -> "Instance":
        return Instance(self.N, self.alpha, self.gamma, np.asarray(eta), self.ptr,
                        self.sites, self.weights)

    def with_weights(self, weights) -> "Instance":
        return Instance(self.N, self.alpha, self.gamma, self.eta, self.ptr,
                        self.sites, np.asarray(weights, dtype=float))

    @classmethod
    def from_constraints(cls, N, constraints, eta=None, alpha=None, gamma=0.0):
        """Build from 1-based ``[[(site, weight), ...], ...]`` rows."""
        M = len(constraints)
        ptr = np.zeros(M + 1, dtype=np.int64)
        sites, weights = [], []
        for k, row in enumerate(constraints):
            for site, w in row:
                sites.append(int(site) - 1)
                weights.append(float(w))
            ptr[k + 1] = len(sites)
        if eta is None:
            eta = np.ones(M, dtype=np.int8)
        if alpha is None:
            alpha = M / N
        return cls(int(N), float(alpha), float(gamma), np.asarray(eta), ptr,
                   np.asarray(sites, dtype=np.int64), np.asarray(weights, dtype=float))

    @classmethod
    def from_dense(cls, W, mask, eta, alpha, gamma) -> "Instance":
        M, N = mask.shape
        rows, cols = np.nonzero(mask)
        ptr = np.zeros(M + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=M), out=ptr[1:])
        return cls(N, alpha, gamma, eta, ptr, cols, W[rows, cols])

    def to_json(self) -> str:
        # weights carry 17 significant digits so they round-trip exactly
        rows = []
        for k in range(self.M):
            s, w = self.constraint(k)
            pairs = ", ".join(f"[{int(i) + 1}, {format(float(g), '.17g')}]" for i, g in zip(s, w))
            rows.append(f"[{pairs}]")
        head = {
            "N": self.N,
            "M": self.M,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "eta": [int(e) for e in self.eta],
        }
        body = json.dumps(head)[:-1]
        return body + ', "constraints": [' + ", ".join(rows) + "]}"

    @classmethod
    def from_json(cls, text: str) -> "Instance":
        data = json.loads(text)
        inst = cls.from_constraints(
            data["N"], data["constraints"], eta=data.get("eta"),
            alpha=data.get("alpha"), gamma=data.get("gamma", 0.0),
        )
        if "M" in data and data["M"] != inst.M:
            raise ParameterError("M does not match the number of constraints")
        return inst


def _check_dilution(params: ModelParams):
    if params.gamma / params.N > 1.0:
        raise ParameterError(
            f"dilution probability gamma/N = {params.gamma / params.N:g} exceeds 1"
        )


def sample_dense(params: ModelParams, rng: np.random.Generator, count: int):
    """Draw ``count`` instances as dense arrays.

    Returns ``(W, mask, n_constraints)`` with ``W`` and ``mask`` of shape
    ``(count, max_m, N)``; rows at or beyond ``n_constraints[b]`` are empty.
    Draw order: constraint counts (stochastic rounding only), Bernoulli
    uniforms, then Gaussians.
    """
    _check_dilution(params)
    N, max_m = params.N, params.max_m
    if params.m_rounding == "stochastic":
        base = math.floor(params.alpha * N)
        frac = params.alpha * N - base
        n_constraints = base + (rng.random(count) < frac)
    else:
        n_constraints = np.full(count, params.M)
    n_constraints = n_constraints.astype(np.int64)
    mask = rng.random((count, max_m, N)) < params.gamma / N
    mask &= np.arange(max_m)[None, :, None] < n_constraints[:, None, None]
    G = rng.standard_normal((count, max_m, N))
    W = np.where(mask, G, 0.0)
    return W, mask, n_constraints


def sample_instance(params: ModelParams, rng) -> Instance:
    """Draw one disorder instance; deterministic given the generator state."""
    rng = as_generator(rng)
    W, mask, n_constraints = sample_dense(params, rng, 1)
    M = int(n_constraints[0])
    eta = params.eta_array()[:M]
    return Instance.from_dense(W[0, :M], mask[0, :M], eta, params.alpha, params.gamma)


def constraint_arguments(instance: Instance, sigma: np.ndarray) -> np.ndarray:
    """``sum_i g_{i,k} sigma_i`` for every constraint; ``sigma`` may be batched."""
    sigma = np.asarray(sigma, dtype=float)
    return sigma @ instance.dense_weights().T


def hamiltonian_value(instance: Instance, u: BoundedPotential, sigma) -> float | np.ndarray:
    """Value of ``-H(sigma)``; ``sigma`` is one configuration or a stack of them."""
    sigma = np.asarray(sigma)
    if sigma.shape[-1] != instance.N:
        raise ParameterError(f"sigma has length {sigma.shape[-1]}, expected {instance.N}")
    args = constraint_arguments(instance, sigma)
    vals = u(args) @ instance.eta.astype(float)
    return float(vals) if np.ndim(vals) == 0 else vals


@dataclass(frozen=True)
class ConditionReport:
    """Smallness conditions of the high-temperature regime.

    ``decorrelation_*`` is the induction condition behind spin decorrelation
    (threshold 1), ``contraction_*`` the contraction condition for the
    fixed-point map (threshold 1/2). ``magnetization_scale`` is
    ``alpha gamma0^6 U e^{2U}`` without its unknown constant; never a verdict.
    """

    decorrelation_lhs: float
    decorrelation_ok: bool
    contraction_lhs: float
    contraction_ok: bool
    contraction_factor: float
    magnetization_scale: float

    def as_dict(self) -> dict:
        return {
            "decorrelation_lhs": self.decorrelation_lhs,
            "decorrelation_ok": self.decorrelation_ok,
            "contraction_lhs": self.contraction_lhs,
            "contraction_ok": self.contraction_ok,
            "contraction_factor": self.contraction_factor,
            "magnetization_scale": self.magnetization_scale,
        }


def contraction_factor(alpha: float, gamma: float, sup_norm: float) -> float:
    """Lipschitz constant ``2 U e^{2U} alpha gamma^2`` of the cavity map."""
    return 2.0 * sup_norm * math.exp(2.0 * sup_norm) * alpha * gamma**2


def check_conditions(alpha: float, gamma0: float, u: BoundedPotential) -> ConditionReport:
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if gamma0 < 0:
        raise ParameterError(f"gamma0 must be >= 0, got {gamma0}")
    U = u.sup_norm
    if U > 150.0:
        raise ParameterError(f"sup norm {U} is far outside any high-temperature regime")
    e4 = math.exp(4.0 * U)
    prefactor = 4.0 * U * alpha * gamma0**2 * e4 * (
        3.0 + 2.0 * gamma0 + alpha * (gamma0**2 + gamma0**3) * e4
    )
    exponent = alpha * gamma0 * (e4 - 1.0)
    # the exponential factor overflows long after the condition has failed
    decor = prefactor * math.exp(exponent) if exponent < 700.0 else (math.inf if prefactor else 0.0)
    factor = contraction_factor(alpha, gamma0, U)
    return ConditionReport(
        decorrelation_lhs=decor,
        decorrelation_ok=bool(decor < 1.0),
        contraction_lhs=factor,
        contraction_ok=bool(factor < 0.5),
        contraction_factor=factor,
        magnetization_scale=alpha * gamma0**6 * U * math.exp(2.0 * U),
    )
