"""Scalar numerics for the token schemes.

Probabilities that can underflow (exponents of order -1000 are routine at
N ~ 1e7) are carried as :class:`LogProb`, which keeps the natural log and
derives the linear value on demand.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import BoundaryWarning, DomainError

SQRT2 = math.sqrt(2.0)
QUARTER_PI = math.pi / 4
NORM_TOL = 1e-12

# Relative slack used when a real threshold N*gamma is compared against
# integers, so that 0.29 * 100 still admits 29 errors.
THRESHOLD_RTOL = 1e-12


@dataclass(frozen=True, order=True)
class LogProb:
    """A probability stored as its natural logarithm."""

    log: float

    @property
    def value(self) -> float:
        return math.exp(self.log)

    @property
    def log10(self) -> float:
        return self.log / math.log(10.0)

    @classmethod
    def from_value(cls, p: float) -> "LogProb":
        if p < 0:
            raise DomainError(f"negative probability {p}")
        return cls(math.log(p) if p > 0 else -math.inf)

    def scale(self, factor: float) -> "LogProb":
        """Multiply by a nonnegative constant."""
        if factor < 0:
            raise DomainError(f"negative scale factor {factor}")
        if factor == 0:
            return LogProb(-math.inf)
        return LogProb(self.log + math.log(factor))

    def __add__(self, other: "LogProb") -> "LogProb":
        return LogProb(float(np.logaddexp(self.log, other.log)))

    def __float__(self) -> float:
        return self.value

    def as_dict(self) -> dict:
        return {"log": self.log, "value": self.value}


def max_errors(n: int, gamma: float) -> int:
    """Largest integer d with d <= n * gamma (ties included)."""
    return int(math.floor(n * gamma * (1.0 + THRESHOLD_RTOL) + THRESHOLD_RTOL))


def within_threshold(d: int, n: int, gamma: float) -> bool:
    """Real-valued test d <= n * gamma, boundary inclusive."""
    return d <= max_errors(n, gamma)


def deg(theta_deg: float) -> float:
    return math.radians(theta_deg)


def check_angle(theta: float, *, allow_quarter_pi: bool = False) -> float:
    """Validate an uncertainty angle in [0, pi/4)."""
    theta = float(theta)
    if not math.isfinite(theta) or theta < 0 or theta > QUARTER_PI:
        raise DomainError(f"angle {theta} outside [0, pi/4)")
    if theta == QUARTER_PI:
        if not allow_quarter_pi:
            raise DomainError("angle pi/4 is outside the open interval [0, pi/4)")
        warnings.warn("angle equals pi/4, outside the open interval", BoundaryWarning, stacklevel=3)
    return theta


def check_bias(beta: float, name: str = "beta", *, allow_half: bool = False) -> float:
    """Validate a bias in [0, 1/2); 1/2 itself only when ``allow_half``."""
    beta = float(beta)
    upper_ok = beta <= 0.5 if allow_half else beta < 0.5
    if not math.isfinite(beta) or beta < 0 or not upper_ok:
        raise DomainError(f"{name}={beta} outside [0, 1/2)")
    return beta


def overlap_O(theta: float) -> float:
    """Upper bound (cos θ + sin θ)/√2 on cross-basis overlaps for tilt θ.

    θ = π/4 is returned as 1.0 with a :class:`BoundaryWarning`.
    """
    theta = check_angle(theta, allow_quarter_pi=True)
    if theta == QUARTER_PI:
        return 1.0
    return (math.cos(theta) + math.sin(theta)) / SQRT2


def lambda_from_overlap(overlap: float, beta_PB: float) -> float:
    """Per-qubit failure weight for a given maximum overlap and basis bias."""
    if not (1 / SQRT2 - NORM_TOL <= overlap <= 1.0):
        raise DomainError(f"overlap {overlap} outside [1/sqrt2, 1]")
    beta_PB = check_bias(beta_PB, "beta_PB", allow_half=True)
    radicand = 1.0 - (1.0 - overlap * overlap) * (1.0 - 4.0 * beta_PB * beta_PB)
    return 0.5 * (1.0 - math.sqrt(max(radicand, 0.0)))


def lambda_bound(theta: float, beta_PB: float) -> float:
    """λ(θ, β_PB) = ½(1 − √(1 − (1 − O(θ)²)(1 − 4β_PB²)))."""
    return lambda_from_overlap(overlap_O(theta), beta_PB)


def h_factor(beta_PS: float, beta_PB: float, theta: float) -> float:
    """h(β_PS, β_PB, θ) = 2β_PS √(½ + 2β_PB² + (½ − 2β_PB²) sin 2θ)."""
    beta_PS = check_bias(beta_PS, "beta_PS", allow_half=True)
    beta_PB = check_bias(beta_PB, "beta_PB", allow_half=True)
    theta = check_angle(theta, allow_quarter_pi=True)
    b2 = 2.0 * beta_PB * beta_PB
    return 2.0 * beta_PS * math.sqrt(0.5 + b2 + (0.5 - b2) * math.sin(2.0 * theta))


def chernoff_tail(mean: float, epsilon: float, side: str) -> LogProb:
    """Multiplicative Chernoff bound on a sum of independent Bernoullis.

    ``lower`` bounds P(X <= (1-ε)·mean) by exp(-mean·ε²/2); ``upper`` bounds
    P(X >= (1+ε)·mean) by exp(-mean·ε²/3).
    """
    if not mean > 0:
        raise DomainError(f"mean must be positive, got {mean}")
    if not 0 < epsilon < 1:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    if side == "lower":
        return LogProb(-mean * epsilon * epsilon / 2.0)
    if side == "upper":
        return LogProb(-mean * epsilon * epsilon / 3.0)
    raise DomainError(f"side must be 'lower' or 'upper', got {side!r}")


def log_binomial_tail_weighted(N: int, gamma: float, lam0: float) -> float:
    """log Σ_{n ≤ ⌊Nγ⌋} C(N,n) lam0^(N−n) (1−lam0)^n, via log-sum-exp."""
    if N < 1 or int(N) != N:
        raise DomainError(f"N must be a positive integer, got {N}")
    if gamma < 0:
        raise DomainError(f"gamma must be nonnegative, got {gamma}")
    if not 0 < lam0 < 1:
        raise DomainError(f"lam0 must lie in (0, 1), got {lam0}")
    N = int(N)
    top = min(max_errors(N, gamma), N)
    if top == N:
        return 0.0
    log_p, log_q = math.log(lam0), math.log1p(-lam0)
    # Chunked so N ~ 1e8 does not allocate one enormous array.
    chunk = 1 << 20
    partial = []
    for start in range(0, top + 1, chunk):
        n = np.arange(start, min(top + 1, start + chunk), dtype=np.float64)
        terms = gammaln(N + 1) - gammaln(n + 1) - gammaln(N - n + 1) + (N - n) * log_p + n * log_q
        partial.append(logsumexp(terms))
    return float(min(logsumexp(partial), 0.0))


def binomial_tail_weighted(N: int, gamma: float, lam0: float) -> float:
    """Linear value of :func:`log_binomial_tail_weighted`."""
    return math.exp(log_binomial_tail_weighted(N, gamma, lam0))


@dataclass(frozen=True)
class QubitState:
    """Pure qubit state α|0⟩ + β|1⟩."""

    alpha: complex
    beta: complex

    def __post_init__(self):
        norm = abs(self.alpha) ** 2 + abs(self.beta) ** 2
        if abs(norm - 1.0) > NORM_TOL:
            raise DomainError(f"qubit state not normalized: |α|²+|β|² = {norm}")

    @classmethod
    def from_bloch_xz(cls, polar: float, phase: float = 0.0) -> "QubitState":
        """State whose Bloch vector lies in the x-z plane at ``polar`` from +z."""
        g = complex(math.cos(phase), math.sin(phase))
        return cls(g * math.cos(polar / 2), g * math.sin(polar / 2))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.alpha, self.beta], dtype=complex)

    def projector(self) -> np.ndarray:
        v = self.vector
        return np.outer(v, v.conj())

    def overlap(self, other: "QubitState") -> float:
        return abs(np.vdot(self.vector, other.vector))


def check_density_matrix(rho: np.ndarray) -> np.ndarray:
    """Validate a 2×2 density matrix and return it as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise DomainError(f"expected a 2x2 matrix, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > NORM_TOL:
        raise DomainError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > NORM_TOL:
        raise DomainError(f"density matrix trace {np.trace(rho).real} != 1")
    if np.linalg.eigvalsh(rho).min() < -NORM_TOL:
        raise DomainError("density matrix has a negative eigenvalue")
    return rho
