"""Exact small-N check of the unforgeability operator-norm bound.

For a preparation ensemble and a pair of claimed outcome strings (a, b), the
operator D_{a,b} sums the product projectors of every preparation whose
outcome string is within the error budget of ``a`` on one basis class and
``b`` on the other. Its largest eigenvalue bounds the success probability of
presenting ``a`` and ``b`` at two points. This module builds D_{a,b} densely,
maximizes the eigenvalue over all (a, b), and compares with closed forms.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, DomainError
from .qmath import (
    NORM_TOL,
    QubitState,
    binomial_tail_weighted,
    check_angle,
    check_bias,
    h_factor,
    lambda_from_overlap,
    max_errors,
    overlap_O,
)

MAX_DENSE_N = 12
MAX_EXHAUSTIVE_N = 6
_EIG_BATCH = 512


@dataclass(frozen=True, eq=False)
class PreparationSpec:
    """Per-site qubit ensembles.

    ``states[k, t, u]`` is the amplitude vector prepared at site k for bit t
    in basis u; ``basis_probs[k]`` is the probability of basis 0 at site k.
    """

    states: np.ndarray
    basis_probs: np.ndarray
    overlap_cap: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=complex)
        probs = np.asarray(self.basis_probs, dtype=float)
        if states.ndim != 4 or states.shape[1:] != (2, 2, 2):
            raise DomainError(f"states must have shape (N, 2, 2, 2), got {states.shape}")
        if probs.shape != (states.shape[0],):
            raise DomainError("basis_probs must have one entry per site")
        if states.shape[0] > MAX_DENSE_N:
            raise CapabilityError(f"N={states.shape[0]} exceeds the dense limit {MAX_DENSE_N}")
        if np.any(probs < 0) or np.any(probs > 1):
            raise DomainError("basis probabilities must lie in [0, 1]")
        if not 1 / math.sqrt(2) - NORM_TOL <= self.overlap_cap <= 1:
            raise DomainError(f"overlap cap {self.overlap_cap} outside [1/sqrt2, 1]")
        gram = np.einsum("ktui,ksui->kuts", states.conj(), states)
        if np.max(np.abs(gram - np.eye(2))) > NORM_TOL:
            raise DomainError("states within a basis are not orthonormal")
        if self.site_overlaps().max() > self.overlap_cap + NORM_TOL:
            raise DomainError("a cross-basis overlap exceeds the overlap cap")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "basis_probs", probs)

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def is_real(self) -> bool:
        return bool(np.all(np.abs(self.states.imag) < 1e-15))

    @property
    def is_homogeneous(self) -> bool:
        return bool(
            np.allclose(self.states, self.states[0], atol=1e-14)
            and np.allclose(self.basis_probs, self.basis_probs[0], atol=1e-14)
        )

    def site_overlaps(self) -> np.ndarray:
        """Largest |⟨φ_{t,0}|φ_{t',1}⟩| at each site."""
        ov = np.abs(np.einsum("kti,ksi->kts", self.states[:, :, 0].conj(), self.states[:, :, 1]))
        return ov.reshape(self.N, 4).max(axis=1)

    @property
    def spec_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.states, 12).tobytes())
        h.update(np.round(self.basis_probs, 12).tobytes())
        h.update(repr(round(self.overlap_cap, 12)).encode())
        return h.hexdigest()[:16]


def tilted_spec(xi0, xi1, p0, overlap_cap: float | None = None, phases=None) -> PreparationSpec:
    """Spec whose basis-0 states sit at Bloch angle ξ₀ from |0⟩ and basis-1 at π/2 + ξ₁.

    ``xi0``, ``xi1`` and ``p0`` are per-site arrays. ``phases`` (shape
    (N, 2, 2)) multiplies each state by a global phase, which leaves every
    projector unchanged.
    """
    xi0, xi1, p0 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (xi0, xi1, p0))
    n = len(p0)
    states = np.empty((n, 2, 2, 2), dtype=complex)
    for k in range(n):
        for t in (0, 1):
            for u, base in ((0, xi0[k]), (1, math.pi / 2 + xi1[k])):
                phase = 0.0 if phases is None else phases[k, t, u]
                states[k, t, u] = QubitState.from_bloch_xz(base + t * math.pi, phase).vector
    if overlap_cap is None:
        ov = np.abs(np.einsum("kti,ksi->kts", states[:, :, 0].conj(), states[:, :, 1]))
        overlap_cap = max(float(ov.max()), 1 / math.sqrt(2))
    return PreparationSpec(states, p0, overlap_cap)


def ideal_bb84(N: int) -> PreparationSpec:
    """Exact BB84 states with uniformly random bases."""
    z = np.zeros(N)
    return tilted_spec(z, z, np.full(N, 0.5), overlap_cap=1 / math.sqrt(2))


def random_spec(rng: np.random.Generator, N: int, theta: float, beta_PB: float,
                homogeneous: bool = True, complex_phases: bool = True) -> PreparationSpec:
    """Random ensemble meeting tilt bound θ and basis bias bound β_PB."""
    check_angle(theta)
    check_bias(beta_PB, "beta_PB")
    sites = 1 if homogeneous else N
    xi0 = rng.uniform(-theta, theta, sites)
    xi1 = rng.uniform(-theta, theta, sites)
    p0 = rng.uniform(0.5 - beta_PB, 0.5 + beta_PB, sites)
    if homogeneous:
        xi0, xi1, p0 = (np.repeat(v, N) for v in (xi0, xi1, p0))
    phases = rng.uniform(0, 2 * math.pi, (N, 2, 2)) if complex_phases else None
    if homogeneous and phases is not None:
        phases = np.broadcast_to(phases[:1], (N, 2, 2))
    return tilted_spec(xi0, xi1, p0, overlap_cap=overlap_O(theta), phases=phases)


def _bits(x, N: int) -> np.ndarray:
    if isinstance(x, str):
        x = [int(c) for c in x]
    arr = np.asarray(x, dtype=np.int8)
    if arr.shape != (N,) or np.any((arr != 0) & (arr != 1)):
        raise DomainError(f"expected a bit string of length {N}")
    return arr


def _site_operators(spec: PreparationSpec, h, a, b):
    """Per-site sums of projectors with zero and one outcome error."""
    vec = spec.states
    proj = np.einsum("ktui,ktuj->ktuij", vec, vec.conj())
    p = np.stack([spec.basis_probs, 1 - spec.basis_probs], axis=1)
    sites = np.arange(spec.N)
    zero_err = np.zeros((spec.N, 2, 2), dtype=complex)
    one_err = np.zeros_like(zero_err)
    for s in (0, 1):
        target = np.where(h == s, a, b)
        zero_err += p[:, s, None, None] * proj[sites, target, s]
        one_err += p[:, s, None, None] * proj[sites, 1 - target, s]
    if spec.is_real:
        return zero_err.real, one_err.real
    return zero_err, one_err


def _assemble(zero_err, one_err, budget: int) -> np.ndarray:
    # by_weight[w] is the partial tensor product carrying exactly w errors.
    by_weight = [np.ones((1, 1), dtype=zero_err.dtype)]
    for A, B in zip(zero_err, one_err):
        nxt = []
        for w in range(min(len(by_weight), budget) + 1):
            m = np.kron(by_weight[w], A) if w < len(by_weight) else 0
            if w >= 1:
                m = m + np.kron(by_weight[w - 1], B)
            nxt.append(m)
        by_weight = nxt
    return sum(by_weight)


def build_Dab(spec: PreparationSpec, h, a, b, gamma_err: float) -> np.ndarray:
    """Dense D_{a,b} for basis reference string ``h``."""
    if gamma_err < 0:
        raise DomainError("gamma_err must be nonnegative")
    N = spec.N
    h, a, b = _bits(h, N), _bits(a, N), _bits(b, N)
    zero_err, one_err = _site_operators(spec, h, a, b)
    return _assemble(zero_err, one_err, min(max_errors(N, gamma_err), N))


def build_Dab_termwise(spec: PreparationSpec, h, a, b, gamma_err: float) -> np.ndarray:
    """Reference construction summing every (s, r) term explicitly; small N only."""
    N = spec.N
    h, a, b = _bits(h, N), _bits(a, N), _bits(b, N)
    budget = max_errors(N, gamma_err)
    vec = spec.states
    out = np.zeros((2**N, 2**N), dtype=complex)
    for s in itertools.product((0, 1), repeat=N):
        s = np.array(s)
        weight = np.prod(np.where(s == 0, spec.basis_probs, 1 - spec.basis_probs))
        target = np.where(s == h, a, b)
        for r in itertools.product((0, 1), repeat=N):
            r = np.array(r)
            if np.sum(r != target) > budget:
                continue
            v = np.ones(1, dtype=complex)
            for k in range(N):
                v = np.kron(v, vec[k, r[k], s[k]])
            out += weight * np.outer(v, v.conj())
    return out


def _largest_eigenvalues(mats: list[np.ndarray]) -> np.ndarray:
    stack = np.stack(mats)
    stack = 0.5 * (stack + np.conj(np.swapaxes(stack, -1, -2)))
    return np.linalg.eigvalsh(stack)[:, -1]


def _pair_candidates(N: int, reduced: bool):
    """(a, b) pairs to examine; ``reduced`` keeps one per multiset of site types."""
    if reduced:
        for combo in itertools.combinations_with_replacement(range(4), N):
            c = np.array(combo)
            yield c // 2, c % 2
    else:
        for a in itertools.product((0, 1), repeat=N):
            for b in itertools.product((0, 1), repeat=N):
                yield np.array(a), np.array(b)


def _max_over_pairs(spec, h, pairs, budget):
    best, best_pair = -math.inf, None
    batch, keys = [], []

    def flush():
        nonlocal best, best_pair
        vals = _largest_eigenvalues(batch)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, best_pair = float(vals[i]), keys[i]
        batch.clear()
        keys.clear()

    for a, b in pairs:
        batch.append(_assemble(*_site_operators(spec, h, a, b), budget))
        keys.append((a, b))
        if len(batch) == _EIG_BATCH:
            flush()
    if batch:
        flush()
    return best, best_pair


def _chunk_job(args):
    spec, h, a_list, budget = args
    N = spec.N
    pairs = ((np.array(a), np.array(b)) for a in a_list for b in itertools.product((0, 1), repeat=N))
    return _max_over_pairs(spec, h, pairs, budget)


@dataclass(frozen=True)
class OracleResult:
    spec_hash: str
    N: int
    gamma_err: float
    norm_exact: float
    norm_closed: float
    bound: float
    argmax_a: str
    argmax_b: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def norm_upper_bound(N: int, gamma_err: float, overlap: float, beta_PB: float) -> float:
    """Upper bound on the max norm: (1−λ)^N at γ=0, Chernoff form for 0<γ<λ, else 1."""
    lam = lambda_from_overlap(overlap, beta_PB)
    if gamma_err == 0:
        return (1 - lam) ** N
    if 0 < gamma_err < lam:
        return math.exp(-(N * lam / 2) * (1 - gamma_err / lam) ** 2)
    return 1.0


def max_norm_closed(N: int, gamma_err: float, O: float, beta_PB: float) -> float:
    """Σ_{n ≤ ⌊Nγ⌋} C(N,n) λ₀^(N−n) (1−λ₀)^n with λ₀ = 1 − λ(O, β_PB)."""
    if gamma_err < 0:
        raise DomainError("gamma_err must be nonnegative")
    lam0 = 1 - lambda_from_overlap(O, beta_PB)
    if gamma_err == 0:
        return lam0**N
    return binomial_tail_weighted(N, gamma_err, lam0)


def site_weight_tail(lam0: np.ndarray, budget: int) -> float:
    """P(at most ``budget`` errors) with independent per-site error probability 1 − λ₀ₖ."""
    dist = np.zeros(budget + 1)
    dist[0] = 1.0
    for p in lam0:
        shifted = np.concatenate([[0.0], dist[:-1]])
        dist = p * dist + (1 - p) * shifted
    return float(dist.sum())


def closed_norm_for_spec(spec: PreparationSpec, gamma_err: float) -> float:
    """Closed-form max norm using the spec's actual overlaps and basis probabilities."""
    overlaps = spec.site_overlaps()
    dev = np.abs(spec.basis_probs - 0.5)
    if spec.is_homogeneous:
        return max_norm_closed(spec.N, gamma_err, float(overlaps[0]), float(dev[0]))
    lam0 = np.array([1 - lambda_from_overlap(float(o), float(d)) for o, d in zip(overlaps, dev)])
    return site_weight_tail(lam0, min(max_errors(spec.N, gamma_err), spec.N))


def max_norm_exact(spec: PreparationSpec, gamma_err: float, h=None,
                   exhaustive: bool | None = None, jobs: int = 1) -> OracleResult:
    """Largest eigenvalue of D_{a,b} maximized over all outcome pairs (a, b).

    Homogeneous specs are invariant under site permutations, so one pair per
    multiset of per-site (a_k, b_k) types suffices unless ``exhaustive``.
    """
    N = spec.N
    h = np.zeros(N, dtype=np.int8) if h is None else _bits(h, N)
    reduced = spec.is_homogeneous and not np.any(h) and not exhaustive
    if not reduced and N > MAX_EXHAUSTIVE_N:
        raise CapabilityError(f"full (a,b) enumeration is capped at N={MAX_EXHAUSTIVE_N}")
    budget = min(max_errors(N, gamma_err), N)
    if reduced or jobs <= 1:
        best, (a, b) = _max_over_pairs(spec, h, _pair_candidates(N, reduced), budget)
    else:
        a_all = list(itertools.product((0, 1), repeat=N))
        chunks = [a_all[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_chunk_job, [(spec, h, c, budget) for c in chunks]))
        best, (a, b) = max(results, key=lambda r: r[0])
    dev = float(np.max(np.abs(spec.basis_probs - 0.5)))
    return OracleResult(
        spec_hash=spec.spec_hash,
        N=N,
        gamma_err=gamma_err,
        norm_exact=best,
        norm_closed=closed_norm_for_spec(spec, gamma_err),
        bound=norm_upper_bound(N, gamma_err, spec.overlap_cap, dev),
        argmax_a="".join(map(str, a)),
        argmax_b="".join(map(str, b)),
    )


def rho_eigen_check(beta_PS: float, beta_PB: float, theta: float,
                    xi_points: int = 64, prob_points: int = 5) -> tuple[float, float]:
    """Worst-case top eigenvalue of the average prepared state versus ½(1 + h).

    The average is over a biased bit and a biased basis, with the second
    basis tilted by ξ ∈ [−2θ, 2θ]. Box corners plus an interior grid are
    searched.
    """
    beta_PS = check_bias(beta_PS, "beta_PS", allow_half=True)
    beta_PB = check_bias(beta_PB, "beta_PB", allow_half=True)
    theta = check_angle(theta, allow_quarter_pi=True)
    P = np.linspace(0.5 - beta_PB, 0.5 + beta_PB, prob_points)
    R = np.linspace(0.5 - beta_PS, 0.5 + beta_PS, prob_points)
    xi = np.concatenate([[-2 * theta, 2 * theta], np.linspace(-2 * theta, 2 * theta, xi_points + 2)[1:-1]])
    P, R, xi = (v.ravel() for v in np.meshgrid(P, R, xi, indexing="ij"))
    z0 = np.array([[1.0, 0.0], [0.0, 0.0]])
    z1 = np.array([[0.0, 0.0], [0.0, 1.0]])
    # Tilted basis: Bloch vector (cos ξ, 0, sin ξ), i.e. polar angle π/2 − ξ.
    c, s = np.cos((np.pi / 2 - xi) / 2), np.sin((np.pi / 2 - xi) / 2)
    t0 = np.stack([np.stack([c * c, c * s], -1), np.stack([c * s, s * s], -1)], -2)
    t1 = np.eye(2) - t0
    rho = (P[:, None, None] * (R[:, None, None] * z0 + (1 - R)[:, None, None] * z1)
           + (1 - P)[:, None, None] * (R[:, None, None] * t0 + (1 - R)[:, None, None] * t1))
    exact = float(np.linalg.eigvalsh(rho)[:, -1].max())
    return exact, 0.5 * (1 + h_factor(beta_PS, beta_PB, theta))
