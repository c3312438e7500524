"""Security bounds for the practical token schemes and the β_max feasibility sweep.

Every ε is computed in log-space. Each evaluator checks its own named
constraints first and raises :class:`PreconditionError` listing all the
violated inequalities, so it never returns a number for an inadmissible
parameter set.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, PreconditionError
from .qmath import LogProb, check_angle, check_bias, h_factor, lambda_bound

NO_GUARANTEE = "UNFORGEABILITY NOT GUARANTEED"


@dataclass(frozen=True)
class SchemeParams:
    """Protocol and security parameters shared by Alice and Bob."""

    N: int
    P_det: float
    gamma_det: float
    E: float
    gamma_err: float
    M: int = 1
    beta_PB: float = 0.0
    beta_PS: float = 0.0
    beta_E: float = 0.0
    theta: float = 0.0
    P_noqub: float = 0.0
    mu: float = 0.0
    eta: float = 1.0

    def __post_init__(self):
        if isinstance(self.N, float):
            if self.N != int(self.N):
                raise DomainError(f"N must be an integer, got {self.N}")
            object.__setattr__(self, "N", int(self.N))
        self.validate()

    def validate(self) -> None:
        if self.N < 1:
            raise DomainError(f"N must be >= 1, got {self.N}")
        if self.M < 1:
            raise DomainError(f"M must be >= 1, got {self.M}")
        _open_unit("P_det", self.P_det, closed_right=True)
        _open_unit("gamma_det", self.gamma_det)
        _open_unit("gamma_err", self.gamma_err)
        if not 0 <= self.E < 1:
            raise DomainError(f"E={self.E} outside [0, 1)")
        if not 0 <= self.P_noqub < 1:
            raise DomainError(f"P_noqub={self.P_noqub} outside [0, 1)")
        if self.mu < 0:
            raise DomainError(f"mu={self.mu} must be nonnegative")
        _open_unit("eta", self.eta, closed_right=True)
        for name in ("beta_PB", "beta_PS", "beta_E"):
            check_bias(getattr(self, name), name)
        check_angle(self.theta)

    def with_(self, **changes) -> "SchemeParams":
        return replace(self, **changes)

    @property
    def boundary_flags(self) -> list[str]:
        """Parameters sitting on the closed end of an open domain."""
        return [
            f"{name}=0"
            for name in ("theta", "beta_PB", "beta_PS", "beta_E", "P_noqub", "E")
            if getattr(self, name) == 0
        ]


@dataclass(frozen=True)
class FreeVariables:
    """Slack variables chosen by the parties to evaluate the bounds."""

    nu_cor: float
    nu_unf: float

    def __post_init__(self):
        if not self.nu_cor > 0 or not self.nu_unf > 0:
            raise DomainError(f"slack variables must be positive: {self}")


@dataclass(frozen=True)
class Constraint:
    """A named inequality with ``margin = rhs - lhs`` (positive when satisfied)."""

    name: str
    margin: float

    @property
    def ok(self) -> bool:
        return self.margin > 0

    def as_dict(self) -> dict:
        return {"name": self.name, "ok": self.ok, "margin": self.margin}


def _open_unit(name: str, value: float, closed_right: bool = False) -> None:
    upper_ok = value <= 1 if closed_right else value < 1
    if not (value > 0 and upper_ok):
        raise DomainError(f"{name}={value} outside (0, 1{']' if closed_right else ')'}")


def _capped(eps: LogProb) -> LogProb:
    """A two-term union bound can exceed one; report it as the trivial bound 1."""
    return eps if eps.log <= 0 else LogProb(0.0)


def _require(constraints: Sequence[Constraint]) -> None:
    bad = [(c.name, c.margin) for c in constraints if not c.ok]
    if bad:
        raise PreconditionError(bad)


# Constraint sets ----------------------------------------------------------


def rob_constraints(p: SchemeParams) -> list[Constraint]:
    return [
        Constraint("0 < gamma_det", p.gamma_det),
        Constraint("gamma_det < P_det", p.P_det - p.gamma_det),
    ]


def cor_constraints(p: SchemeParams, v: FreeVariables) -> list[Constraint]:
    q = p.P_det * (1 - 2 * p.beta_PB)
    return [
        Constraint("gamma_err/2 < E", p.E - p.gamma_err / 2),
        Constraint("E < gamma_err", p.gamma_err - p.E),
        Constraint("0 < nu_cor", v.nu_cor),
        Constraint("nu_cor < P_det(1-2beta_PB)/2", q / 2 - v.nu_cor),
    ]


def delta(gamma_det: float, gamma_err: float, nu_unf: float) -> float:
    """δ = γ_det·γ_err / (γ_det − ν_unf)."""
    return gamma_det * gamma_err / (gamma_det - nu_unf)


def beta_PS_limit(lam: float, dlt: float) -> float:
    """Largest admissible β_PS: ½[exp((λ/2)(1 − δ/λ)²) − 1]."""
    x = lam / 2 * (1 - dlt / lam) ** 2
    # Huge δ only arises when ν_unf nears γ_det, which another constraint rejects.
    return math.inf if x > 700 else 0.5 * math.expm1(x)


def unf_constraints(p: SchemeParams, v: FreeVariables) -> list[Constraint]:
    lam = lambda_bound(p.theta, p.beta_PB)
    out = [
        Constraint("0 < gamma_err", p.gamma_err),
        Constraint("gamma_err < lambda", lam - p.gamma_err),
        Constraint("P_noqub < nu_unf", v.nu_unf - p.P_noqub),
        Constraint("nu_unf < 2 P_noqub", 2 * p.P_noqub - v.nu_unf),
        Constraint(
            "nu_unf < gamma_det(1-gamma_err/lambda)",
            p.gamma_det * (1 - p.gamma_err / lam) - v.nu_unf if lam > 0 else -math.inf,
        ),
    ]
    if lam > 0 and v.nu_unf < p.gamma_det:
        limit = beta_PS_limit(lam, delta(p.gamma_det, p.gamma_err, v.nu_unf))
        out.append(Constraint("beta_PS < (exp((lambda/2)(1-delta/lambda)^2)-1)/2", limit - p.beta_PS))
    else:
        out.append(Constraint("beta_PS < (exp((lambda/2)(1-delta/lambda)^2)-1)/2", -math.inf))
    return out


# Single-round bounds -------------------------------------------------------


def rob_exponent(P_det: float, gamma_det: float, N: float) -> float:
    return -(P_det * N / 2) * (1 - gamma_det / P_det) ** 2


def epsilon_rob(p: SchemeParams) -> LogProb:
    """Probability that an honest run aborts for lack of detections."""
    _require(rob_constraints(p))
    return LogProb(rob_exponent(p.P_det, p.gamma_det, p.N))


def cor_exponents(P_det, beta_PB, E, gamma_err, nu_cor, N):
    """Both correctness exponents; vectorizes over numpy inputs."""
    q = P_det * (1 - 2 * beta_PB)
    t1 = -(q * N / 4) * (1 - 2 * nu_cor / q) ** 2
    t2 = -(E * nu_cor * N / 3) * (gamma_err / E - 1) ** 2
    return t1, t2


@dataclass(frozen=True)
class CorResult:
    terms: tuple[float, float]
    eps: LogProb


def epsilon_cor(p: SchemeParams, v: FreeVariables) -> CorResult:
    """Probability that an honest token is rejected."""
    _require(cor_constraints(p, v))
    t1, t2 = cor_exponents(p.P_det, p.beta_PB, p.E, p.gamma_err, v.nu_cor, p.N)
    return CorResult((float(t1), float(t2)), _capped(LogProb(t1) + LogProb(t2)))


def epsilon_priv(beta_E: float, M: int = 1) -> float:
    """Privacy bound: β_E for one round, (1/2^M)[(1+2β_E)^M − 1] for M rounds."""
    check_bias(beta_E, "beta_E")
    if M < 1:
        raise DomainError(f"M must be >= 1, got {M}")
    if M == 1:
        return float(beta_E)
    return math.expm1(M * math.log1p(2 * beta_E)) / 2.0**M


def unf_rate(gamma_det, gamma_err, nu_unf, lam, beta_PS, h):
    """Exponent rate f of the second unforgeability term."""
    dlt = gamma_det * gamma_err / (gamma_det - nu_unf)
    w = gamma_det - nu_unf
    return w * (lam / 2 * (1 - dlt / lam) ** 2 - np.log1p(2 * beta_PS)) - (1 - w) * np.log1p(h)


def noqubit_exponent(P_noqub: float, nu_unf: float, N: float) -> float:
    return -(P_noqub * N / 3) * (nu_unf / P_noqub - 1) ** 2


@dataclass(frozen=True)
class UnfResult:
    terms: tuple[float, float]
    f: float
    delta: float
    lam: float
    h: float
    eps: LogProb | None

    @property
    def guaranteed(self) -> bool:
        return self.eps is not None

    @property
    def status(self) -> str:
        return "GUARANTEED" if self.guaranteed else NO_GUARANTEE


def epsilon_unf(p: SchemeParams, v: FreeVariables) -> UnfResult:
    """Probability that Alice has tokens validated at two presentation points.

    When the rate f is not positive the bound is vacuous and ``eps`` is None.
    """
    _require(unf_constraints(p, v))
    lam = lambda_bound(p.theta, p.beta_PB)
    h = h_factor(p.beta_PS, p.beta_PB, p.theta)
    f = float(unf_rate(p.gamma_det, p.gamma_err, v.nu_unf, lam, p.beta_PS, h))
    t1 = noqubit_exponent(p.P_noqub, v.nu_unf, p.N)
    t2 = -p.N * f
    eps = _capped(LogProb(t1) + LogProb(t2)) if f > 0 else None
    return UnfResult((t1, t2), f, delta(p.gamma_det, p.gamma_err, v.nu_unf), lam, h, eps)


# Reports -------------------------------------------------------------------


def union_exact(eps: LogProb, M: int) -> LogProb:
    """1 − (1 − ε)^M, accurate when ε underflows."""
    e = eps.value
    if e == 0.0:
        return eps.scale(M)
    if e >= 1.0:
        return LogProb(0.0)
    val = -math.expm1(M * math.log1p(-e))
    return LogProb(math.log(val)) if val > 0 else eps.scale(M)


@dataclass
class BoundReport:
    """Evaluated bounds with their terms and constraint flags.

    Entries are None where the corresponding constraints fail.
    """

    eps_rob: LogProb | None
    eps_cor: LogProb | None
    eps_priv: float | None
    eps_unf: LogProb | None
    cor_terms: tuple[float, float] | None
    unf_terms: tuple[float, float] | None
    f_value: float | None
    delta: float | None
    lam: float
    h: float
    unforgeability: str
    constraints: list[Constraint]
    boundary_flags: list[str] = field(default_factory=list)
    multi: dict | None = None

    @property
    def constraints_ok(self) -> bool:
        return all(c.ok for c in self.constraints)

    @property
    def violations(self) -> list[Constraint]:
        return [c for c in self.constraints if not c.ok]

    def to_dict(self) -> dict:
        def lp(x):
            return None if x is None else x.as_dict()

        out = {
            "eps_rob": lp(self.eps_rob),
            "eps_cor": lp(self.eps_cor),
            "eps_priv": self.eps_priv,
            "eps_unf": lp(self.eps_unf),
            "cor_terms": self.cor_terms,
            "unf_terms": self.unf_terms,
            "f_value": self.f_value,
            "delta": self.delta,
            "lambda": self.lam,
            "h": self.h,
            "unforgeability": self.unforgeability,
            "constraints_ok": self.constraints_ok,
            "constraints": [c.as_dict() for c in self.constraints],
            "boundary_flags": self.boundary_flags,
        }
        if self.multi is not None:
            out["multi"] = {
                k: (v.as_dict() if isinstance(v, LogProb) else v) for k, v in self.multi.items()
            }
        return out


def evaluate(p: SchemeParams, v: FreeVariables, C: int | None = None) -> BoundReport:
    """Evaluate every bound that its own constraints allow.

    With ``C`` given (or M > 1) the multi-point quantities are attached under
    ``multi``.
    """
    rob_c, cor_c, unf_c = rob_constraints(p), cor_constraints(p, v), unf_constraints(p, v)
    rob = epsilon_rob(p) if all(c.ok for c in rob_c) else None
    cor = epsilon_cor(p, v) if all(c.ok for c in cor_c) else None
    unf = epsilon_unf(p, v) if all(c.ok for c in unf_c) else None
    if unf is None:
        status = "CONSTRAINT VIOLATED"
    else:
        status = unf.status
    report = BoundReport(
        eps_rob=rob,
        eps_cor=None if cor is None else cor.eps,
        eps_priv=epsilon_priv(p.beta_E, 1),
        eps_unf=None if unf is None else unf.eps,
        cor_terms=None if cor is None else cor.terms,
        unf_terms=None if unf is None else unf.terms,
        f_value=None if unf is None else unf.f,
        delta=delta(p.gamma_det, p.gamma_err, v.nu_unf) if v.nu_unf < p.gamma_det else None,
        lam=lambda_bound(p.theta, p.beta_PB),
        h=h_factor(p.beta_PS, p.beta_PB, p.theta),
        unforgeability=status,
        constraints=rob_c + cor_c + unf_c,
        boundary_flags=p.boundary_flags,
    )
    if C is not None or p.M > 1:
        report.multi = _multi_block(p, report, 1 if C is None else C)
    return report


def _multi_block(p: SchemeParams, r: BoundReport, C: int) -> dict:
    M = p.M
    out = {"M": M, "C": C, "eps_priv": epsilon_priv(p.beta_E, M)}
    for name, eps in (("rob", r.eps_rob), ("cor", r.eps_cor)):
        out[f"eps_{name}_exact"] = None if eps is None else union_exact(eps, M)
        out[f"eps_{name}_linear"] = None if eps is None else eps.scale(M)
    out["eps_unf"] = None if r.eps_unf is None else r.eps_unf.scale(C)
    return out


def epsilon_multi(p: SchemeParams, v: FreeVariables, C: int) -> BoundReport:
    """Bounds for the 2^M-point schemes with ``C`` spacelike presentation pairs."""
    if C < 0:
        raise DomainError(f"C must be nonnegative, got {C}")
    return evaluate(p, v, C=C)


# Feasibility sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepFixed:
    """Parameters held fixed across the sweep; biases are swept."""

    N: float
    P_det: float
    gamma_det: float
    P_noqub: float
    nu_unf: float | None = None


# Experimental operating point and the standard grid behind `smoney sweep --fig2`.
REFERENCE_FIXED = SweepFixed(N=4e7, P_det=0.019, gamma_det=0.018, P_noqub=3.8e-3)
REFERENCE_THETA_DEG = tuple(range(12))
REFERENCE_E = (0.01, 0.03, 0.058)


def default_nu_unf(P_noqub: float, N: float, target: float) -> float:
    """Smallest ν_unf making the no-qubit term equal target/2."""
    return P_noqub * (1 + math.sqrt(3 * math.log(2 / target) / (P_noqub * N)))


@dataclass
class SweepPoint:
    theta_deg: float
    E: float
    beta_max: float
    gamma_err_opt: float | None
    nu_cor_opt: float | None
    nu_unf: float
    cor_T1: float | None
    cor_T2: float | None
    unf_T1: float
    unf_T2: float | None
    reason: str = ""

    CSV_COLUMNS = (
        "theta_deg", "E", "beta_max", "gamma_err_opt", "nu_cor_opt", "nu_unf",
        "cor_T1", "cor_T2", "unf_T1", "unf_T2", "reason",
    )

    def row(self) -> list:
        d = asdict(self)
        return ["" if d[c] is None else d[c] for c in self.CSV_COLUMNS]


@dataclass(frozen=True)
class _Candidate:
    nu_cor: float
    gamma_err: float
    terms: tuple[float, float, float]  # cor T1, cor T2, unf T2


def _check_point(fx, E, beta, theta, nu_unf, nu_cor, gamma_err, log_half):
    """Exact feasibility of one (ν_cor, γ_err) at bias β; returns exponents or None."""
    lam = lambda_bound(theta, beta)
    q = fx.P_det * (1 - 2 * beta)
    if not (gamma_err / 2 < E < gamma_err and 0 < nu_cor < q / 2):
        return None
    if not (0 < gamma_err < lam and fx.P_noqub < nu_unf < min(2 * fx.P_noqub, fx.gamma_det * (1 - gamma_err / lam))):
        return None
    dlt = delta(fx.gamma_det, gamma_err, nu_unf)
    if not beta < beta_PS_limit(lam, dlt):
        return None
    t1, t2 = cor_exponents(fx.P_det, beta, E, gamma_err, nu_cor, fx.N)
    f = unf_rate(fx.gamma_det, gamma_err, nu_unf, lam, beta, h_factor(beta, beta, theta))
    u2 = -fx.N * f
    if max(t1, t2, u2) > log_half:
        return None
    return float(t1), float(t2), float(u2)


def _inner_boundary(fx, E, beta, theta, nu_unf, log_half):
    """Closed-form inner optimum.

    The first correctness term only improves as ν_cor shrinks and the second
    only as ν_cor grows, so ν_cor is pushed to where the first term meets the
    target. Every other condition improves as γ_err decreases, so γ_err is
    the smallest value meeting the second correctness term.
    """
    L = -log_half
    q = fx.P_det * (1 - 2 * beta)
    root = 4 * L / (q * fx.N)
    if root >= 1:
        return None
    nu_cor = (q / 2) * (1 - math.sqrt(root)) * (1 - 1e-12)
    gamma_err = E * (1 + math.sqrt(3 * L / (E * nu_cor * fx.N))) * (1 + 1e-12)
    terms = _check_point(fx, E, beta, theta, nu_unf, nu_cor, gamma_err, log_half)
    return None if terms is None else _Candidate(nu_cor, gamma_err, terms)


def _inner_grid(fx, E, beta, theta, nu_unf, log_half, resolution=16, levels=8):
    """Grid-refine search over (ν_cor, γ_err).

    Each level scores an evenly spaced grid by the worst remaining slack in
    the three target terms and zooms in on the best cell.
    """
    lam = lambda_bound(theta, beta)
    q = fx.P_det * (1 - 2 * beta)
    nu_lo, nu_hi = 0.0, q / 2
    g_lo, g_hi = E, min(2 * E, lam)
    if g_hi <= g_lo:
        return None
    best = None
    for _ in range(levels):
        nus = np.linspace(nu_lo, nu_hi, resolution + 2)[1:-1]
        gs = np.linspace(g_lo, g_hi, resolution + 2)[1:-1]
        NU, G = np.meshgrid(nus, gs, indexing="ij")
        t1, t2 = cor_exponents(fx.P_det, beta, E, G, NU, fx.N)
        with np.errstate(invalid="ignore", divide="ignore"):
            f = unf_rate(fx.gamma_det, G, nu_unf, lam, beta, h_factor(beta, beta, theta))
        u2 = -fx.N * f
        score = np.minimum(np.minimum(log_half - t1, log_half - t2), log_half - u2)
        dlt = fx.gamma_det * G / (fx.gamma_det - nu_unf)
        admissible = (nu_unf < fx.gamma_det * (1 - G / lam)) & (
            beta < 0.5 * np.expm1(lam / 2 * (1 - dlt / lam) ** 2)
        )
        score = np.where(np.isfinite(score) & admissible, score, -np.inf)
        i, j = np.unravel_index(int(np.argmax(score)), score.shape)
        terms = _check_point(fx, E, beta, theta, nu_unf, float(NU[i, j]), float(G[i, j]), log_half)
        if terms is not None:
            best = _Candidate(float(NU[i, j]), float(G[i, j]), terms)
        dn, dg = (nu_hi - nu_lo) / (resolution + 1), (g_hi - g_lo) / (resolution + 1)
        nu_lo, nu_hi = max(nus[i] - 2 * dn, 0.0), min(nus[i] + 2 * dn, q / 2)
        g_lo, g_hi = max(gs[j] - 2 * dg, E), min(gs[j] + 2 * dg, min(2 * E, lam))
    return best


INNER_METHODS = {"boundary": _inner_boundary, "grid": _inner_grid}


def beta_max_point(
    fx: SweepFixed,
    theta_deg: float,
    E: float,
    target: float = 1e-9,
    inner: str = "boundary",
    iterations: int = 80,
    grid_resolution: int = 16,
) -> SweepPoint:
    """Largest common bias β = β_PS = β_PB meeting every target at (θ, E)."""
    if not 0 < target < 1:
        raise DomainError(f"target must lie in (0, 1), got {target}")
    theta = math.radians(theta_deg)
    check_angle(theta)
    log_half = math.log(target / 2)
    nu_unf = fx.nu_unf if fx.nu_unf is not None else default_nu_unf(fx.P_noqub, fx.N, target)
    u1 = noqubit_exponent(fx.P_noqub, nu_unf, fx.N)
    empty = SweepPoint(theta_deg, E, 0.0, None, None, nu_unf, None, None, u1, None)
    if u1 > log_half * (1 - 1e-9):
        empty.reason = "no-qubit term exceeds target/2 at the chosen nu_unf"
        return empty
    if rob_exponent(fx.P_det, fx.gamma_det, fx.N) > math.log(target):
        empty.reason = "robustness bound exceeds target"
        return empty
    solve = partial(_inner_grid, resolution=grid_resolution) if inner == "grid" else INNER_METHODS[inner]
    lo, hi = 0.0, 0.5
    best = solve(fx, E, lo, theta, nu_unf, log_half)
    if best is None:
        empty.reason = "infeasible even with unbiased preparation"
        return empty
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        cand = solve(fx, E, mid, theta, nu_unf, log_half)
        if cand is None:
            hi = mid
        else:
            lo, best = mid, cand
    t1, t2, u2 = best.terms
    return SweepPoint(theta_deg, E, lo, best.gamma_err, best.nu_cor, nu_unf, t1, t2, u1, u2)


def _point_job(args):
    return beta_max_point(*args[:4], **args[4])


def sweep_beta_max(
    fixed: SweepFixed = REFERENCE_FIXED,
    theta_deg_grid: Iterable[float] = REFERENCE_THETA_DEG,
    E_list: Iterable[float] = REFERENCE_E,
    target: float = 1e-9,
    inner: str = "boundary",
    jobs: int = 1,
    **options,
) -> list[SweepPoint]:
    """β_max over an (E, θ) grid, rows ordered by E then θ."""
    thetas, Es = list(theta_deg_grid), list(E_list)
    if not thetas or not Es:
        raise DomainError("sweep grids must be nonempty")
    if inner not in INNER_METHODS:
        raise DomainError(f"unknown inner method {inner!r}")
    tasks = [(fixed, th, E, target, dict(inner=inner, **options)) for E in Es for th in thetas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_point_job, tasks))
    return [_point_job(t) for t in tasks]


def refine_grid_sweep(fx, theta_deg, E, target=1e-9, start=8, rel_change=0.01, max_resolution=256):
    """Grid-refine β_max, doubling the inner resolution until it moves < ``rel_change``."""
    res = start
    prev = beta_max_point(fx, theta_deg, E, target, inner="grid", grid_resolution=res)
    while res < max_resolution:
        res *= 2
        cur = beta_max_point(fx, theta_deg, E, target, inner="grid", grid_resolution=res)
        if prev.beta_max > 0 and abs(cur.beta_max - prev.beta_max) <= rel_change * prev.beta_max:
            return cur
        prev = cur
    return prev
