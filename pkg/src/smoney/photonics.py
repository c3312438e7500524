"""Statistical model of the photonic setup.

A phase-randomized weak coherent source emits Poissonian photon numbers.
Alice's threshold detectors have a common efficiency and per-arm dark-count
probabilities. Two reporting strategies turn clicks into reported
measurements:

* strategy 1: a 50:50 splitter chooses the basis per photon; Alice reports
  when at least one detector of exactly one basis clicks.
* strategy 2: Alice measures every pulse in one basis and reports when
  either detector clicks.

Simulation is vectorized in fixed-size chunks, each drawing from its own
random stream keyed by (seed, chunk index), so output does not depend on
how chunks are scheduled across workers.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError
from .qmath import check_angle, check_bias

ARMS = ("D0", "D1", "Dp", "Dm")
MAX_PHOTONS = 50
CHUNK = 1 << 16
RECORD_SCHEMA = "smoney-pulses/1"
RECORD_COLUMNS = ("k", "t", "u", "L", "click_D0", "click_D1", "click_Dp", "click_Dm", "m", "w", "x")


@dataclass(frozen=True)
class SourceModel:
    mu: float
    phase_randomized: bool = True

    def __post_init__(self):
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise DomainError(f"mean photon number must be >= 0, got {self.mu}")


@dataclass(frozen=True)
class DetectorModel:
    """Threshold detectors with common efficiency ``eta``.

    ``dark`` maps arm labels D0, D1, Dp, Dm to dark-count probabilities.
    Strategy 1 needs the two bases to have equal no-dark-count probability.
    """

    eta: float
    dark: dict = field(default_factory=lambda: dict.fromkeys(ARMS, 0.0))
    strategy: int = 1

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise DomainError(f"eta={self.eta} outside (0, 1]")
        dark = {arm: float(self.dark.get(arm, 0.0)) for arm in ARMS}
        if any(not 0 <= d < 1 for d in dark.values()):
            raise DomainError(f"dark-count probabilities must lie in [0, 1): {dark}")
        if self.strategy not in (1, 2):
            raise DomainError(f"strategy must be 1 or 2, got {self.strategy}")
        if self.strategy == 1:
            z = (1 - dark["D0"]) * (1 - dark["D1"])
            x = (1 - dark["Dp"]) * (1 - dark["Dm"])
            if abs(z - x) > 1e-12:
                raise DomainError("strategy 1 needs (1-d0)(1-d1) = (1-d+)(1-d-)")
        object.__setattr__(self, "dark", dark)

    @property
    def dark_array(self) -> np.ndarray:
        return np.array([self.dark[a] for a in ARMS])


@dataclass(frozen=True)
class PrepConfig:
    """Bob's preparation imperfections and the injected outcome error rate.

    Bit t and basis u are 0 with probability ½ + β_PS and ½ + β_PB. Each
    pulse's basis is tilted by an angle drawn from ``tilt`` over [−θ, θ]
    ("uniform", or "worst" to always tilt by +θ).
    """

    beta_PS: float = 0.0
    beta_PB: float = 0.0
    theta: float = 0.0
    error_rate: float = 0.0
    tilt: str = "uniform"
    z: int = 0

    def __post_init__(self):
        check_bias(self.beta_PS, "beta_PS")
        check_bias(self.beta_PB, "beta_PB")
        check_angle(self.theta)
        if not 0 <= self.error_rate < 1:
            raise DomainError(f"error_rate={self.error_rate} outside [0, 1)")
        if self.tilt not in ("uniform", "worst"):
            raise DomainError(f"tilt must be 'uniform' or 'worst', got {self.tilt!r}")
        if self.z not in (0, 1):
            raise DomainError("strategy-2 basis z must be 0 or 1")


def p_noqub(mu: float) -> float:
    """Probability that a pulse carries two or more photons."""
    if mu < 0:
        raise DomainError("mu must be nonnegative")
    return -math.expm1(-mu) - mu * math.exp(-mu)


def p_det_theory(mu: float, eta: float) -> float:
    """Reporting probability under strategy 1 without dark counts."""
    if mu < 0 or not 0 <= eta <= 1:
        raise DomainError("need mu >= 0 and eta in [0, 1]")
    return 2 * (math.exp(-mu * eta / 2) - math.exp(-mu * eta))


def g1(m: int, w: int, d0: float, d1: float, eta: float, a: int) -> float:
    """Strategy-1 probability of report m and basis w for an a-photon pulse."""
    _check_g_args(d0, d1, eta, a)
    quiet = (1 - d0) * (1 - d1)
    one_basis = quiet * (1 - eta / 2) ** a - quiet**2 * (1 - eta) ** a
    if m == 1 and w in (0, 1):
        return one_basis
    if m == 0 and w == 0:
        return 1 - 2 * one_basis
    if m == 0 and w == 1:
        return 0.0
    raise DomainError(f"invalid (m, w) = ({m}, {w})")


def g2(m: int, d0: float, d1: float, eta: float, a: int) -> float:
    """Strategy-2 probability of report m for an a-photon pulse."""
    _check_g_args(d0, d1, eta, a)
    silent = (1 - d0) * (1 - d1) * (1 - eta) ** a
    if m == 0:
        return silent
    if m == 1:
        return 1 - silent
    raise DomainError(f"invalid m = {m}")


def _check_g_args(d0, d1, eta, a):
    if a < 0 or int(a) != a:
        raise DomainError("photon number must be a nonnegative integer")
    if not (0 <= d0 < 1 and 0 <= d1 < 1 and 0 <= eta <= 1):
        raise DomainError("dark counts must lie in [0, 1) and eta in [0, 1]")


# Monte Carlo ---------------------------------------------------------------


def _detect(rng, photons, polar, detectors: DetectorModel, z):
    """Click pattern for pulses of ``photons[i]`` photons at Bloch angle ``polar``.

    ``polar`` is per pulse, or per (pulse, photon) for adversarial inputs.
    Returns an (n, 4) boolean array in ARMS order.
    """
    n = len(photons)
    detected = np.zeros((n, 4), dtype=bool)
    top = int(photons.max()) if n else 0
    polar = np.asarray(polar, dtype=float)
    for j in range(top):
        live = photons > j
        angle = polar[:, j] if polar.ndim == 2 else polar
        if detectors.strategy == 1:
            basis = rng.random(n) < 0.5
        else:
            basis = np.full(n, bool(z))
        # Born rule: outcome 0 in basis v has probability cos²((α − vπ/2)/2).
        p_zero = np.cos((angle - basis * (np.pi / 2)) / 2) ** 2
        outcome = rng.random(n) >= p_zero
        hit = live & (rng.random(n) < detectors.eta)
        arm = 2 * basis + outcome
        detected[np.nonzero(hit)[0], arm[hit]] = True
    dark = rng.random((n, 4)) < detectors.dark_array
    if detectors.strategy == 2:
        # Only the two detectors of the measured basis exist.
        dark[:, 2 * (1 - z): 2 * (1 - z) + 2] = False
    return detected | dark


def _report(rng, clicks, detectors: DetectorModel, z):
    """Map clicks to (m, w, raw outcome); outcome is −1 when nothing is reported."""
    n = len(clicks)
    first, second = clicks[:, 0] | clicks[:, 1], clicks[:, 2] | clicks[:, 3]
    if detectors.strategy == 1:
        m = first ^ second
        w = np.where(m & second, 1, 0)
    else:
        m = first if z == 0 else second
        w = np.where(m, z, 0)
    lo = clicks[np.arange(n), 2 * w]
    hi = clicks[np.arange(n), 2 * w + 1]
    coin = rng.random(n) < 0.5
    x = np.where(lo & hi, coin.astype(int), np.where(hi, 1, 0))
    return m.astype(np.int8), w.astype(np.int8), np.where(m, x, -1).astype(np.int8)


def sample_reports(a: int, detectors: DetectorModel, trials: int, seed: int,
                   polar=0.0, z: int = 0):
    """(m, w) samples for pulses of exactly ``a`` photons.

    ``polar`` is one Bloch angle for every photon, or a sequence of ``a``
    angles chosen per photon (a multi-photon probe by Bob).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, a]))
    photons = np.full(trials, a)
    polar = np.asarray(polar, dtype=float)
    if polar.ndim == 1:
        polar = np.broadcast_to(polar, (trials, a))
    clicks = _detect(rng, photons, polar, detectors, z)
    m, w, _ = _report(rng, clicks, detectors, z)
    return m, w


@dataclass
class PulseRecords:
    """Column-oriented per-pulse ground truth and observations."""

    t: np.ndarray
    u: np.ndarray
    L: np.ndarray
    clicks: np.ndarray
    m: np.ndarray
    w: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def in_Lambda(self) -> np.ndarray:
        return self.m == 1

    def __iter__(self):
        for k in range(len(self)):
            yield {
                "k": k, "t": int(self.t[k]), "u": int(self.u[k]), "L": int(self.L[k]),
                "clicks": dict(zip(ARMS, map(bool, self.clicks[k]))),
                "m": int(self.m[k]), "w": int(self.w[k]),
                "x": None if self.x[k] < 0 else int(self.x[k]),
                "in_Lambda": bool(self.m[k]),
            }

    @classmethod
    def concat(cls, parts: list["PulseRecords"]) -> "PulseRecords":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("t", "u", "L", "clicks", "m", "w", "x")))

    def write_csv(self, path) -> None:
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wt", newline="") as fh:
            fh.write(f"# schema: {RECORD_SCHEMA}\n")
            writer = csv.writer(fh)
            writer.writerow(RECORD_COLUMNS)
            cols = np.column_stack([self.k, self.t, self.u, self.L, self.clicks.astype(int),
                                    self.m, self.w, self.x])
            for row in cols:
                out = [str(v) for v in row]
                if row[-1] < 0:
                    out[-1] = ""
                writer.writerow(out)

    @classmethod
    def read_csv(cls, path) -> "PulseRecords":
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt") as fh:
            text = fh.read()
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# schema:"):
            raise DomainError(f"{path}: missing schema comment line")
        schema = lines[0].split(":", 1)[1].strip()
        if schema != RECORD_SCHEMA:
            raise DomainError(f"{path}: unsupported schema {schema!r}")
        reader = csv.reader(io.StringIO("\n".join(lines[1:])))
        header = next(reader)
        if tuple(header) != RECORD_COLUMNS:
            raise DomainError(f"{path}: unexpected columns {header}")
        rows = [[int(v) if v != "" else -1 for v in row] for row in reader if row]
        arr = np.array(rows, dtype=np.int64).reshape(-1, len(RECORD_COLUMNS))
        return cls(
            t=arr[:, 1].astype(np.int8), u=arr[:, 2].astype(np.int8), L=arr[:, 3],
            clicks=arr[:, 4:8].astype(bool), m=arr[:, 8].astype(np.int8),
            w=arr[:, 9].astype(np.int8), x=arr[:, 10].astype(np.int8),
        )


def _simulate_chunk(args) -> PulseRecords:
    source, detectors, prep, seed, index, size = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    t = (rng.random(size) >= 0.5 + prep.beta_PS).astype(np.int8)
    u = (rng.random(size) >= 0.5 + prep.beta_PB).astype(np.int8)
    L = np.minimum(rng.poisson(source.mu, size), MAX_PHOTONS)
    if prep.tilt == "uniform":
        tilt = rng.uniform(-prep.theta, prep.theta, size)
    else:
        tilt = np.full(size, prep.theta)
    polar = u * (np.pi / 2) + t * np.pi + tilt
    clicks = _detect(rng, L, polar, detectors, prep.z)
    m, w, x = _report(rng, clicks, detectors, prep.z)
    flip = (rng.random(size) < prep.error_rate) & (m == 1) & (w == u)
    x = np.where(flip, 1 - x, x).astype(np.int8)
    return PulseRecords(t, u, L, clicks, m, w, x)


def simulate_pulses(source: SourceModel, detectors: DetectorModel, prep: PrepConfig,
                    N: int, seed: int, jobs: int = 1) -> PulseRecords:
    """Simulate ``N`` pulses; identical seeds give identical records."""
    if N < 1:
        raise DomainError("N must be >= 1")
    tasks = [(source, detectors, prep, seed, i, min(CHUNK, N - start))
             for i, start in enumerate(range(0, N, CHUNK))]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_simulate_chunk, tasks))
    else:
        parts = [_simulate_chunk(t) for t in tasks]
    return PulseRecords.concat(parts)
