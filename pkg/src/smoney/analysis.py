"""Parameter estimation from detection records.

All statistics are simple ratios of counters, so counting is a single
commutative pass and tables from separate chunks can be added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .photonics import PulseRecords

CELLS = ((0, 0), (1, 0), (0, 1), (1, 1))
INSUFFICIENT = "insufficient data"


def _cell_key(t: int, u: int) -> str:
    return f"{t}{u}"


@dataclass
class CountTable:
    """Counters indexed by (t, u): reported, same-basis, and same-basis errors."""

    N: int
    n_tu: dict = field(default_factory=lambda: dict.fromkeys(CELLS, 0))
    n_same_tu: dict = field(default_factory=lambda: dict.fromkeys(CELLS, 0))
    n_err_tu: dict = field(default_factory=lambda: dict.fromkeys(CELLS, 0))

    def __post_init__(self):
        for name in ("n_tu", "n_same_tu", "n_err_tu"):
            table = {tuple(map(int, k)) if not isinstance(k, tuple) else k: int(v)
                     for k, v in getattr(self, name).items()}
            if set(table) != set(CELLS):
                raise DomainError(f"{name} must have exactly the cells {CELLS}")
            setattr(self, name, table)
        for cell in CELLS:
            if self.n_err_tu[cell] > self.n_same_tu[cell]:
                raise DomainError(f"more errors than same-basis counts in cell {cell}")
        if self.n > self.N:
            raise DomainError("more reported pulses than transmitted")

    @property
    def n(self) -> int:
        return sum(self.n_tu.values())

    def __add__(self, other: "CountTable") -> "CountTable":
        return CountTable(
            self.N + other.N,
            {c: self.n_tu[c] + other.n_tu[c] for c in CELLS},
            {c: self.n_same_tu[c] + other.n_same_tu[c] for c in CELLS},
            {c: self.n_err_tu[c] + other.n_err_tu[c] for c in CELLS},
        )

    @classmethod
    def from_records(cls, rec: PulseRecords, all_pulses: bool = False) -> "CountTable":
        """Count reported pulses; ``all_pulses`` counts preparations of every pulse instead."""
        rep = rec.m == 1
        base = np.ones(len(rec), dtype=bool) if all_pulses else rep
        same = rep & (rec.w == rec.u)
        err = same & (rec.x != rec.t)
        n_tu, n_same, n_err = {}, {}, {}
        for t, u in CELLS:
            cell = (rec.t == t) & (rec.u == u)
            n_tu[(t, u)] = int(np.count_nonzero(base & cell))
            n_same[(t, u)] = int(np.count_nonzero(same & cell))
            n_err[(t, u)] = int(np.count_nonzero(err & cell))
        return cls(len(rec), n_tu, n_same, n_err)

    @classmethod
    def from_dict(cls, d: dict) -> "CountTable":
        def cells(block):
            return {(int(k[0]), int(k[1])): v for k, v in block.items()}

        return cls(int(d["N"]), cells(d["n_tu"]), cells(d["n_same_tu"]), cells(d["n_err_tu"]))

    def to_dict(self) -> dict:
        def cells(block):
            return {_cell_key(*c): v for c, v in block.items()}

        return {"N": self.N, "n": self.n, "n_tu": cells(self.n_tu),
                "n_same_tu": cells(self.n_same_tu), "n_err_tu": cells(self.n_err_tu)}


def _ratio(num: int, den: int):
    return num / den if den > 0 else None


def estimate_stats(data, all_pulses: bool = False) -> dict:
    """P_det, per-cell error rates, their maximum E, β_PB and β_PS.

    ``data`` is a :class:`CountTable` or :class:`PulseRecords`. With records,
    ``all_pulses`` takes the bias estimates from every prepared pulse rather
    than only the reported ones. A statistic whose denominator is empty is
    reported as None and named under ``insufficient``.
    """
    if isinstance(data, CountTable):
        table = prep = data
    else:
        table = CountTable.from_records(data)
        prep = CountTable.from_records(data, all_pulses=True) if all_pulses else table
    n, nt = table.n, prep.n_tu
    n_prep = prep.n
    missing = []
    E_tu = {}
    for cell in CELLS:
        E_tu[_cell_key(*cell)] = _ratio(table.n_err_tu[cell], table.n_same_tu[cell])
        if E_tu[_cell_key(*cell)] is None:
            missing.append(f"E_{_cell_key(*cell)}")
    E = None if missing else max(E_tu.values())
    basis0 = _ratio(nt[(0, 0)] + nt[(1, 0)], n_prep)
    beta_PB = None if basis0 is None else abs(basis0 - 0.5)
    bit0 = [_ratio(nt[(0, u)], nt[(0, u)] + nt[(1, u)]) for u in (0, 1)]
    beta_PS = None if None in bit0 else max(abs(p - 0.5) for p in bit0)
    for name, val in (("beta_PB", beta_PB), ("beta_PS", beta_PS), ("E", E)):
        if val is None:
            missing.append(name)
    return {
        "N": table.N,
        "n": n,
        "P_det": _ratio(n, table.N),
        "E_tu": E_tu,
        "E": E,
        "beta_PB": beta_PB,
        "beta_PS": beta_PS,
        "insufficient": sorted(set(missing)),
    }


def two_sig(value) -> str:
    """Format to two significant figures; None becomes the insufficient-data marker."""
    if value is None:
        return INSUFFICIENT
    if value == 0:
        return "0"
    return f"{value:.2g}" if 1e-3 <= abs(value) < 1e3 else f"{value:.1e}"


def report(stats: dict) -> str:
    """Human-readable two-significant-figure summary."""
    lines = [f"P_det = {two_sig(stats['P_det'])}  (n = {stats['n']}, N = {stats['N']})"]
    for cell, val in stats["E_tu"].items():
        lines.append(f"E_{cell} = {two_sig(val)}")
    lines.append(f"E = {two_sig(stats['E'])}")
    lines.append(f"beta_PB = {two_sig(stats['beta_PB'])}")
    lines.append(f"beta_PS = {two_sig(stats['beta_PS'])}")
    return "\n".join(lines)


def normal_band(p: float, trials: int, k: float = 4.0) -> float:
    """Half-width of a k-sigma normal-approximation band for a proportion."""
    return k * math.sqrt(max(p * (1 - p), 0.0) / trials)
