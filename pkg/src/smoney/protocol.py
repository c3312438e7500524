"""Executable token schemes on a 1+1-D spacetime.

Six schemes share one engine:

========  =====  =============  =====================
scheme    lossy  Alice's bases  presentation signals
========  =====  =============  =====================
IQT1      no     random         no
IQT2      no     all equal z    no
QT1       yes    random         no
QT2       yes    all equal z    no
QT1M      yes    random         yes (2^M points)
QT2M      yes    all equal z    yes (2^M points)
========  =====  =============  =====================

Agents A, B sit at the apex of the common causal past of the presentation
points; A_i, B_i sit at the spatial position of point Q_i. Classical
messages travel at light speed through an event queue, and every read made
by a validating agent is logged so causal properties can be audited from
the transcript alone.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .bounds import SchemeParams
from .errors import DomainError, StructuralError
from .photonics import DetectorModel, PrepConfig, SourceModel, simulate_pulses
from .spacetime import (
    CAUSAL_TOL,
    SpacetimePoint,
    arrival,
    causally_precedes,
    common_past_apex,
    intersection_past_contains,
)
from .qmath import within_threshold


@dataclass(frozen=True)
class SchemeTraits:
    ideal: bool
    fixed_basis: bool
    signals: bool


SCHEMES = {
    "IQT1": SchemeTraits(ideal=True, fixed_basis=False, signals=False),
    "IQT2": SchemeTraits(ideal=True, fixed_basis=True, signals=False),
    "QT1": SchemeTraits(ideal=False, fixed_basis=False, signals=False),
    "QT2": SchemeTraits(ideal=False, fixed_basis=True, signals=False),
    "QT1M": SchemeTraits(ideal=False, fixed_basis=False, signals=True),
    "QT2M": SchemeTraits(ideal=False, fixed_basis=True, signals=True),
}
ADVERSARIES = ("measure_once_replay", "random_second_token", "basis_guess")

# Spacing of successive stage-I and stage-II events before the apex.
_STEP_DT = 1e-3


def _bits_str(a) -> str:
    return "".join("1" if v else "0" for v in np.asarray(a).ravel())


def _parse_label(label, M: int) -> np.ndarray:
    if isinstance(label, int):
        label = format(label, f"0{M}b")
    if len(label) != M or set(label) - {"0", "1"}:
        raise StructuralError(f"presentation label {label!r} is not a {M}-bit string")
    return np.array([int(c) for c in label], dtype=np.int8)


# Primitive operations --------------------------------------------------------


def compute_delta(s, d_tilde) -> np.ndarray:
    """Positions (0-based) where the decoded basis string matches Bob's bases."""
    s, d_tilde = np.asarray(s), np.asarray(d_tilde)
    if s.shape != d_tilde.shape:
        raise DomainError(f"length mismatch: {s.shape} vs {d_tilde.shape}")
    return np.flatnonzero(s == d_tilde)


def validate_token(x_rounds, r_rounds, gamma_err: float, prior_presentation: bool = False) -> bool:
    """Accept iff no earlier presentation was signalled and every round is within budget.

    ``x_rounds`` and ``r_rounds`` are per-round strings already restricted to
    the matching positions.
    """
    if prior_presentation:
        return False
    for x, r in zip(x_rounds, r_rounds, strict=True):
        x, r = np.asarray(x), np.asarray(r)
        if x.shape != r.shape:
            raise DomainError("token and reference lengths differ")
        if not within_threshold(int(np.count_nonzero(x != r)), len(r), gamma_err):
            return False
    return True


# Transport -------------------------------------------------------------------


@dataclass
class Message:
    seq: int
    step: str
    stage: str
    sender: str
    receiver: str
    key: str
    payload: object
    send: SpacetimePoint
    recv: SpacetimePoint
    round: int | None = None
    uses_b: bool = False

    def as_dict(self) -> dict:
        return {
            "seq": self.seq, "step": self.step, "stage": self.stage,
            "sender": self.sender, "receiver": self.receiver, "key": self.key,
            "round": self.round, "uses_b": self.uses_b,
            "send": {"t": self.send.t, "x": self.send.x},
            "recv": {"t": self.recv.t, "x": self.recv.x},
            "payload": _jsonable(self.payload),
        }


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return _bits_str(obj) if obj.dtype == np.int8 or obj.dtype == bool else obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Network:
    """Light-speed message delivery between located agents."""

    def __init__(self, locations: Mapping[str, float]):
        self.locations = dict(locations)
        self.log: list[Message] = []
        self._pending: list = []
        self.inbox: dict[str, dict[str, Message]] = defaultdict(dict)

    def send(self, sender, receiver, key, payload, at: SpacetimePoint, step, stage,
             round=None, uses_b=False) -> Message:
        x = self.locations[receiver]
        recv = at if x == at.x else arrival(at, x)
        msg = Message(len(self.log), step, stage, sender, receiver, key, payload, at, recv, round, uses_b)
        self.log.append(msg)
        heapq.heappush(self._pending, (recv.t, msg.seq, msg))
        return msg

    def deliver_until(self, t: float) -> None:
        while self._pending and self._pending[0][0] <= t + CAUSAL_TOL:
            _, _, msg = heapq.heappop(self._pending)
            self.inbox[msg.receiver][msg.key] = msg

    def read(self, agent: str, key: str, reads: list[int]):
        msg = self.inbox[agent].get(key)
        if msg is None:
            return None
        reads.append(msg.seq)
        return msg.payload


# Transcript ------------------------------------------------------------------


@dataclass
class RoundState:
    t: np.ndarray
    u: np.ndarray
    Lambda: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: int
    d: np.ndarray | None
    r: np.ndarray
    s: np.ndarray
    c: int | None = None

    @property
    def n(self) -> int:
        return len(self.Lambda)

    @property
    def g(self) -> dict:
        """Numerical ordering of the reported labels."""
        return {int(k): j for j, k in enumerate(self.Lambda)}


@dataclass
class Decision:
    label: str
    point: SpacetimePoint
    accepted: bool
    blocked_by_signal: bool
    distances: list[int]
    delta_sizes: list[int]
    d_tilde: list[np.ndarray]
    reads: list[int]


@dataclass
class Transcript:
    scheme: str
    M: int
    N: int
    points: dict[str, SpacetimePoint]
    messages: list[Message]
    events: list[dict]
    rounds: list[RoundState]
    decisions: dict[str, Decision] = field(default_factory=dict)
    aborted: bool = False
    knowledge: dict[str, list[str]] = field(default_factory=dict)

    @property
    def accepted_labels(self) -> list[str]:
        return [k for k, d in self.decisions.items() if d.accepted]

    def to_jsonl(self) -> str:
        lines = [json.dumps(m.as_dict(), sort_keys=True) for m in self.messages]
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self) -> dict:
        return {
            "scheme": self.scheme, "M": self.M, "N": self.N, "aborted": self.aborted,
            "decisions": {
                k: {"accepted": d.accepted, "blocked_by_signal": d.blocked_by_signal,
                    "distances": d.distances, "delta_sizes": d.delta_sizes}
                for k, d in self.decisions.items()
            },
        }


# Alice's behaviour -----------------------------------------------------------


class Alice:
    """Honest Alice presenting at ``b``."""

    name = "honest"

    def __init__(self, b: str):
        self.b = b

    def commit_label(self) -> str:
        return self.b

    def axes(self, rng, y: np.ndarray) -> np.ndarray:
        """Bloch measurement axis per reported pulse."""
        return y * (np.pi / 2)

    def reported_bases(self, rng, y: np.ndarray) -> np.ndarray:
        return y

    def tokens(self, rng, rounds: list[RoundState]) -> dict[str, list[np.ndarray]]:
        return {self.b: [r.x for r in rounds]}


class _DoubleSpender(Alice):
    def __init__(self, v: str, w: str):
        super().__init__(v)
        self.w = w


class MeasureOnceReplay(_DoubleSpender):
    """Measure honestly, commit for v, present the same outcomes at v and w."""

    name = "measure_once_replay"

    def tokens(self, rng, rounds):
        xs = [r.x for r in rounds]
        return {self.b: xs, self.w: xs}


class RandomSecondToken(_DoubleSpender):
    """Honest token at v and a uniformly random string at w."""

    name = "random_second_token"

    def tokens(self, rng, rounds):
        return {self.b: [r.x for r in rounds],
                self.w: [rng.integers(0, 2, r.n, dtype=np.int8) for r in rounds]}


class BasisGuess(_DoubleSpender):
    """Measure every pulse on the axis midway between the two bases.

    The outcome then matches Bob's bit with probability cos²(π/8) whatever
    the preparation basis, and the same string is presented at v and w.
    """

    name = "basis_guess"

    def axes(self, rng, y):
        return np.full(len(y), np.pi / 4)

    def reported_bases(self, rng, y):
        return rng.integers(0, 2, len(y), dtype=np.int8)

    def tokens(self, rng, rounds):
        xs = [r.x for r in rounds]
        return {self.b: xs, self.w: xs}


_ADVERSARY_CLASSES = {c.name: c for c in (MeasureOnceReplay, RandomSecondToken, BasisGuess)}


# Engine ----------------------------------------------------------------------


def _check_geometry(scheme: str, M: int, points: Iterable[SpacetimePoint]) -> dict[str, SpacetimePoint]:
    traits = SCHEMES[scheme]
    if not traits.signals and M != 1:
        raise StructuralError(f"{scheme} has two presentation points; M must be 1")
    by_label = {}
    for p in points:
        _parse_label(p.label, M)
        if p.label in by_label:
            raise StructuralError(f"duplicate presentation label {p.label!r}")
        by_label[p.label] = p
    if len(by_label) != 2**M:
        raise StructuralError(f"{scheme} with M={M} needs {2**M} labeled points, got {len(by_label)}")
    coords = {p.coords for p in by_label.values()}
    if len(coords) != len(by_label):
        raise StructuralError("presentation points must be distinct events")
    return dict(sorted(by_label.items()))


class _Run:
    def __init__(self, scheme, params: SchemeParams, points, rng, channel):
        if scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {scheme!r}")
        self.scheme, self.traits, self.p, self.rng = scheme, SCHEMES[scheme], params, rng
        self.M = params.M
        self.points = _check_geometry(scheme, self.M, points)
        self.channel = channel or ("ideal" if self.traits.ideal else "bernoulli")
        if self.channel not in ("ideal", "bernoulli", "photonic"):
            raise DomainError(f"unknown channel {self.channel!r}")
        self.apex = common_past_apex(list(self.points.values()))
        locations = {"A": self.apex.x, "B": self.apex.x}
        for label, q in self.points.items():
            locations[f"A_{label}"] = q.x
            locations[f"B_{label}"] = q.x
        self.net = Network(locations)
        self.events: list[dict] = []
        self._clock = self.apex.t - 1.0

    # Helpers

    def _now(self) -> SpacetimePoint:
        self._clock += _STEP_DT
        if self._clock > self.apex.t:
            raise StructuralError("too many central steps to fit in the common causal past")
        return SpacetimePoint(self._clock, self.apex.x, "central")

    def _event(self, kind, agent, at, stage, round=None, uses_b=False):
        self.events.append({"kind": kind, "agent": agent, "t": at.t, "x": at.x, "stage": stage,
                            "round": round, "uses_b": uses_b, "seq": len(self.net.log)})

    def _broadcast(self, sender, prefix, key, payload, step, stage, round=None, uses_b=False):
        at = self._now()
        for label in self.points:
            self.net.send(sender, f"{prefix}_{label}", key, payload, at, step, stage, round, uses_b)

    # Quantum stage

    def _measure(self, alice: Alice, l: int) -> RoundState:
        p, rng, N = self.p, self.rng, self.p.N
        at = self._now()
        self._event("prepare_and_send_states", "B", at, "I", l)
        z = int(rng.random() >= 0.5 + p.beta_E)
        if self.channel == "photonic":
            if alice.name != "honest":
                raise DomainError("the photonic channel supports honest runs only")
            strategy = 2 if self.traits.fixed_basis else 1
            rec = simulate_pulses(
                SourceModel(p.mu), DetectorModel(p.eta, strategy=strategy),
                PrepConfig(p.beta_PS, p.beta_PB, p.theta, p.E, z=z),
                N, seed=int(rng.integers(2**63)),
            )
            t, u = rec.t, rec.u
            Lam = np.flatnonzero(rec.m == 1)
            y = rec.w[Lam].astype(np.int8)
            x = rec.x[Lam].astype(np.int8)
        else:
            t = (rng.random(N) >= 0.5 + p.beta_PS).astype(np.int8)
            u = (rng.random(N) >= 0.5 + p.beta_PB).astype(np.int8)
            tilt = rng.uniform(-p.theta, p.theta, N)
            if self.traits.ideal or self.channel == "ideal":
                Lam = np.arange(N)
            else:
                Lam = np.flatnonzero(rng.random(N) < p.P_det)
            n = len(Lam)
            if self.traits.fixed_basis:
                y = np.full(n, z, dtype=np.int8)
            else:
                y = rng.integers(0, 2, n, dtype=np.int8)
            axis = alice.axes(rng, y)
            polar = u[Lam] * (np.pi / 2) + t[Lam] * np.pi + tilt[Lam]
            x = (rng.random(n) >= np.cos((polar - axis) / 2) ** 2).astype(np.int8)
            if not self.traits.ideal and p.E > 0:
                same = np.isclose(axis, u[Lam] * (np.pi / 2))
                flip = same & (rng.random(n) < p.E)
                x = np.where(flip, 1 - x, x).astype(np.int8)
            y = alice.reported_bases(rng, y)
        self._event("measure", "A", self._now(), "I", l)
        return RoundState(t=t, u=u, Lambda=Lam, y=y, x=x, z=z, d=None, r=t[Lam], s=u[Lam])

    # Protocol

    def run(self, alice: Alice) -> Transcript:
        M, traits = self.M, self.traits
        rounds = []
        for l in range(M):
            rs = self._measure(alice, l)
            rounds.append(rs)
            if not traits.ideal:
                self.net.send("A", "B", f"Lambda/{l}", rs.Lambda, self._now(), "2", "I", l)
                self.net.send("A", "B", f"g/{l}", "numerical-ordering", self._now(), "3", "I", l)
            self._broadcast("A", "A", f"x/{l}", rs.x, "4", "I", l)
            if not traits.fixed_basis:
                rs.d = (rs.y ^ rs.z).astype(np.int8)
                self.net.send("A", "B", f"d/{l}", rs.d, self._now(), "5", "I", l)
                self._broadcast("B", "B", f"d/{l}", rs.d, "6", "I", l)
            self._broadcast("B", "B", f"rs/{l}", (rs.r, rs.s), "7", "I", l)

        self.net.deliver_until(self.apex.t)
        aborted = False
        if not traits.ideal:
            for l, rs in enumerate(rounds):
                lam = self.net.read("B", f"Lambda/{l}", [])
                if len(lam) < self.p.gamma_det * self.p.N:
                    aborted = True
            self._event("abort_check", "B", self._now(), "I")
        if aborted:
            return self._transcript(rounds, {}, aborted=True)

        # Stage II: b is consulted for the first time here.
        target = _parse_label(alice.commit_label(), M)
        self._event("choose_presentation_point", "A", self._now(), "II", uses_b=True)
        for l, rs in enumerate(rounds):
            rs.c = int(target[l] ^ rs.z)
            self.net.send("A", "B", f"c/{l}", rs.c, self._now(), "8", "II", l, uses_b=True)
        self.net.deliver_until(self._clock)
        for l, rs in enumerate(rounds):
            c = self.net.read("B", f"c/{l}", [])
            self._broadcast("B", "B", f"c/{l}", c, "9", "II", l)

        tokens = alice.tokens(self.rng, rounds)
        for label in tokens:
            if label not in self.points:
                raise StructuralError(f"no presentation point labeled {label!r}")
            self.net.send("A", f"A_{label}", "present", True, self._now(), "11", "II", uses_b=True)

        decisions = {}
        for label, q in sorted(self.points.items(), key=lambda kv: (kv[1].t, kv[0])):
            self.net.deliver_until(q.t)
            if label not in tokens:
                continue
            a_reads: list[int] = []
            if not self.net.read(f"A_{label}", "present", a_reads):
                raise StructuralError(f"A_{label} presents without instruction")
            for l in range(M):
                self.net.read(f"A_{label}", f"x/{l}", a_reads)
            self.net.send(f"A_{label}", f"B_{label}", "token", tokens[label], q, "11", "presentation")
            if traits.signals:
                for other, q2 in self.points.items():
                    if other != label and causally_precedes(q, q2):
                        self.net.send(f"B_{label}", f"B_{other}", f"presented/{label}", True, q, "12",
                                      "presentation")
            self.net.deliver_until(q.t)
            decisions[label] = self._decide(label, q, rounds)
        return self._transcript(rounds, decisions)

    def _decide(self, label: str, q: SpacetimePoint, rounds) -> Decision:
        agent, M = f"B_{label}", self.M
        bits = _parse_label(label, M)
        reads: list[int] = []
        token = self.net.read(agent, "token", reads)
        signalled = False
        if self.traits.signals:
            for other in self.points:
                if other != label and self.net.read(agent, f"presented/{other}", reads):
                    signalled = True
        dists, sizes, dts, xs, rs_ = [], [], [], [], []
        for l in range(M):
            r, s = self.net.read(agent, f"rs/{l}", reads)
            c = self.net.read(agent, f"c/{l}", reads)
            if self.traits.fixed_basis:
                d_tilde = np.full(len(s), bits[l] ^ c, dtype=np.int8)
            else:
                d = self.net.read(agent, f"d/{l}", reads)
                d_tilde = (d ^ bits[l] ^ c).astype(np.int8)
            delta = compute_delta(s, d_tilde)
            x = np.asarray(token[l])
            if len(x) != len(r):
                raise StructuralError("token length does not match the reported set")
            xs.append(x[delta])
            rs_.append(r[delta])
            dts.append(d_tilde)
            sizes.append(len(delta))
            dists.append(int(np.count_nonzero(x[delta] != r[delta])))
        gamma = 0.0 if self.traits.ideal else self.p.gamma_err
        accepted = validate_token(xs, rs_, gamma, prior_presentation=signalled)
        self._event("validate", agent, q, "presentation")
        return Decision(label, q, accepted, signalled, dists, sizes, dts, reads)

    def _transcript(self, rounds, decisions, aborted=False) -> Transcript:
        knowledge = {agent: sorted(box) for agent, box in self.net.inbox.items()}
        return Transcript(self.scheme, self.M, self.p.N, self.points, self.net.log, self.events,
                          rounds, decisions, aborted, knowledge)


def run_honest(scheme: str, params: SchemeParams, geometry: Iterable[SpacetimePoint],
               b, seed: int, channel: str | None = None) -> Transcript:
    """One honest run in which Alice presents her token at point ``b``."""
    rng = np.random.default_rng(seed)
    b = _bits_str(_parse_label(b, params.M))
    return _Run(scheme, params, list(geometry), rng, channel).run(Alice(b))


def make_adversary(name: str, v: str, w: str) -> Alice:
    try:
        return _ADVERSARY_CLASSES[name](v, w)
    except KeyError:
        raise DomainError(f"unknown adversary {name!r}; choose from {ADVERSARIES}") from None


@dataclass
class DoubleSpendRecord:
    adversary: str
    scheme: str
    target_pair: tuple[str, str]
    trials: int
    successes: np.ndarray
    aborts: int
    first_delta_sizes: np.ndarray
    first_accepted: np.ndarray
    second_delta_sizes: np.ndarray
    causal_ok: bool

    @property
    def rate(self) -> float:
        return float(self.successes.mean()) if self.trials else 0.0

    @property
    def sigma(self) -> float:
        p = self.rate
        return math.sqrt(max(p * (1 - p), 0.0) / max(self.trials, 1))

    def summary(self) -> dict:
        return {"adversary": self.adversary, "scheme": self.scheme,
                "target_pair": list(self.target_pair), "trials": self.trials,
                "successes": int(self.successes.sum()), "rate": self.rate,
                "sigma": self.sigma, "aborts": self.aborts, "causal_ok": self.causal_ok}


def run_double_spend(adversary: str, scheme: str, params: SchemeParams,
                     geometry: Iterable[SpacetimePoint], target_pair, seed: int,
                     trials: int = 1, channel: str | None = None) -> DoubleSpendRecord:
    """Repeat a scripted double-spending attempt; success means both tokens accepted."""
    v, w = (_bits_str(_parse_label(lbl, params.M)) for lbl in target_pair)
    if v == w:
        raise DomainError("target pair must name two different points")
    alice = make_adversary(adversary, v, w)
    geometry = list(geometry)
    ok = np.zeros(trials, dtype=bool)
    first_ok = np.zeros(trials, dtype=bool)
    sizes_v = np.zeros(trials, dtype=np.int64)
    sizes_w = np.zeros(trials, dtype=np.int64)
    aborts, causal_ok = 0, True
    for i in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        tr = _Run(scheme, params, geometry, rng, channel).run(alice)
        if tr.aborted:
            aborts += 1
            continue
        causal_ok &= check_instant_validation(tr) and check_causal_delivery(tr)
        dv, dw = tr.decisions[v], tr.decisions[w]
        ok[i] = dv.accepted and dw.accepted
        first_ok[i] = dv.accepted
        sizes_v[i], sizes_w[i] = dv.delta_sizes[0], dw.delta_sizes[0]
    return DoubleSpendRecord(adversary, scheme, (v, w), trials, ok, aborts,
                             sizes_v, first_ok, sizes_w, causal_ok)


# Audits ----------------------------------------------------------------------


def check_instant_validation(tr: Transcript) -> bool:
    """Every message read for a decision at Q_b was received in the causal past of Q_b."""
    for d in tr.decisions.values():
        for seq in d.reads:
            m = tr.messages[seq]
            if not (causally_precedes(m.recv, d.point) and causally_precedes(m.send, d.point)):
                return False
    return True


def check_causal_delivery(tr: Transcript) -> bool:
    """Deliveries respect light cones and stage-I sends lie in the common causal past."""
    pts = list(tr.points.values())
    for m in tr.messages:
        if not causally_precedes(m.send, m.recv):
            return False
        if m.stage == "I" and not intersection_past_contains(m.send, pts):
            return False
    return True


def flexibility_check(tr: Transcript) -> bool:
    """The presentation choice is first used after every stage-I event."""
    stamps = [(e["seq"], e["t"], e["stage"], e["uses_b"]) for e in tr.events]
    stamps += [(m.seq, m.send.t, m.stage, m.uses_b) for m in tr.messages]
    stage_one = [(s, t) for s, t, stage, _ in stamps if stage == "I"]
    uses_b = [(s, t) for s, t, _, used in stamps if used]
    if not uses_b:
        return True
    first_seq = min(s for s, _ in uses_b)
    first_t = min(t for _, t in uses_b)
    return all(s <= first_seq and t <= first_t + CAUSAL_TOL for s, t in stage_one) and not any(
        used for _, _, stage, used in stamps if stage == "I"
    )
