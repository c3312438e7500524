"""Command-line entry point: ``smoney <subcommand> ...``.

Exit codes: 0 success, 1 I/O or configuration error, 2 violated constraint,
64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, bounds, oracle, photonics, protocol
from .errors import CapabilityError, PreconditionError, StructuralError
from .spacetime import load_points

EXIT_OK, EXIT_IO, EXIT_CONSTRAINT, EXIT_USAGE = 0, 1, 2, 64


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# Config handling ---------------------------------------------------------


def load_config(ref: str) -> dict:
    """Read a JSON config from a path, falling back to a packaged preset name."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        name = path.name if path.suffix == ".json" else f"{path.name}.json"
        preset = resources.files("smoney") / "presets" / name
        if not preset.is_file():
            raise ConfigError(f"config {ref!r} not found (no file and no preset of that name)")
        text = preset.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{ref}: invalid JSON: {exc}") from exc


def _angle(block: dict) -> float:
    if "theta_deg" in block:
        return math.radians(block["theta_deg"])
    return float(block.get("theta", 0.0))


def params_from(block: dict) -> bounds.SchemeParams:
    fields = {k: v for k, v in block.items() if k not in ("theta", "theta_deg")}
    try:
        return bounds.SchemeParams(theta=_angle(block), **fields)
    except TypeError as exc:
        raise ConfigError(f"bad params block: {exc}") from exc


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SMONEY_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"SMONEY_SEED must be an integer, got {env!r}") from None


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# Subcommands ---------------------------------------------------------------


def cmd_bounds(args) -> int:
    cfg = load_config(args.config)
    p = params_from(cfg["params"])
    free = cfg.get("free", {})
    try:
        v = bounds.FreeVariables(float(free["nu_cor"]), float(free["nu_unf"]))
    except KeyError as exc:
        raise ConfigError(f"free block needs {exc}") from None
    if args.validate_only:
        return EXIT_OK
    report = bounds.evaluate(p, v, C=args.C)
    _dump(report.to_dict(), args.out)
    if report.violations:
        for c in report.violations:
            print(f"constraint violated: {c.name} (margin {c.margin:.6g})", file=sys.stderr)
        return EXIT_CONSTRAINT
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.config:
        cfg = load_config(args.config).get("sweep", {})
        fixed = bounds.SweepFixed(**cfg.get("fixed", {})) if "fixed" in cfg else bounds.REFERENCE_FIXED
        thetas = cfg.get("theta_deg", bounds.REFERENCE_THETA_DEG)
        Es = cfg.get("E", bounds.REFERENCE_E)
    elif args.fig2:
        fixed, thetas, Es = bounds.REFERENCE_FIXED, bounds.REFERENCE_THETA_DEG, bounds.REFERENCE_E
    else:
        raise ConfigError("sweep needs --fig2 or --config")
    if args.theta_deg:
        thetas = _floats(args.theta_deg)
    if args.E:
        Es = _floats(args.E)
    if args.validate_only:
        return EXIT_OK
    points = bounds.sweep_beta_max(fixed, thetas, Es, args.target, inner=args.inner, jobs=args.jobs)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(bounds.SweepPoint.CSV_COLUMNS)
        for pt in points:
            writer.writerow(pt.row())
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.ideal:
        spec = oracle.ideal_bb84(args.N)
    else:
        rng = np.random.default_rng(_seed(args))
        spec = oracle.random_spec(rng, args.N, math.radians(args.theta_deg), args.beta_PB)
    if args.validate_only:
        return EXIT_OK
    res = oracle.max_norm_exact(spec, args.gamma_err, exhaustive=args.exhaustive, jobs=args.jobs)
    text = res.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _photonic_models(cfg: dict, strategy: int | None):
    src = photonics.SourceModel(**cfg.get("source", {"mu": cfg["params"]["mu"]}))
    det_cfg = dict(cfg.get("detectors", {"eta": cfg["params"]["eta"]}))
    if strategy is not None:
        det_cfg["strategy"] = strategy
    det = photonics.DetectorModel(**det_cfg)
    prep_cfg = dict(cfg.get("prep", {}))
    theta = _angle(prep_cfg)
    prep_cfg.pop("theta_deg", None)
    prep_cfg["theta"] = theta
    return src, det, photonics.PrepConfig(**prep_cfg)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    src, det, prep = _photonic_models(cfg, args.strategy)
    N = int(args.N if args.N is not None else cfg.get("simulate", {}).get("N", 10**6))
    if args.validate_only:
        return EXIT_OK
    if not args.out:
        raise ConfigError("simulate needs --out for the record file")
    rec = photonics.simulate_pulses(src, det, prep, N, _seed(args), jobs=args.jobs)
    rec.write_csv(args.out)
    m = int(rec.m.sum())
    print(json.dumps({"N": N, "n": m, "P_det": m / N,
                      "P_det_theory": photonics.p_det_theory(src.mu, det.eta)}, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    if bool(args.records) == bool(args.config):
        raise ConfigError("analyze needs exactly one of --records or --config")
    if args.records:
        data = photonics.PulseRecords.read_csv(args.records)
    else:
        cfg = load_config(args.config)
        if "counts" not in cfg:
            raise ConfigError(f"{args.config} has no counts block")
        data = analysis.CountTable.from_dict(cfg["counts"])
    if args.validate_only:
        return EXIT_OK
    stats = analysis.estimate_stats(data, all_pulses=args.all_pulses)
    if args.text:
        print(analysis.report(stats))
    if args.out or not args.text:
        _dump(stats, args.out)
    return EXIT_OK


def cmd_protocol(args) -> int:
    cfg = load_config(args.config)
    try:
        scheme = cfg["scheme"]
        p = params_from(cfg["params"])
        points = load_points(cfg["geometry"])
    except KeyError as exc:
        raise ConfigError(f"run config needs {exc}") from None
    seed = int(cfg["seed"]) if "seed" in cfg and args.seed is None else _seed(args)
    trials = int(cfg.get("trials", 1))
    channel = cfg.get("channel")
    adversary = cfg.get("adversary")
    if adversary not in (None, "honest") and "target_pair" not in cfg:
        raise ConfigError("an adversarial run needs target_pair")
    if args.validate_only:
        protocol._check_geometry(scheme, p.M, points)
        return EXIT_OK
    if adversary in (None, "honest"):
        b = str(cfg.get("b", points[0].label))
        accepted, aborted, causal, first = 0, 0, True, None
        for i in range(trials):
            tr = protocol.run_honest(scheme, p, points, b, seed + i, channel)
            first = first or tr
            aborted += tr.aborted
            accepted += tr.accepted_labels == [b]
            causal &= protocol.check_instant_validation(tr) and protocol.check_causal_delivery(tr)
        summary = {"scheme": scheme, "adversary": "honest", "trials": trials,
                   "accepted": accepted, "aborted": aborted, "causal_ok": causal, "first_run": first.summary()}
        transcript = first
    else:
        rec = protocol.run_double_spend(adversary, scheme, p, points, cfg["target_pair"], seed,
                                        trials, channel)
        summary = rec.summary()
        transcript = None
    if args.transcript:
        if transcript is None:
            raise ConfigError("transcripts are written for honest runs only")
        Path(args.transcript).write_text(transcript.to_jsonl())
    _dump(summary, args.out)
    return EXIT_OK


# Wiring ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smoney", description="Quantum token schemes: security bounds, bias sweeps, exact oracle checks, "
                     "photonic simulation, record analysis and protocol runs.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, jobs=False):
        sp.add_argument("--validate-only", action="store_true", help="check inputs and exit")
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (default: $SMONEY_SEED or 0)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = sub.add_parser("bounds", help="evaluate every security bound for a config")
    sp.add_argument("--config", required=True, help="JSON file or preset name")
    sp.add_argument("--C", type=int, default=None, help="spacelike presentation pairs")
    common(sp)
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("sweep", help="largest tolerable bias over a (theta, E) grid")
    sp.add_argument("--fig2", action="store_true", help="the reference grid and fixed values")
    sp.add_argument("--config", help="JSON with a sweep block")
    sp.add_argument("--target", type=float, default=1e-9)
    sp.add_argument("--inner", choices=sorted(bounds.INNER_METHODS), default="boundary")
    sp.add_argument("--theta-deg", help="comma-separated angles in degrees")
    sp.add_argument("--E", help="comma-separated error rates")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("oracle", help="exact operator-norm check on small instances")
    sp.add_argument("--ideal", action="store_true", help="ideal BB84 preparation")
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--gamma-err", type=float, default=0.0)
    sp.add_argument("--theta-deg", type=float, default=0.0)
    sp.add_argument("--beta-PB", type=float, default=0.0)
    sp.add_argument("--exhaustive", action="store_true", help="skip symmetry reduction")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("simulate", help="Monte Carlo pulse records")
    sp.add_argument("--config", default="paper-experiment")
    sp.add_argument("--N", type=int, default=None)
    sp.add_argument("--strategy", type=int, choices=(1, 2), default=None)
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="estimate parameters from records or counts")
    sp.add_argument("--records", help="CSV record file (.gz allowed)")
    sp.add_argument("--config", help="JSON with a counts block, or preset name")
    sp.add_argument("--all-pulses", action="store_true", help="bias estimates over every pulse")
    sp.add_argument("--text", action="store_true", help="two-significant-figure report")
    common(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("protocol", help="run honest or double-spending protocol trials")
    sp.add_argument("--config", required=True, help="run config JSON")
    sp.add_argument("--transcript", help="write the first honest run as JSON lines")
    common(sp)
    sp.set_defaults(func=cmd_protocol)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PreconditionError as exc:
        print(f"constraint violated: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (ConfigError, StructuralError, CapabilityError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
