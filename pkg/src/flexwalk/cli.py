"""Command-line front end: ``flexwalk <command> [--config PATH] [--out DIR] ...``.

Exit status is 0 on success, 1 when a run stops on a controlled error (a
JSON diagnostic goes to stderr) and 2 for configuration errors, which name
the offending key.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, tube
from .centroidal import DegenerateContactError, DomainError, SystemMatrices
from .config import ConfigError, ScenarioConfig, load
from .flex import DeflectionRangeError, GimbalSingularityError
from .gait_mpc import MarginTooLargeError, PlannerInfeasibleError, StalePlanError
from .identification import IdentificationFailedError, StaticTraceError, run_identification
from .scenario import ScenarioError, run_scenario
from .sim import NoContactError, SimTrace, SimulationBlowUpError, error_duration_profile
from .wholebody import DistributionInfeasibleError, InfeasibleSwingError

WALK_KINDS = ("walk-in-place", "quasi-static", "dynamic-walk", "stop")

CONTROLLED = (ScenarioError, IdentificationFailedError, StaticTraceError, PlannerInfeasibleError,
              MarginTooLargeError, StalePlanError, SimulationBlowUpError, NoContactError,
              DistributionInfeasibleError, InfeasibleSwingError, DeflectionRangeError, GimbalSingularityError,
              DomainError, DegenerateContactError, tube.InstabilityError, tube.SeriesConvergenceError,
              tube.GainInitializationError, tube.SaturationInfeasibleError)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexwalk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flexwalk {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML scenario file (defaults when omitted)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="override scenario.seed")
    common.add_argument("--estimator", type=_on_off, metavar="on|off", help="override scenario.estimator")
    common.add_argument("--mpc", type=_on_off, metavar="on|off", help="override scenario.mpc")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("walk", parents=[common], help="closed-loop walking scenario -> trace.csv, summary.json")
    sub.add_parser("identify-stiffness", parents=[common],
                   help="static stance experiments -> stiffness.json, error_surface.csv")
    sub.add_parser("tune-gain", parents=[common], help="tube gain minimizing the VRP bound -> gain.json")
    sub.add_parser("mrpi", parents=[common], help="tube bounds of mrpi.K -> mrpi.json")
    prof = sub.add_parser("profile", parents=[common], help="error-duration curve -> profile.csv")
    prof.add_argument("--trace", type=Path, help="existing trace.csv (runs the walk when omitted)")
    return parser


def _config(args) -> ScenarioConfig:
    cfg = load(args.config) if args.config is not None else ScenarioConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.estimator is not None:
        overrides["estimator"] = args.estimator
    if args.mpc is not None:
        overrides["mpc"] = args.mpc
    return cfg.replace(scenario=overrides) if overrides else cfg


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_plain) + "\n"


def _walk_config(cfg: ScenarioConfig) -> ScenarioConfig:
    if cfg.scenario.kind not in WALK_KINDS:
        raise ConfigError("scenario.kind", f"walk needs one of {', '.join(WALK_KINDS)}")
    return cfg


def _system(cfg: ScenarioConfig) -> SystemMatrices:
    return SystemMatrices.from_height(cfg.controller.T, cfg.plant.com_height, cfg.plant.gravity)


def cmd_walk(cfg, args) -> dict:
    res = run_scenario(_walk_config(cfg))
    _write(args.out / "trace.csv", res.trace.to_csv())
    summary = res.trace.summary()
    _write(args.out / "summary.json", _json(summary))
    return summary


def cmd_identify(cfg, args) -> dict:
    res = run_identification(cfg)
    _write(args.out / "stiffness.json", _json(res.summary()))
    rows = [["k_left", "k_right", "error_left_stance", "error_right_stance"], ["N*m/rad", "N*m/rad", "m", "m"]]
    for i, kl in enumerate(res.k_left_grid):
        for j, kr in enumerate(res.k_right_grid):
            rows.append([repr(float(kl)), repr(float(kr)), repr(float(res.errors["left"][i, j])),
                         repr(float(res.errors["right"][i, j]))])
    _write(args.out / "error_surface.csv", "".join(",".join(r) + "\n" for r in rows))
    return res.summary()


def _tuned_gain(cfg, sys_) -> tube.TubeGain:
    # optimized per unit disturbance, the same gain the walking scenarios use
    tol = cfg.controller.tail_tol
    unit = tube.optimize_gain(sys_, 1.0, tail_tol=tol)
    return tube.make_gain(unit.K, sys_, cfg.mrpi.d_max, tol, history=unit.history)


def cmd_tune(cfg, args) -> dict:
    g = _tuned_gain(cfg, _system(cfg))
    out = g.to_dict()
    out["iterations"] = len(g.history)
    _write(args.out / "gain.json", _json(out))
    return out


def cmd_mrpi(cfg, args) -> dict:
    sys_ = _system(cfg)
    if cfg.mrpi.K is None:
        g = _tuned_gain(cfg, sys_)
    else:
        g = tube.make_gain(np.asarray(cfg.mrpi.K, float), sys_, cfg.mrpi.d_max, cfg.controller.tail_tol)
    out = g.to_dict()
    _write(args.out / "mrpi.json", _json(out))
    return out


def cmd_profile(cfg, args) -> dict:
    if args.trace is not None:
        if not args.trace.is_file():
            raise ConfigError("--trace", f"no such file {args.trace}")
        trace = SimTrace.from_csv(args.trace.read_text())
    else:
        trace = run_scenario(_walk_config(cfg)).trace
    frac, bound = error_duration_profile(trace.cop_error())
    buf = [["fraction", "error_bound"], ["-", "m"]]
    buf += [[repr(float(f)), repr(float(b))] for f, b in zip(frac, bound)]
    path = args.out / "profile.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(buf)
    return {"samples": len(frac), "median": float(np.median(bound))}


COMMANDS = {"walk": cmd_walk, "identify-stiffness": cmd_identify, "tune-gain": cmd_tune, "mrpi": cmd_mrpi,
            "profile": cmd_profile}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return 2
    except CONTROLLED as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("t", "closest", "distance"):
            if hasattr(exc, attr):
                diag[attr] = getattr(exc, attr)
        print(json.dumps(diag, default=_plain), file=sys.stderr)
        return 1
    print(_json(result), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
