"""Command-line entry point: ``verify``, ``rates`` and ``lemmas``.

Exit codes: 0 success, 1 a scientific check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .construction import ConstructionError
from .lemma_checks import FAULTS, run_all
from .manifold_data import DomainError, ParameterError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
RATE_KINDS = ("rate", "bias", "variance", "ambient")
LEMMA_KEYS = {"trials", "seed"}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _grid(text: str) -> tuple:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None
    return tuple(int(v) if v.is_integer() else v for v in vals)


def _common(p):
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="directory for CSV/JSON artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="manifold-icl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("verify", "check the built network against the NW estimate"),
                           ("rates", "run a rate experiment and fit its log-log slope")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--n-grid", type=_grid)
        p.add_argument("--manifold", choices=("circle", "sphere", "torus"))
        p.add_argument("--ambient-dim", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--safety-factor", type=float)
        if name == "verify":
            p.add_argument("--dump-stages", action="store_true", help="write spec JSON and H0..H5 CSVs under --out")
        else:
            p.add_argument("--which", choices=RATE_KINDS, default="rate")

    p = sub.add_parser("lemmas", help="randomized checks of the three weight gadgets")
    _common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--inject-fault", choices=FAULTS)
    return parser


def _load_file(path: Path | None, allowed: set) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return doc


_FLAG_KEYS = {
    "n_grid": "n_grid",
    "manifold": "manifold",
    "ambient_dim": "ambient_dim",
    "alpha": "alpha",
    "seed": "seed",
    "safety_factor": "safety_factor",
}


def _experiment_config(args, kind: str) -> ex.ExperimentConfig:
    values = _load_file(args.config, ex.ExperimentConfig.field_names())
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    if args.out is not None:
        values["out"] = str(args.out)
    try:
        return ex.default_config(kind, **values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    except (ParameterError, DomainError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def _table(report: ex.ExperimentReport) -> str:
    cols = report.columns
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    for r in report.rows:
        lines.append("  ".join(f"{r[c]:>14.6g}" if isinstance(r[c], float) else f"{r[c]:>14}" for c in cols))
    return "\n".join(lines)


def _write(report, out):
    if out is not None:
        csv_path, json_path = report.write(out)
        print(f"wrote {csv_path} and {json_path}")


def cmd_verify(args) -> int:
    cfg = _experiment_config(args, "equivalence")
    dump = args.out / "stages" if (args.dump_stages and args.out is not None) else None
    if args.dump_stages and args.out is None:
        raise ConfigError("--dump-stages needs --out")
    rep = ex.run_equivalence_suite(cfg, dump_dir=dump)
    print(_table(rep))
    s = rep.summary
    print(f"max rel diff {s['max_rel_diff']:.3e} (tolerance {s['tolerance']:.0e})")
    for msg in s["failures"]:
        print(f"FAILED {msg}")
    _write(rep, args.out)
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_rates(args) -> int:
    cfg = _experiment_config(args, args.which)
    rep = ex.RUNNERS[args.which](cfg)
    print(_table(rep))
    if rep.fit is not None:
        lo, hi = rep.band
        print(f"slope {rep.fit.slope:.4f} +/- {rep.fit.halfwidth:.4f}, band [{lo:.3f}, {hi:.3f}]")
    else:
        s = rep.summary
        print(f"mse ratio {s['mse_ratio']:.4f} (max {s['ratio_max']}), frame diff {s['frame_diff']:.2e}")
    _write(rep, args.out)
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_lemmas(args) -> int:
    values = _load_file(args.config, LEMMA_KEYS)
    if args.trials is not None:
        values["trials"] = args.trials
    if args.seed is not None:
        values["seed"] = args.seed
    trials = values.get("trials", 1000)
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError("trials must be a positive integer")
    results = run_all(trials, int(values.get("seed", 0)), args.inject_fault)
    for r in results:
        print(r.line())
        for m in r.messages:
            print(f"  {m}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        doc = {
            "schema_version": ex.SCHEMA_VERSION,
            "lemmas": [{"name": r.name, "trials": r.trials, "failures": r.failures, "messages": r.messages} for r in results],
        }
        (args.out / "lemmas.json").write_text(json.dumps(doc, indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {"verify": cmd_verify, "rates": cmd_rates, "lemmas": cmd_lemmas}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConstructionError as e:
        print(f"error: construction failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
