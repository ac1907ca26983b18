"""
Command-line entry point.

    medadv train SPEC --out DIR [--section.key=value ...]
    medadv evaluate SPEC --out DIR [--split AdvTest] [--checkpoint PATH]
    medadv attack SPEC --out DIR [--attack pgd --eps 1,2 --steps 20 ...]
    medadv detect SPEC --out DIR
    medadv analyze SPEC --out DIR
    medadv extract-features SPEC --out DIR --family kd --attack-dir DIR --dest DIR
    medadv run SPEC --out DIR          (all stages, then the report)
    medadv report --out DIR
    medadv selftest

Exit codes: 0 success, 2 invalid spec or arguments, 3 missing or unreadable
prerequisite artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import ConfigError, FormatError

EXIT_OK, EXIT_SPEC, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

# dedicated attack flags and the spec keys they set
ATTACK_FLAGS = {
    "attack": ("attack", "methods"),
    "eps": ("attack", "eps"),
    "alpha": ("attack", "alpha"),
    "steps": ("attack", "steps"),
    "kappa": ("attack", "kappa"),
    "random_start": ("attack", "random_start"),
    "seed": ("experiment", "seed"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="medadv", description="Adversarial attack and detection experiments on image classifiers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("train", "evaluate", "attack", "detect", "analyze", "run", "extract-features"):
        s = sub.add_parser(name)
        s.add_argument("spec", help="experiment spec (INI)")
        s.add_argument("--out", help="output directory (overrides [experiment] output)")
        if name == "attack":
            s.add_argument("--attack", choices=["fgsm", "bim", "pgd", "cw"])
            s.add_argument("--eps", help="budget(s) in 1/255 units, comma separated")
            s.add_argument("--alpha", help="step size in 1/255 units")
            s.add_argument("--steps")
            s.add_argument("--kappa")
            s.add_argument("--random-start", dest="random_start", choices=["on", "off"])
            s.add_argument("--seed")
        if name == "evaluate":
            s.add_argument("--split", default="AdvTest", choices=["Train", "AdvTrain", "AdvTest"])
            s.add_argument("--checkpoint", help="checkpoint to score (default: OUT/train/model.ckpt)")
        if name == "extract-features":
            s.add_argument("--family", required=True, choices=["kd", "lid", "dfeat", "qfeat"])
            s.add_argument("--attack-dir", dest="attack_dir", required=True)
            s.add_argument("--tap", help="feature tap for kd; comma-separated taps for lid")
            s.add_argument("--dest", required=True, help="directory for the feature matrix")
    r = sub.add_parser("report")
    r.add_argument("--out", required=True)
    sub.add_parser("selftest")
    return p


def _spec(args, extra):
    overrides = harness.parse_overrides(extra)
    for flag, key in ATTACK_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    spec = harness.load_spec(args.spec, overrides)
    out = args.out or spec.raw("experiment", "output").strip()
    if not out:
        raise ConfigError("no output directory: pass --out or set [experiment] output")
    return spec, out


def _dispatch(args, extra) -> int:
    if args.command == "selftest":
        from .selftest import run_selftest

        return EXIT_OK if run_selftest() else EXIT_NUMERIC
    if args.command == "report":
        if extra:
            raise ConfigError(f"report takes no overrides: {extra}")
        harness.cmd_report(args.out)
        return EXIT_OK
    spec, out = _spec(args, extra)
    if args.command == "evaluate":
        harness.cmd_evaluate(spec, out, args.split, args.checkpoint)
        return EXIT_OK
    if args.command == "extract-features":
        harness.cmd_extract_features(spec, out, args.family, args.attack_dir, args.dest, args.tap)
        return EXIT_OK
    stage = {
        "train": harness.cmd_train,
        "attack": harness.cmd_attack,
        "detect": harness.cmd_detect,
        "analyze": harness.cmd_analyze,
        "run": harness.run_pipeline,
    }[args.command]
    stage(spec, out)
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = build_parser().parse_known_args(argv)
        return _dispatch(args, extra)
    except ConfigError as exc:
        print(f"medadv: spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except (harness.MissingArtifact, FileNotFoundError, FormatError) as exc:
        print(f"medadv: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"medadv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"medadv: invalid argument: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
