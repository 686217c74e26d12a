"""Command line: run scenarios and presets, evaluate models, replay traces."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ScenarioConfig, load_config
from .consensus import ConfigError
from .core import InvariantViolation
from .metrics import FORMATS, rows_text, series_text, table_text
from .models import MODELS, ModelDomainError, evaluate_model, parse_params
from .replay import replay_file
from .scenario import PRESETS, ScenarioFailure, run_preset, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
RENDER = {"rows": rows_text, "table": table_text, "plot": series_text}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbsim", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run one scenario or a preset sweep")
    run.add_argument("--config", type=Path, help="flat YAML mapping of scenario fields")
    run.add_argument("--seed", type=int)
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--out", type=Path)
    run.add_argument("--format", choices=sorted(FORMATS), default="table")
    run.add_argument("--trace", action="store_true", help="keep and write the full trace")
    m = sub.add_parser("models", help="evaluate one analytic model")
    m.add_argument("--name", required=True, choices=sorted(MODELS))
    m.add_argument("--params", default="")
    r = sub.add_parser("replay", help="re-execute a trace and check its final balances")
    r.add_argument("--trace", type=Path, required=True)
    return p


def _run(args) -> int:
    if args.preset:
        if args.config is not None:
            raise ConfigError("--preset and --config are mutually exclusive")
        res = run_preset(args.preset, args.seed if args.seed is not None else 1, args.out)
        if res.runs:
            sys.stdout.write(RENDER[args.format](res.reports))
        print(json.dumps({"preset": res.name, "summary": res.summary}, sort_keys=True,
                         default=str))
        if args.out is not None:
            (args.out / "summary.json").write_text(
                json.dumps(res.summary, sort_keys=True, indent=1, default=str) + "\n")
        return EXIT_OK
    cfg = load_config(args.config) if args.config is not None else ScenarioConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.trace:
        cfg = cfg.replace(trace=True)
    report = run_scenario(cfg, args.out, "run")
    sys.stdout.write(RENDER[args.format]([report]))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "run":
            return _run(args)
        if args.cmd == "models":
            value = evaluate_model(args.name, parse_params(args.params))
            print(f"{args.name} = {value} ({float(value):.12g})")
            return EXIT_OK
        rep = replay_file(args.trace)
        print(json.dumps({"blocks": rep.blocks, "finalized": len(rep.finalized),
                          "burned": rep.burned,
                          "conserved": sum(rep.balances.values()) + rep.burned
                          == rep.genesis_total,
                          "matches_recorded": rep.matches()}, sort_keys=True))
        return EXIT_OK if rep.matches() else EXIT_INVARIANT
    except (ConfigError, ModelDomainError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioFailure as e:
        where = f" (trace tail: {e.trace_path})" if e.trace_path else ""
        print(f"invariant violation: {e}{where}", file=sys.stderr)
        return EXIT_INVARIANT
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
