"""Command-line entry point: ``sapp {gen-mdp,gen-dataset,run,validate,inspect}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bounds import TheoremConstants, paired_reports
from .data import build_empirical_model
from .dice import omega_state_weights, omega_to_csv, solve_dualdice, zeta_to_csv
from .harness import EXIT_CONFIG, EXIT_OK, _spec_from, build_instance, derived_seed, run_experiment
from .mdp import PolicyTable
from .pessimism import PolicyClass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sapp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("gen-mdp", "write the environment of one seed as JSON"),
        ("gen-dataset", "write the offline dataset of each seed as CSV"),
        ("run", "train the configured algorithms (and run validations) over the seed sweep"),
        ("validate", "run only the configured bound/theorem validations"),
        ("inspect", "dump ratios, state weights and bounds for one instance"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("--seeds", type=int, default=None, help="number of sweep seeds")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = cfgmod.load(args.config)
    except cfgmod.ConfigError as exc:
        for msg in exc.messages:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "run":
        return run_experiment(config, str(out), args.seeds, args.jobs)
    if args.command == "validate":
        if not config.validations:
            print("config error: validations: no validations configured", file=sys.stderr)
            return EXIT_CONFIG
        return run_experiment(config, str(out), args.seeds, args.jobs, do_algorithms=False)
    seeds = config.seed_list(1, args.seeds)
    if args.command == "gen-mdp":
        mdp, _ = build_instance(config, seeds[0])
        mdp.save(out / "mdp.json")
    elif args.command == "gen-dataset":
        for s in seeds:
            _, data = build_instance(config, s)
            data.to_csv(out / f"dataset_seed{s}.csv")
    else:
        _inspect(config, seeds[0], out)
    return EXIT_OK


def _inspect(config, seed: int, out: Path) -> None:
    mdp, data = build_instance(config, seed)
    S, A = mdp.num_states, mdp.num_actions
    model = build_empirical_model(data, S, A, mdp.discount, mdp.initial_dist)
    target = PolicyTable.uniform(S, A)
    state = solve_dualdice(data, target, mdp.discount, mdp.initial_dist)
    zeta_to_csv(out / "zeta.csv", state.zeta, A)
    omega_to_csv(out / "omega.csv", omega_state_weights(state, model, target))
    report = {"dualdice": state.diagnostics, "seed": seed,
              "derived_seed": derived_seed(config.root_seed, seed, 0)}
    v = config.validations[0] if config.validations else cfgmod.DEFAULTS["validation"]
    pc = PolicyClass(**v["policy_class"])
    if pc.kind != "deterministic_enumeration" or A**S <= 10**6:
        spec = _spec_from(v, 0.5 if v["alpha"] is None else v["alpha"])
        consts = TheoremConstants(delta=v["delta"], policy_class_size=pc.size(S, A))
        rd, rs = paired_reports(mdp, model, pc, spec, consts, v["cap"])
        report["bounds"] = {"Dis": rd.to_dict(), "SA-Dis": rs.to_dict()}
    (out / "inspect.json").write_text(json.dumps(report, indent=1, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x).__name__)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
