"""Seed-sweep experiment runner: algorithm comparisons and bound/theorem validations."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bounds import (
    TheoremConstants,
    large_alpha_threshold,
    measure_constants,
    paired_reports,
    theorem2_check,
    theorem3_check,
    theorem4_clip_search,
    underestimation_check,
)
from .config import ExperimentConfig
from .data import OfflineDataset, build_empirical_model, generate_dataset
from .envs import build_chain_mdp, build_garnet, build_gridworld, make_behavior
from .mdp import PolicyTable, TabularMdp
from .pessimism import (
    DisSpec,
    FTransform,
    PessimismSpec,
    PolicyClass,
    enumerate_deterministic,
    one_hot_policies,
)
from .sacql import TrainConfig, train

VALIDATION_COLUMNS = ["seed", "condition", "conclusion", "ub_dis", "ub_sa", "subopt"]
RETURN_COLUMNS = ["seed", "algorithm", "final_return"]

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


def derived_seed(root: int, index: int, stream: int = 0) -> int:
    """Independent 32-bit seed for ``(root, index, stream)``."""
    return int(np.random.SeedSequence([root, index, stream]).generate_state(1)[0])


def build_environment(env: dict, seed: int) -> TabularMdp:
    kind = env["kind"]
    if kind == "chain":
        return build_chain_mdp(env["num_left"], env["num_right"], env["reward_left"],
                               env["reward_right"], env["discount"])
    if kind == "garnet":
        g_seed = env["seed"] if env.get("seed") is not None else seed
        return build_garnet(env["num_states"], env["num_actions"], env["branching"], g_seed,
                            env["discount"])
    return build_gridworld(env["size"], env["slip"], env["discount"])


def build_instance(config: ExperimentConfig, seed: int) -> tuple[TabularMdp, OfflineDataset]:
    """The MDP and offline dataset for one sweep seed."""
    root = config.root_seed
    mdp = build_environment(config.environment, derived_seed(root, seed, 0))
    ds = config.dataset
    b = ds["behavior"]
    num_left = config.environment.get("num_left")
    behavior = make_behavior(b["kind"], mdp, seed=derived_seed(root, seed, 1),
                             epsilon=b["epsilon"], p_left=b["p_left"], num_left=num_left)
    data = generate_dataset(mdp, behavior, ds["episodes"], ds["horizon"],
                            seed=derived_seed(root + ds["seed"], seed, 2))
    return mdp, data


def _spec_from(v: dict, alpha: float) -> PessimismSpec:
    f = dict(v["f"])
    if f.get("clip_max") is None:
        f.pop("clip_max", None)
    return PessimismSpec(dis=DisSpec(**v["dis"]), alpha=alpha, f=FTransform(**f))


def run_validation(kind: str, v: dict, mdp: TabularMdp, dataset: OfflineDataset, seed: int) -> dict:
    """One validation on one instance, as a CSV row."""
    S, A = mdp.num_states, mdp.num_actions
    model = build_empirical_model(dataset, S, A, mdp.discount, mdp.initial_dist)
    pc = PolicyClass(**v["policy_class"])
    size = pc.size(S, A)
    delta = v["delta"]
    consts = TheoremConstants(delta=delta, policy_class_size=size)
    alpha = v["alpha"]
    row = {"seed": seed}
    if kind in ("lemma1", "theorem2"):
        spec = _spec_from(v, 0.5 if alpha is None else alpha)
        rd, rs = paired_reports(mdp, model, pc, spec, consts, v["cap"])
        if kind == "lemma1":
            row.update(condition=True,
                       conclusion=bool(rd.true_subopt <= rd.total_ub and rs.true_subopt <= rs.total_ub),
                       ub_dis=rd.total_ub, ub_sa=rs.total_ub, subopt=rd.true_subopt,
                       subopt_sa=rs.true_subopt)
        else:
            chk = theorem2_check(rd, rs, model, spec)
            row.update(condition=chk["condition_holds"], conclusion=chk["conclusion_holds"],
                       ub_dis=rd.total_ub, ub_sa=rs.total_ub, subopt=rs.true_subopt,
                       lhs=chk["lhs"], rhs=chk["rhs"])
    elif kind == "theorem3":
        base = _spec_from(v, 0.0)
        k0, s1, _ = measure_constants(model, base, delta, size)
        spec = replace(base, alpha=k0.alpha_prime / model.size if alpha is None else alpha)
        rd, rs = paired_reports(mdp, model, pc, spec, consts, v["cap"])
        k, s1, _ = measure_constants(model, spec, delta, size, pi_bar_2=rd.inf_policy,
                                     alpha_prime=spec.alpha * model.size)
        chk = theorem3_check(model, k, rs.sup_policy, s1, spec)
        row.update(condition=chk["condition_holds"],
                   conclusion=bool(rs.total_ub <= rd.total_ub + 1e-9 * max(1.0, abs(rd.total_ub))),
                   ub_dis=rd.total_ub, ub_sa=rs.total_ub, subopt=rs.true_subopt, lhs=chk["lhs"])
    elif kind == "theorem4":
        spec = _spec_from(v, 0.0)
        if alpha is None:
            probs = one_hot_policies(enumerate_deterministic(S, A), A)
            alpha = 1.01 * large_alpha_threshold(model, probs, replace(spec, state_aware=True),
                                                 delta, size)
        res = theorem4_clip_search(mdp, model, pc, replace(spec, alpha=alpha), delta, v["cap"])
        row.update(condition=res["precondition_holds"], conclusion=bool(res["clip_C"] > 1.0),
                   ub_dis=res["inf_dis"], ub_sa=res["inf_clipped_sa"], subopt=float("nan"),
                   clip_C=res["clip_C"])
    elif kind == "theorem5":
        spec = replace(_spec_from(v, 0.0), state_aware=True)
        rng = np.random.default_rng(seed)
        acts = [rng.choice(np.flatnonzero(model.support_sa[s])) if model.visited[s] else 0
                for s in range(S)]
        pi = PolicyTable.deterministic(acts, A)
        if alpha is None:
            alpha = 1.01 * large_alpha_threshold(model, pi.probs, spec, delta, size)
        res = underestimation_check(mdp, model, pi, replace(spec, alpha=alpha), delta, size, v["cap"])
        row.update(condition=res["large_alpha_applicable"], conclusion=res["large_alpha_underestimates"],
                   ub_dis=float("nan"), ub_sa=float("nan"), subopt=res["max_overestimate"],
                   pointwise=res["pointwise_bound_holds"])
    else:
        raise ValueError(f"unknown validation {kind!r}")
    return row


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(bool(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def run_seed(config: ExperimentConfig, seed: int, out_dir: str, do_algorithms: bool,
             do_validations: bool) -> dict:
    """Everything for one seed; writes its own files and returns the result rows."""
    result = {"seed": seed, "returns": [], "validations": {}, "error": None}
    seed_dir = Path(out_dir) / "seeds" / f"seed_{seed}"
    try:
        mdp, dataset = build_instance(config, seed)
        if do_algorithms:
            for alg in config.algorithms:
                tc = TrainConfig.from_dict({**alg["train"], "seed": derived_seed(config.root_seed, seed, 3)})
                trace = train(mdp, dataset, tc)
                _atomic_write(seed_dir / f"{alg['name']}_trace.csv", trace.to_csv_text())
                _atomic_write(seed_dir / f"{alg['name']}_trace.json", trace.to_json())
                result["returns"].append({"seed": seed, "algorithm": alg["name"],
                                          "final_return": trace.final_return})
        if do_validations:
            for v in config.validations:
                row = run_validation(v["kind"], v, mdp, dataset, seed)
                result["validations"][v["kind"]] = row
                _atomic_write(seed_dir / f"validation_{v['kind']}.json", json.dumps(row, default=_fmt))
    except Exception as exc:  # one bad seed must not sink the sweep
        result["error"] = f"{type(exc).__name__}: {exc}"
        result["traceback"] = traceback.format_exc()
    return result


def _quantiles(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0, "median": None, "q25": None, "q75": None, "iqr": None}
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "median": float(med), "q25": float(q25), "q75": float(q75),
            "iqr": float(q75 - q25)}


def summarize(return_rows, validation_rows: dict, delta_by_kind: dict) -> dict:
    algorithms = {}
    for r in return_rows:
        algorithms.setdefault(r["algorithm"], []).append(float(r["final_return"]))
    summary = {"algorithms": {k: _quantiles(v) for k, v in sorted(algorithms.items())},
               "validations": {}}
    for kind, rows in sorted(validation_rows.items()):
        n = len(rows)
        cond = [bool(int(r["condition"])) for r in rows]
        concl = [bool(int(r["conclusion"])) for r in rows]
        entry = {"n": n, "condition_count": sum(cond), "conclusion_count": sum(concl),
                 "implication_failures": sum(c and not k for c, k in zip(cond, concl))}
        if kind == "lemma1":
            entry["violation_rate"] = (n - sum(concl)) / n if n else None
            entry["delta"] = delta_by_kind.get(kind)
        summary["validations"][kind] = entry
    return summary


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(config: ExperimentConfig, out_dir: str | None = None, seeds: int | None = None,
                   jobs: int = 1, do_algorithms: bool = True, do_validations: bool = True) -> int:
    """Run the sweep, write CSVs and ``summary.json``; return a process exit code."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    do_algorithms = do_algorithms and bool(config.algorithms)
    do_validations = do_validations and bool(config.validations)
    default = 10 if do_algorithms else 200
    seed_list = config.seed_list(default, seeds)
    args = [(config, s, str(out), do_algorithms, do_validations) for s in seed_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_seed, *zip(*args)))
    else:
        results = [run_seed(*a) for a in args]
    results.sort(key=lambda r: r["seed"])

    return_rows = [row for r in results for row in r["returns"]]
    validation_rows: dict[str, list] = {}
    for r in results:
        for kind, row in r["validations"].items():
            validation_rows.setdefault(kind, []).append(row)
    if do_algorithms:
        _atomic_write(out / "returns.csv", _csv_text(RETURN_COLUMNS, return_rows))
    for kind, rows in validation_rows.items():
        extra = sorted({k for row in rows for k in row} - set(VALIDATION_COLUMNS))
        _atomic_write(out / f"validation_{kind}.csv", _csv_text(VALIDATION_COLUMNS + extra, rows))

    deltas = {v["kind"]: v["delta"] for v in config.validations}
    summary = summarize(return_rows, {k: [{c: _fmt(x) for c, x in row.items()} for row in rows]
                                      for k, rows in validation_rows.items()}, deltas)
    summary["seeds"] = seed_list
    summary["failures"] = [{"seed": r["seed"], "error": r["error"]} for r in results if r["error"]]
    summary["self_check"] = self_check(out, summary)
    _atomic_write(out / "config.json", config.to_json())
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_PARTIAL if summary["failures"] else EXIT_OK


def self_check(out: Path, summary: dict) -> bool:
    """Recompute the summary statistics from the exported CSVs and compare."""
    returns = _read_csv(out / "returns.csv") if (out / "returns.csv").exists() else []
    vals = {p.stem[len("validation_"):]: _read_csv(p) for p in sorted(out.glob("validation_*.csv"))}
    again = summarize(returns, vals, {k: v.get("delta") for k, v in summary["validations"].items()})
    return again["algorithms"] == summary["algorithms"] and again["validations"] == summary["validations"]
