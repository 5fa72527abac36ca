"""``brm`` command line: reproducible runs of every pipeline stage.

Configuration is a YAML file (``--config``) layered over built-in defaults,
then ``--set dotted.key=value`` overrides, then explicit flags. Exit codes:
0 ok, 2 usage, 3 divergence, 4 verification failure.
"""
from __future__ import annotations

import argparse
import copy
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import io
from .checks import run_identity_checks
from .errors import (
    CoverageError,
    DivergenceError,
    DomainError,
    InvariantError,
    PreconditionError,
    ScheduleError,
)
from .lemmas import lemma_checkers, support_dataset
from .mdp import MODES, generate_dataset, preset_mdp, random_mdp, solve_soft_optimal, uniform_policy
from .objective import for_mdp
from .sgda import SgdaRunConfig, default_init, run_sgda, suboptimality_curve
from .stability import (
    PROOF,
    STATEMENT,
    ConstantsEstimate,
    corollary_bound,
    estimate_constants,
    estimate_eps_T,
    generalization_gap,
    loglog_slope,
    psi0_max,
    replicate_neighbors,
    solve_saddle,
    theorem1_bound,
)

log = logging.getLogger("brm")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGENCE, EXIT_VERIFY = 0, 2, 3, 4
SLOPE_WINDOW = (-1.3, -0.7)

DEFAULTS = {
    "format_version": 1,
    "seed": 0,
    "output_dir": "out",
    "mdp": {"kind": "preset", "name": "demo", "states": 3, "actions": 2, "beta": 0.4,
            "deterministic": False, "file": None},
    "policy": "uniform",
    "dataset": {"n": 500, "mode": "iid_pairs", "seed": None, "min_visits": 1, "file": None},
    "sgda": {"batch_size": 32, "c1": 20.0, "c2": 100.0, "T": 20000, "sampling": "with_replacement",
             "index_stream": 0, "record_every": 100, "dual_init": "argmax"},
    "stability": {"replicates": 20, "i_subsample": 25, "n_grid": [50, 100, 200, 400, 800],
                  "T_grid": [20000], "batch_size": 1, "min_visits": 2, "probe_budget": 200,
                  "c_var": 1.0, "hit_variant": STATEMENT, "kernel": STATEMENT},
}


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path: str | None, overrides: list[str], env=os.environ) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if "BRM_SEED" in env:
        try:
            cfg["seed"] = int(env["BRM_SEED"])
        except ValueError:
            raise UsageError(f"BRM_SEED must be an integer, got {env['BRM_SEED']!r}") from None
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file {path} does not exist")
        with open(path) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_path(cfg, key.strip(), yaml.safe_load(raw))
    if cfg.get("format_version") != 1:
        raise UsageError("format_version must be 1")
    return cfg


def _beta_ok(beta) -> float:
    try:
        beta = float(beta)
    except (TypeError, ValueError):
        raise UsageError(f"beta must be a number in (0, 1), got {beta!r}") from None
    if not 0.0 < beta < 1.0:
        raise UsageError(f"beta must lie in the open interval (0, 1), got {beta}")
    return beta


def build_mdp(cfg: dict):
    m = cfg["mdp"]
    if m.get("file"):
        if not Path(m["file"]).exists():
            raise UsageError(f"MDP file {m['file']} does not exist")
        mdp = io.load_mdp(m["file"])
        _beta_ok(mdp.discount)
        return mdp
    beta = _beta_ok(m["beta"])
    if m["kind"] == "preset":
        return preset_mdp(m["name"], beta)
    if m["kind"] == "random":
        S, A = int(m["states"]), int(m["actions"])
        if S < 1 or A < 1:
            raise UsageError("states and actions must be at least 1")
        return random_mdp(S, A, beta, seed=int(cfg["seed"]), deterministic=bool(m["deterministic"]))
    raise UsageError(f"unknown mdp.kind {m['kind']!r}")


def build_policy(cfg: dict, mdp):
    pol = cfg["policy"]
    if pol == "uniform":
        return uniform_policy(mdp.n_states, mdp.n_actions)
    arr = np.array(pol, dtype=float)
    if arr.shape != (mdp.n_states, mdp.n_actions):
        raise UsageError("policy must be 'uniform' or an S x A matrix")
    return arr


def data_seed(cfg: dict) -> int:
    s = cfg["dataset"].get("seed")
    return int(cfg["seed"]) if s is None else int(s)


def build_dataset(cfg: dict, mdp):
    d = cfg["dataset"]
    if d.get("file"):
        if not Path(d["file"]).exists():
            raise UsageError(f"dataset file {d['file']} does not exist")
        return io.load_dataset(d["file"], mdp)
    if d["mode"] not in MODES:
        raise UsageError(f"dataset.mode must be one of {MODES}")
    return generate_dataset(mdp, build_policy(cfg, mdp), int(d["n"]), d["mode"], data_seed(cfg),
                            int(d["min_visits"]))


def sgda_config(cfg: dict, **changes) -> SgdaRunConfig:
    s = {**cfg["sgda"], **changes}
    return SgdaRunConfig(batch_size=int(s["batch_size"]), c1=float(s["c1"]), c2=float(s["c2"]), T=int(s["T"]),
                         sampling=s["sampling"], seed=int(cfg["seed"]), index_stream=int(s["index_stream"]),
                         record_every=int(s["record_every"]))


class Run:
    """Output directory bookkeeping shared by every subcommand."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.started = io.now()
        self.command = command

    def add(self, *paths):
        self.files.extend(Path(p) for p in paths)

    def path(self, name: str) -> Path:
        return self.out / name

    def finish(self, status: str = "ok", **extra):
        self.add(io.dump_json(self.path("config.json"), self.cfg))
        seeds = {"seed": int(self.cfg["seed"]), "dataset_seed": data_seed(self.cfg)}
        io.write_manifest(self.out, self.cfg, seeds, self.files, self.started, status,
                          {"command": self.command, **extra})


# ----------------------------------------------------------------------------
# subcommands

def cmd_gen_mdp(cfg: dict) -> int:
    mdp = build_mdp(cfg)
    run = Run(cfg, "gen-mdp")
    run.add(io.save_mdp(run.path("mdp.json"), mdp))
    run.finish()
    return EXIT_OK


def cmd_gen_data(cfg: dict) -> int:
    mdp = build_mdp(cfg)
    data = build_dataset(cfg, mdp)
    run = Run(cfg, "gen-data")
    run.add(io.save_mdp(run.path("mdp.json"), mdp), *io.save_dataset(run.path("dataset.csv"), data))
    run.finish()
    return EXIT_OK


def cmd_solve(cfg: dict) -> int:
    mdp = build_mdp(cfg)
    run = Run(cfg, "solve")
    sol = solve_soft_optimal(mdp, tol=1e-12)
    run.add(io.dump_json(run.path("solution.json"), sol._asdict()))
    if cfg["dataset"].get("file"):
        data = build_dataset(cfg, mdp)
        param = for_mdp(mdp, data)
        sad = solve_saddle(param, data)
        run.add(io.dump_json(run.path("saddle.json"), {
            "x_star": sad.x_star, "v_star": sad.v_star, "phi_star": sad.phi_star, "grad_norm": sad.grad_norm}))
    run.finish()
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    mdp = build_mdp(cfg)
    data = build_dataset(cfg, mdp)
    param = for_mdp(mdp, data)
    run_cfg = sgda_config(cfg)
    run = Run(cfg, "train")
    init = default_init(param, data, cfg["sgda"]["dual_init"])
    try:
        trace = run_sgda(param, data, run_cfg, init)
    except DivergenceError as exc:
        run.finish("diverged", failure={"t": exc.t, "tag": exc.tag, "w": exc.iterate.w, "v": exc.iterate.v})
        log.error("%s", exc)
        return EXIT_DIVERGENCE
    sad = solve_saddle(param, data)
    curve = suboptimality_curve(trace, sad.phi_star)
    run.add(io.save_trace(run.path("trace.csv"), curve[:, 0], curve[:, 1], trace.f_log, trace.etas),
            io.save_index_log(run.path("index_log.csv"), trace.index_log),
            io.save_point(run.path("final.json"), trace.final, phi_star=sad.phi_star))
    run.finish()
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    run = Run(cfg, "verify")
    report = {"checks": [], "lemmas": {}}
    try:
        mdp = build_mdp(cfg)
        data = build_dataset(cfg, mdp)
    except InvariantError as exc:
        report["checks"].append({"check": "dataset_invariants", "passed": False, "error": str(exc), "row": exc.row})
        report["passed"] = False
        run.add(io.dump_json(run.path("verify.json"), report))
        run.finish("failed")
        log.error("dataset invariant violated: %s", exc)
        return EXIT_VERIFY
    report["checks"].append({"check": "dataset_invariants", "passed": True})
    param = for_mdp(mdp, data)
    seed = int(cfg["seed"])
    report["checks"].extend(run_identity_checks(mdp, param, data, seed))
    lem = lemma_checkers(mdp, param, data, int(cfg["stability"].get("lemma_probes", 100)), seed)
    for k, v in lem.items():
        report["lemmas"][k] = v if isinstance(v, float) else v.to_dict()
    ok = all(c["passed"] for c in report["checks"])
    ok &= all(v["passed"] for v in report["lemmas"].values() if isinstance(v, dict))
    ok &= report["lemmas"]["ascent_equality_gap"] <= 1e-12
    report["passed"] = bool(ok)
    run.add(io.dump_json(run.path("verify.json"), report))
    run.finish("ok" if ok else "failed")
    for c in report["checks"]:
        log.info("%-26s %s", c["check"], "pass" if c["passed"] else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def _constants(cfg, mdp, param, data, saddle=None) -> ConstantsEstimate:
    st = cfg["stability"]
    return estimate_constants(param, data, int(st["probe_budget"]), int(cfg["seed"]), saddle=saddle,
                              support=support_dataset(mdp, param))


def cmd_constants(cfg: dict) -> int:
    mdp = build_mdp(cfg)
    data = build_dataset(cfg, mdp)
    param = for_mdp(mdp, data)
    run = Run(cfg, "constants")
    run.add(io.dump_json(run.path("constants.json"), _constants(cfg, mdp, param, data).to_dict()))
    run.finish()
    return EXIT_OK


def _bounds(cfg, mdp, param, data, k: ConstantsEstimate, run_cfg: SgdaRunConfig) -> dict:
    st = cfg["stability"]
    init = default_init(param, data, cfg["sgda"]["dual_init"])
    n_i = min(int(st["i_subsample"] or len(data)), len(data))
    neigh = replicate_neighbors(mdp, param, data, 0, int(cfg["seed"]), n_i)
    psi0 = psi0_max(param, init, [data] + [p.neighbor for p in neigh], k.alpha)
    out = {"psi0_max": psi0, "n": len(data), "T": run_cfg.T, "c_var": float(st["c_var"])}
    for hit in (STATEMENT, PROOF):
        for kern in (STATEMENT, PROOF):
            key = f"hit={hit},kernel={kern}"
            out[f"theorem[{key}]"] = theorem1_bound(k, run_cfg, len(data), psi0, c_var=float(st["c_var"]),
                                                    hit_variant=hit, kernel=kern)
            try:
                out[f"corollary[{key}]"] = corollary_bound(k, run_cfg, len(data), run_cfg.T, psi0,
                                                           float(st["c_var"]), hit, kern)
            except ScheduleError as exc:
                out[f"corollary[{key}]"] = math.nan
                out[f"corollary_note[{key}]"] = str(exc)
    out["selected"] = f"hit={st['hit_variant']},kernel={st['kernel']}"
    return out


def cmd_bound(cfg: dict) -> int:
    mdp = build_mdp(cfg)
    data = build_dataset(cfg, mdp)
    param = for_mdp(mdp, data)
    run = Run(cfg, "bound")
    cfile = cfg["stability"].get("constants_file")
    k = ConstantsEstimate(**io.load_json(cfile)) if cfile else _constants(cfg, mdp, param, data)
    run.add(io.dump_json(run.path("bound.json"), _bounds(cfg, mdp, param, data, k, sgda_config(cfg))))
    run.finish()
    return EXIT_OK


def _sweep_cell(cfg: dict, n: int, T: int) -> dict:
    """One grid cell; dataset seeds are disjoint across n and shared across T."""
    st = cfg["stability"]
    mdp = build_mdp(cfg)
    seed = int(cfg["seed"])
    data = generate_dataset(mdp, build_policy(cfg, mdp), n, cfg["dataset"]["mode"], seed * 1_000_003 + n,
                            int(st["min_visits"]))
    param = for_mdp(mdp, data)
    run_cfg = sgda_config(cfg, T=T, batch_size=st["batch_size"])
    init = default_init(param, data, cfg["sgda"]["dual_init"])
    rep = estimate_eps_T(mdp, param, data, run_cfg, init, int(st["replicates"]), st["i_subsample"], seed)
    rep.gen_gap_primal, rep.gen_gap_pd = generalization_gap(mdp, param, data, rep.base_final)
    saddle = solve_saddle(param, data)
    k = _constants(cfg, mdp, param, data, saddle)
    b = _bounds(cfg, mdp, param, data, k, run_cfg)
    rep.bound_value = b[f"corollary[{b['selected']}]"]
    body = rep.to_dict()
    body.update({"constants": k.to_dict(), "bounds": b})
    return body


def cmd_stability_sweep(cfg: dict, enforce: bool = False, jobs: int = 1) -> int:
    st = cfg["stability"]
    ns = [int(n) for n in st["n_grid"]]
    Ts = [int(T) for T in st["T_grid"]]
    if not ns or not Ts:
        raise UsageError("stability.n_grid and stability.T_grid must be nonempty")
    run = Run(cfg, "stability-sweep")
    cells = [(n, T) for T in Ts for n in ns]
    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futs = {c: pool.submit(_sweep_cell, cfg, *c) for c in cells}
            for c, f in futs.items():
                try:
                    results[c] = f.result()
                except (DivergenceError, ValueError, RuntimeError) as exc:
                    results[c] = {"error": f"{type(exc).__name__}: {exc}"}
    else:
        for c in cells:
            try:
                results[c] = _sweep_cell(cfg, *c)
            except (DivergenceError, ValueError, RuntimeError) as exc:
                results[c] = {"error": f"{type(exc).__name__}: {exc}"}
    rows, summary = [], {"window": list(SLOPE_WINDOW), "slopes": {}, "incomplete": []}
    for T in Ts:
        good = [n for n in ns if "error" not in results[(n, T)] and results[(n, T)]["eps_T_mean"] > 0]
        slope = loglog_slope(good, [results[(n, T)]["eps_T_mean"] for n in good]) if len(set(good)) > 1 else math.nan
        summary["slopes"][str(T)] = slope
        for n in ns:
            r = results[(n, T)]
            name = f"report_n{n}_T{T}.json"
            run.add(io.dump_json(run.path(name), r))
            if "error" in r:
                summary["incomplete"].append({"n": n, "T": T, "error": r["error"]})
                rows.append([n, T, int(st["replicates"]), math.nan, math.nan, math.nan, slope])
            else:
                rows.append([n, T, r["replicates"], r["eps_T_mean"], r["eps_T_stderr"], r["bound_value"], slope])
    in_window = all(SLOPE_WINDOW[0] <= s <= SLOPE_WINDOW[1] for s in summary["slopes"].values())
    summary["slope_in_window"] = bool(in_window)
    run.add(io.save_sweep(run.path("sweep.csv"), rows), io.dump_json(run.path("summary.json"), summary))
    run.finish("ok" if not summary["incomplete"] else "incomplete")
    for T, s in summary["slopes"].items():
        log.info("T=%s slope %.4f (window %s)", T, s, SLOPE_WINDOW)
    if enforce and not in_window:
        return EXIT_VERIFY
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted key, YAML value); repeatable")
    common.add_argument("--seed", type=int, help="master seed (default: BRM_SEED or 0)")
    common.add_argument("--output-dir", help="directory for artifacts")
    common.add_argument("--jobs", type=int, default=1, help="concurrent sweep cells")
    common.add_argument("-v", "--verbose", action="store_true")

    mdp_args = argparse.ArgumentParser(add_help=False)
    mdp_args.add_argument("--mdp", help="MDP JSON file")
    mdp_args.add_argument("--preset", help="preset MDP name")
    mdp_args.add_argument("--states", type=int)
    mdp_args.add_argument("--actions", type=int)
    mdp_args.add_argument("--beta", type=float)
    mdp_args.add_argument("--deterministic", action="store_true", default=None)

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("--data", help="dataset CSV (with JSON sidecar)")
    data_args.add_argument("--n", type=int)
    data_args.add_argument("--mode", choices=MODES)
    data_args.add_argument("--min-visits", type=int)

    p = argparse.ArgumentParser(prog="brm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-mdp", parents=[common, mdp_args], help="write a random or preset MDP")
    sub.add_parser("gen-data", parents=[common, mdp_args, data_args], help="sample an offline dataset")
    sub.add_parser("solve", parents=[common, mdp_args, data_args], help="soft-optimal Q* (and empirical saddle)")
    tr = sub.add_parser("train", parents=[common, mdp_args, data_args], help="run minibatch SGDA")
    tr.add_argument("--T", type=int)
    tr.add_argument("--batch-size", type=int)
    sub.add_parser("verify", parents=[common, mdp_args, data_args], help="identity and lemma checks")
    sw = sub.add_parser("stability-sweep", parents=[common, mdp_args], help="eps_T over an n x T grid")
    sw.add_argument("--enforce", action="store_true", help="exit 4 if a slope leaves the window")
    sub.add_parser("constants", parents=[common, mdp_args, data_args], help="estimate L, rho, G, mu_PL, mu_QG")
    bd = sub.add_parser("bound", parents=[common, mdp_args, data_args], help="evaluate the stability bounds")
    bd.add_argument("--constants", help="constants JSON written by `brm constants`")
    return p


def apply_flags(cfg: dict, args) -> dict:
    flag_map = {
        "seed": "seed", "output_dir": "output_dir", "mdp": "mdp.file", "states": "mdp.states",
        "actions": "mdp.actions", "beta": "mdp.beta", "deterministic": "mdp.deterministic",
        "data": "dataset.file", "n": "dataset.n", "mode": "dataset.mode", "min_visits": "dataset.min_visits",
        "T": "sgda.T", "batch_size": "sgda.batch_size", "constants": "stability.constants_file",
    }
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            set_path(cfg, key, val)
    if getattr(args, "preset", None):
        set_path(cfg, "mdp.kind", "preset")
        set_path(cfg, "mdp.name", args.preset)
    elif getattr(args, "states", None) is not None or getattr(args, "actions", None) is not None:
        set_path(cfg, "mdp.kind", "random")
    return cfg


COMMANDS = {
    "gen-mdp": cmd_gen_mdp, "gen-data": cmd_gen_data, "solve": cmd_solve, "train": cmd_train,
    "verify": cmd_verify, "constants": cmd_constants, "bound": cmd_bound,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = apply_flags(load_config(args.config, args.set), args)
        if args.command == "stability-sweep":
            return cmd_stability_sweep(cfg, args.enforce, args.jobs)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"brm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"brm {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, PreconditionError, ScheduleError, CoverageError) as exc:
        print(f"brm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"brm {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
