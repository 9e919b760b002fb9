"""Command-line entry point: ``ieqn {regress,project,dp,train,spread}``.

Configuration is a flat ``key = value`` file (``#`` starts a comment),
overridable with repeated ``--set key=value``. Every subcommand writes
plain CSV files into ``--out``. Exit codes: 0 ok, 2 usage/config error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import agents, mdp as mdp_mod, projection, regression
from .dist import EmpiricalDistribution, FractionGrid, GaussianMixtureSpec, make_rng, sample_mixture
from .regression import DivergenceError, FitConfig

log = logging.getLogger("ieqn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: Callable[[str], Any]
    default: Any
    help: str


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(" ", "").split(",") if t]


def _str_list(text: str) -> list[str]:
    return [t for t in str(text).replace(" ", "").split(",") if t]


COMMON = {
    "seed": Key(int, 0, "root seed; every component derives its stream from it"),
    "out": Key(str, None, "output directory (required; --out also sets it)"),
}

TARGET_KEYS = {
    "target": Key(str, "bimodal", "'bimodal' (Gaussian mixture) or 'dirac:<c>'"),
    "mixture_loc": Key(float, 2.0, "mixture component means are -loc and +loc"),
    "mixture_std": Key(float, 1.0, "mixture component standard deviation"),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "regress": {
        **TARGET_KEYS,
        "n_samples": Key(int, 10_000, "number of sampled target atoms"),
        "K": Key(int, 20, "fraction grid size"),
        "learning_rate": Key(float, 1e-4, "SGD step size (Table 2: 1e-4)"),
        "batch_size": Key(int, 32, "minibatch size (Table 2: 32)"),
        "steps": Key(int, 5000, "SGD steps per fit"),
        "n_seeds": Key(int, 1, "number of fit seeds, seed .. seed+n_seeds-1"),
        "mae_threshold": Key(float, 0.2, "MAE level reported as steps_to_threshold"),
    },
    "project": {
        **TARGET_KEYS,
        "n_samples": Key(int, 100_000, "number of sampled target atoms"),
        "K_list": Key(_int_list, [2, 5, 10, 50, 200], "comma-separated projection sizes"),
        "floor_rule": Key(str, "snap", "'snap' (nearest grid level) or 'lemma' (tau_floor(Kx))"),
        "pairs": Key(int, 100, "random distribution pairs for the non-expansion battery"),
        "pair_atoms": Key(int, 20, "atoms per random distribution"),
        "pair_K": Key(int, 200, "projection size for the non-expansion battery"),
    },
    "dp": {
        "mdp": Key(str, "chain", "'chain' or 'self_loop'"),
        "n_states": Key(int, 4, "chain length (the absorbing end state is extra)"),
        "gamma": Key(float, 1.0, "discount factor"),
        **TARGET_KEYS,
        "n_reward_atoms": Key(int, 10_000, "sampled atoms of the reward distribution"),
        "K": Key(int, 100, "dual projection size"),
        "max_atoms": Key(int, 1000, "mixture compression size inside the backup"),
        "iterations": Key(int, 20, "maximum number of operator applications"),
        "tol": Key(float, 1e-9, "stop once successive iterates are within this sup-W1"),
        "rollouts": Key(int, 100_000, "Monte-Carlo rollouts per state-action pair"),
    },
    "train": {
        "variants": Key(_str_list, ["IEQN", "IENNaive"], "comma-separated subset of "
                        + ",".join(agents.VARIANTS)),
        "n_seeds": Key(int, 1, "training seeds, seed .. seed+n_seeds-1"),
        "steps": Key(int, 50_000, "environment transitions per run"),
        "eval_every": Key(int, 5000, "snapshot period in transitions (0: final only)"),
        "n_states": Key(int, 4, "chain length"),
        "n_reward_atoms": Key(int, 10_000, "sampled atoms of the terminal reward"),
        **TARGET_KEYS,
        "gamma": Key(float, 1.0, "discount factor"),
        "n_fractions": Key(int, 32, "fractions sampled per update"),
        "z_lr": Key(float, 1e-4, "Z-network Adam learning rate (Table 2: 1e-4)"),
        "mapper_lr": Key(float, 7e-5, "mapper Adam learning rate (Table 3: 7e-5)"),
        "target_update_period": Key(int, 100, "updates between target refreshes"),
        "z_target_weight": Key(float, 1.0, "Z target update rate (Table 2: 1.0)"),
        "polyak_weight": Key(float, 0.5, "mapper target update rate (Table 3: 0.5)"),
        "kappa": Key(float, 1.0, "Huber threshold for IQN1"),
        "hidden": Key(int, 64, "Z-network hidden width"),
        "mapper_hidden": Key(int, 64, "mapper hidden width (Table 3: 64)"),
        "updates_per_sample": Key(int, 1, "updates per transition (Table 2 uses 2 on Atari)"),
    },
    "spread": {
        "trace": Key(str, None, "trace CSV written by 'train' (required)"),
        "scale": Key(str, "auto", "'auto' (|mean statistic|, floor 1e-3) or a positive number"),
    },
}

REQUIRED = {"out", "trace"}


# ---------------------------------------------------------------------------
# configuration


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = (p.strip() for p in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v
    return out


def resolve_config(command: str, raw: dict[str, str]) -> dict[str, Any]:
    schema = {**COMMON, **SCHEMAS[command]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) for '{command}': {', '.join(unknown)}")
    cfg = {}
    for k, spec in schema.items():
        if k in raw:
            try:
                cfg[k] = spec.type(raw[k])
            except ValueError as err:
                raise ConfigError(f"bad value for {k}: {raw[k]!r} ({err})") from None
        else:
            cfg[k] = spec.default
        if k in REQUIRED and cfg[k] is None:
            raise ConfigError(f"missing required key '{k}'")
    return cfg


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise ConfigError(f"output directory {out} is not writable: {err}") from None
    return out


def _target(cfg: dict, n: int, seed: int) -> EmpiricalDistribution:
    t = cfg["target"].strip().lower()
    if t == "bimodal":
        try:
            spec = GaussianMixtureSpec.bimodal(cfg["mixture_loc"], cfg["mixture_std"])
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return sample_mixture(spec, n, seed)
    if t.startswith("dirac:"):
        return EmpiricalDistribution.dirac(float(t.split(":", 1)[1]))
    raise ConfigError(f"unknown target {cfg['target']!r}")


def _seed_for(root: int, *path: int) -> int:
    return int(np.random.SeedSequence([root, *path]).generate_state(1)[0])


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_regress(cfg: dict) -> int:
    if cfg["n_samples"] < 1 or cfg["K"] < 1 or cfg["steps"] < 1 or cfg["n_seeds"] < 1:
        raise ConfigError("n_samples, K, steps and n_seeds must be positive")
    if not cfg["learning_rate"] > 0 or cfg["batch_size"] < 1:
        raise ConfigError("learning_rate and batch_size must be positive")
    out = _prepare_out(cfg["out"])
    samples = _target(cfg, cfg["n_samples"], _seed_for(cfg["seed"], 0))
    grid = FractionGrid(cfg["K"])
    methods = {
        "L1": lambda c: regression.fit_statistics(samples, grid, regression.L1, c),
        "L2": lambda c: regression.fit_statistics(samples, grid, regression.L2, c),
        "L2_mapped": lambda c: regression.fit_mapped_quantiles(samples, grid, c),
    }
    results = {}
    for i in range(cfg["n_seeds"]):
        fc = FitConfig(cfg["learning_rate"], cfg["steps"], cfg["batch_size"], cfg["seed"] + i)
        for name, fit in methods.items():
            results[name, i] = fit(fc)
    for name in methods:
        buf = io.StringIO()
        buf.write("seed,step,mae\n")
        for i in range(cfg["n_seeds"]):
            for t, m in enumerate(results[name, i].mae, start=1):
                buf.write(f"{cfg['seed'] + i},{t},{m:.17g}\n")
        _write(out / f"regress_mae_{name}.csv", buf.getvalue())
    buf = io.StringIO()
    buf.write("method,seed,fraction,value\n")
    for (name, i), res in results.items():
        for f, v in zip(grid.levels, res.stats.values):
            buf.write(f"{name},{cfg['seed'] + i},{f:.17g},{v:.17g}\n")
    _write(out / "regress_stats.csv", buf.getvalue())
    buf = io.StringIO()
    buf.write("method,seed,final_mae,steps_to_threshold\n")
    for (name, i), res in results.items():
        hit = res.steps_to_reach(cfg["mae_threshold"])
        buf.write(f"{name},{cfg['seed'] + i},{res.mae[-1]:.17g},{'' if hit is None else hit}\n")
    _write(out / "regress_summary.csv", buf.getvalue())
    return EXIT_OK


def cmd_project(cfg: dict) -> int:
    if any(k < 1 for k in cfg["K_list"]) or not cfg["K_list"]:
        raise ConfigError("K_list must be a non-empty list of positive integers")
    if cfg["pair_K"] < 1 or cfg["pairs"] < 0 or cfg["pair_atoms"] < 1 or cfg["n_samples"] < 1:
        raise ConfigError("pair_K, pair_atoms and n_samples must be positive")
    if cfg["floor_rule"] not in ("snap", "lemma"):
        raise ConfigError(f"unknown floor_rule {cfg['floor_rule']!r}")
    out = _prepare_out(cfg["out"])
    d = _target(cfg, cfg["n_samples"], _seed_for(cfg["seed"], 0))
    rows = projection.convergence_study(d, cfg["K_list"], rule=cfg["floor_rule"])
    _write(out / "project_convergence.csv", projection.convergence_csv(rows))
    rng = make_rng(_seed_for(cfg["seed"], 1))
    n = cfg["pair_atoms"]
    buf = io.StringIO()
    buf.write("pair,lhs,rhs\n")
    for i in range(cfg["pairs"]):
        d1 = EmpiricalDistribution.from_weighted(rng.standard_normal(n), rng.dirichlet(np.ones(n)))
        d2 = EmpiricalDistribution.from_weighted(rng.standard_normal(n), rng.dirichlet(np.ones(n)))
        lhs, rhs = projection.nonexpansion_check(d1, d2, cfg["pair_K"], rule=cfg["floor_rule"])
        buf.write(f"{i},{lhs:.17g},{rhs:.17g}\n")
    _write(out / "project_pairs.csv", buf.getvalue())
    return EXIT_OK


def build_dp_mdp(cfg: dict) -> mdp_mod.TabularMDP:
    reward = _target(cfg, cfg["n_reward_atoms"], _seed_for(cfg["seed"], 0))
    if cfg["mdp"] == "chain":
        return mdp_mod.chain_mdp(cfg["n_states"], reward, gamma=cfg["gamma"])
    if cfg["mdp"] == "self_loop":
        return mdp_mod.self_loop_mdp(reward, cfg["gamma"])
    raise ConfigError(f"unknown mdp {cfg['mdp']!r}")


def cmd_dp(cfg: dict) -> int:
    if cfg["K"] < 1 or cfg["max_atoms"] < 1 or cfg["iterations"] < 1 or cfg["rollouts"] < 1:
        raise ConfigError("K, max_atoms, iterations and rollouts must be positive")
    if cfg["mdp"] == "self_loop" and cfg["gamma"] >= 1.0:
        raise ConfigError("the self-loop MDP needs gamma < 1")
    try:
        m = build_dp_mdp(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out = _prepare_out(cfg["out"])
    pi = mdp_mod.Policy.uniform(m)
    oracle = mdp_mod.return_distribution_oracle(m, pi, cfg["rollouts"], seed=_seed_for(cfg["seed"], 1))
    res = mdp_mod.iterate_dual(m, pi, cfg["K"], cfg["iterations"], reference=oracle,
                               max_atoms=cfg["max_atoms"], tol=cfg["tol"])
    buf = io.StringIO()
    buf.write("iteration,sup_w1_oracle,sup_w1_delta\n")
    for i, (e, dlt) in enumerate(zip(res.errors, res.deltas), start=1):
        buf.write(f"{i},{e:.17g},{dlt:.17g}\n")
    _write(out / "dp_iterations.csv", buf.getvalue())
    _write(out / "dp_table.csv", res.table.to_csv())
    _write(out / "dp_oracle.csv", oracle.to_csv())
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    bad = [v for v in cfg["variants"] if v not in agents.VARIANTS]
    if bad or not cfg["variants"]:
        raise ConfigError(f"unknown variant(s) {bad}; expected a subset of {agents.VARIANTS}")
    if cfg["steps"] < 0 or cfg["eval_every"] < 0 or cfg["n_seeds"] < 1:
        raise ConfigError("steps and eval_every must be non-negative, n_seeds positive")
    try:
        reward = _target(cfg, cfg["n_reward_atoms"], _seed_for(cfg["seed"], 0))
        m = mdp_mod.chain_mdp(cfg["n_states"], reward, gamma=cfg["gamma"])
        configs = [
            agents.AgentConfig(
                variant=v, seed=_seed_for(cfg["seed"], 1, i), kappa=cfg["kappa"],
                n_fractions=cfg["n_fractions"], z_lr=cfg["z_lr"], mapper_lr=cfg["mapper_lr"],
                target_update_period=cfg["target_update_period"],
                z_target_weight=cfg["z_target_weight"], polyak_weight=cfg["polyak_weight"],
                gamma=cfg["gamma"], hidden=cfg["hidden"], mapper_hidden=cfg["mapper_hidden"],
                updates_per_sample=cfg["updates_per_sample"])
            for v in cfg["variants"] for i in range(cfg["n_seeds"])
        ]
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out = _prepare_out(cfg["out"])
    first, last = 0, cfg["n_states"] - 1
    ratios = io.StringIO()
    ratios.write("variant,seed,expectile_ratio,quantile_ratio\n")
    for j, ac in enumerate(configs):
        i = j % cfg["n_seeds"]
        tag = f"{ac.variant}_seed{cfg['seed'] + i}"
        log.info("training %s", tag)
        tr = agents.train(m, ac, cfg["steps"], cfg["eval_every"] or None)
        _write(out / f"trace_{tag}.csv", tr.to_csv())
        _write(out / f"summary_{tag}.csv", tr.summary_csv())
        cols = []
        for kind in ("expectile", "quantile"):
            if kind in tr.final.stats[first]:
                cols.append(tr.spread(first, kind) / tr.spread(last, kind))
            else:
                cols.append(math.nan)
        ratios.write(f"{ac.variant},{cfg['seed'] + i},{cols[0]:.17g},{cols[1]:.17g}\n")
    _write(out / "spread_ratios.csv", ratios.getvalue())
    return EXIT_OK


def cmd_spread(cfg: dict) -> int:
    path = Path(cfg["trace"])
    if not path.is_file():
        raise ConfigError(f"trace file {path} does not exist")
    scale: float | None
    if cfg["scale"].strip().lower() == "auto":
        scale = None
    else:
        try:
            scale = float(cfg["scale"])
        except ValueError:
            raise ConfigError(f"bad scale {cfg['scale']!r}") from None
        if not scale > 0:
            raise ConfigError("scale must be positive")
    groups: dict[tuple[int, int, str], list[tuple[float, float]]] = {}
    with path.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["step", "state", "kind", "fraction", "value"]:
            raise ConfigError("trace CSV must have header step,state,kind,fraction,value")
        for row in reader:
            key = (int(row["step"]), int(row["state"]), row["kind"])
            groups.setdefault(key, []).append((float(row["fraction"]), float(row["value"])))
    out = _prepare_out(cfg["out"])
    buf = io.StringIO()
    buf.write("step,state,kind,spread\n")
    for (step, state, kind), pts in sorted(groups.items()):
        pts.sort()
        grid = FractionGrid(len(pts))
        if not np.allclose([p[0] for p in pts], grid.levels):
            raise ConfigError("trace fractions are not a mid-point grid")
        sv = regression.StatisticVector(grid, [p[1] for p in pts], kind)
        buf.write(f"{step},{state},{kind},{agents.spread_metric(sv, scale):.17g}\n")
    _write(out / "spread.csv", buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "regress": (cmd_regress, "static quantile vs expectile regression on a sampled target"),
    "project": (cmd_project, "W1 convergence and non-expansion of the dual projection"),
    "dp": (cmd_dp, "iterate the projected dual Bellman operator against a Monte-Carlo oracle"),
    "train": (cmd_train, "train TD agents on the chain MDP and record statistics"),
    "spread": (cmd_spread, "0.1-0.9 spread metrics from a training trace"),
}


def _keys_epilog(command: str) -> str:
    lines = ["recognized config keys (default):"]
    for k, spec in {**COMMON, **SCHEMAS[command]}.items():
        default = ",".join(map(str, spec.default)) if isinstance(spec.default, list) else spec.default
        lines.append(f"  {k} = {'<required>' if default is None else default}    {spec.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ieqn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_keys_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        raw: dict[str, str] = {}
        if args.config is not None:
            try:
                raw.update(parse_config_text(args.config.read_text()))
            except OSError as err:
                raise ConfigError(f"cannot read config: {err}") from None
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        if args.out is not None:
            raw["out"] = args.out
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        cfg = resolve_config(args.command, raw)
        return COMMANDS[args.command][0](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
