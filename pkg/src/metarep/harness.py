"""Command-line entry point and experiment orchestration.

Subcommands: gen-mdp, verify-bounds, train, robustness, ablation and
replay-counterexample. Every output file is written atomically and contains
no wall-clock data, so identical inputs give byte-identical outputs; timings
go to stderr only.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import os
import re
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bounds import THEOREMS, compute_report, lift_pair, random_instance
from .mdp import TabularMdp, random_mdp
from .policy import ARCHES, ObservationPolicy
from .rendering import FAMILY_IDS, RenderingFamily, coin_gridworld, family_from_dict, make_family
from .robustness import (embeddings_csv, export_embeddings, feature_dispersion, frozen_encoder_retrain,
                         make_suite, robustness_test)
from .seeding import seed_tree
from .trainer import METRIC_COLUMNS, PpoConfig, TrainResult, exact_returns, train

__all__ = [
    "WORKERS_ENV",
    "UsageError",
    "run_cli",
    "main",
    "write_atomic",
    "dumps",
    "metrics_csv",
    "build_environment",
    "load_environment",
    "campaign",
    "directional_comparison",
]

WORKERS_ENV = "METAREP_WORKERS"
ENVS = ("coin-grid", "random")
COMMANDS = ("gen-mdp", "verify-bounds", "train", "robustness", "ablation", "replay-counterexample")
# keys that only make sense on the command line
_CLI_ONLY = {"config", "out", "command", "help"}


class UsageError(Exception):
    """Bad input from the user; reported with exit code 2."""


# ---------------------------------------------------------------- file output

def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, default=_json_default) + "\n"


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


# ---------------------------------------------------------------- environments

def build_environment(env: str, family_id: str, n_functions: int, n_train: int, seed: int,
                      obs_dim: int | None = None, width: int = 5, height: int = 1, palette: int = 4,
                      states: int = 6, actions: int = 3, gamma: float | None = None):
    """Underlying MDP plus rendering family for a named environment."""
    semantics = None
    if env == "coin-grid":
        mdp, semantics = coin_gridworld(width, height, palette, gamma=0.99 if gamma is None else gamma)
        base_dim = semantics.feature_dim
    elif env == "random":
        mdp = random_mdp(states, actions, seed_tree(seed, "mdp"), gamma=0.9 if gamma is None else gamma)
        base_dim = mdp.n_states
    else:
        raise UsageError(f"unknown env {env!r}; expected one of {ENVS}")
    if obs_dim is None:
        if family_id == "affine":
            obs_dim = max(2, math.ceil(math.log2(max(mdp.n_states, 2))) + 1)
        else:
            obs_dim = base_dim + 2
    family = make_family(mdp, family_id, n_functions, n_train, obs_dim, seed_tree(seed, "family"),
                         semantics=semantics)
    return mdp, family


def environment_dict(mdp: TabularMdp, family: RenderingFamily) -> dict:
    return {"mdp": mdp.to_dict(), "family": family.to_dict()}


def load_environment(path) -> tuple[TabularMdp, RenderingFamily]:
    """Read a ``{"mdp", "family"}`` file as written by gen-mdp or train."""
    data = _read_json(path)
    if not isinstance(data, dict) or "mdp" not in data or "family" not in data:
        raise UsageError(f"{path}: expected an object with 'mdp' and 'family' keys")
    try:
        return TabularMdp.from_dict(data["mdp"]), family_from_dict(data["family"])
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_checkpoint(path) -> ObservationPolicy:
    try:
        return ObservationPolicy.from_dict(_read_json(path))
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"{path}: not a policy checkpoint ({exc})") from None


# ---------------------------------------------------------------- workers

def worker_count(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


def _map(fn, items: list, workers: int) -> list:
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- bound campaign

def _campaign_instance(job):
    index, seed, sizes = job
    mdp, family, pi, pi_tilde = random_instance(seed_tree(seed, "campaign", index), **sizes)
    report = compute_report(lift_pair(pi, pi_tilde, family, mdp), family, mdp)
    return index, (mdp, family, pi, pi_tilde), report


def campaign(n_instances: int, seed: int, workers: int = 1, **sizes):
    """Randomized bound verification; same instances as :func:`bounds.run_campaign`.

    Returns ``(reports, summary, failing)`` where ``failing`` lists
    ``(index, instance, report)`` for every violated instance.
    """
    jobs = [(i, seed, sizes) for i in range(n_instances)]
    results = sorted(_map(_campaign_instance, jobs, workers), key=lambda r: r[0])
    reports = [r for _, _, r in results]
    failing = [(i, inst, r) for i, inst, r in results if not r.all_hold]
    # min and count are order-free, so the aggregation is worker-independent
    min_slack = {t: min((r.slack(t) for r in reports), default=math.inf) for t in THEOREMS}
    summary = {"instances": n_instances, "failures": len(failing), "min_slack_per_theorem": min_slack}
    return reports, summary, failing


def counterexample_dict(instance, report) -> dict:
    mdp, family, pi, pi_tilde = instance
    return {
        "mdp": mdp.to_dict(),
        "family": family.to_dict(),
        "pi": pi.to_dict(),
        "pi_tilde": pi_tilde.to_dict(),
        "report": report.to_dict(),
    }


# ---------------------------------------------------------------- training sweeps

def _train_job(job):
    mdp, family, config, mode = job
    return train(mdp, family, config, mode)


def directional_comparison(mdp: TabularMdp, family: RenderingFamily, config: PpoConfig, seeds,
                           n_perturbations: int = 100, n_steps: int = 100, retrain_config: PpoConfig | None = None,
                           workers: int = 1) -> list[dict]:
    """Paired baseline-vs-DML comparison, one row per seed.

    Each row holds the exact generalization return of both modes (DML
    averaged over its two agents), the robustness summary of both and the
    exact generalization return after retraining heads on each frozen
    encoder.
    """
    seeds = list(seeds)
    jobs = [(mdp, family, dataclasses.replace(config, seed=s), m) for s in seeds for m in ("baseline", "dml")]
    trained = _map(_train_job, jobs, workers)
    retrain_config = retrain_config or config
    retrain_jobs = []
    rows = []
    for k, s in enumerate(seeds):
        base, dml = trained[2 * k].agents, trained[2 * k + 1].agents
        suite = make_suite(family.obs_dim, n_perturbations, seed_tree(s, "suite"))
        rob_seed = seed_tree(s, "robustness")
        row = {"seed": s}
        row["zeta_baseline"] = exact_returns(base[0], family, mdp)[1]
        row["zeta_dml"] = float(np.mean([exact_returns(a, family, mdp)[1] for a in dml]))
        row["robustness_baseline"] = robustness_test(base[0], mdp, family, suite, n_steps, seed=rob_seed).summary_mean
        row["robustness_dml"] = float(np.mean(
            [robustness_test(a, mdp, family, suite, n_steps, seed=rob_seed).summary_mean for a in dml]))
        rows.append(row)
        rc = dataclasses.replace(retrain_config, seed=s)
        retrain_jobs += [(base[0], mdp, family, rc), (dml[0], mdp, family, rc)]
    retrained = _map(_retrain_job, retrain_jobs, workers)
    for k, row in enumerate(rows):
        row["zeta_frozen_baseline"] = retrained[2 * k]
        row["zeta_frozen_dml"] = retrained[2 * k + 1]
    return rows


def _retrain_job(job):
    ckpt, mdp, family, config = job
    result = frozen_encoder_retrain(ckpt, mdp, family, config, evaluate=False)
    return exact_returns(result.agents[0], family, mdp)[1]


# ---------------------------------------------------------------- argument parsing

def _add_family_args(p, family_default="distractor-correlated"):
    p.add_argument("--env", choices=ENVS, default="coin-grid")
    p.add_argument("--family", choices=FAMILY_IDS, default=family_default)
    p.add_argument("--n-functions", type=int, default=8)
    p.add_argument("--n-train", type=int, default=4)
    p.add_argument("--obs-dim", type=int, default=None)
    p.add_argument("--width", type=int, default=5)
    p.add_argument("--height", type=int, default=1)
    p.add_argument("--palette", type=int, default=4)
    p.add_argument("--states", type=int, default=6)
    p.add_argument("--actions", type=int, default=3)


def _add_ppo_args(p):
    for f in dataclasses.fields(PpoConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            kind = _parse_bool
        elif f.type in ("int", int):
            kind = int
        elif f.type in ("float", float):
            kind = float
        else:
            kind = str
        choices = None
        if f.name == "arch":
            choices = ARCHES
        elif f.name == "kl_grad_mode":
            choices = ("stop", "joint")
        p.add_argument(flag, type=kind, choices=choices, default=None, dest=f.name,
                       help=f"PPO setting (default {f.default})")


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metarep", description="Generalization-bound verification and "
                                     "mutual-learning experiments on tabular obfuscated MDPs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-mdp", help="generate an underlying MDP and rendering family")
    _add_family_args(p, family_default="affine")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify-bounds", help="randomized bound verification campaign")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--states", type=int, default=None)
    p.add_argument("--actions", type=int, default=None)
    p.add_argument("--functions", type=int, default=None)
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train baseline PPO or a mutually learning pair")
    p.add_argument("--mode", choices=("baseline", "dml"), default="baseline")
    _add_family_args(p)
    p.add_argument("--env-file", default=None, help="load mdp and family from a gen-mdp file")
    p.add_argument("--seed", type=int, default=0)
    _add_ppo_args(p)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("robustness", help="KL sensitivity to random linear input maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--family", required=True, help="file with mdp and family (gen-mdp or run env.json)")
    p.add_argument("--n-perturbations", type=int, default=100)
    p.add_argument("--n-steps", type=int, default=100)
    p.add_argument("--split", choices=("train", "eval", "all"), default="eval")
    p.add_argument("--direction", choices=("forward", "reverse"), default="forward")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embeddings", default=None, help="also write an embeddings CSV here")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablation", help="retrain fresh heads on a frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--family", required=True, help="file with mdp and family (gen-mdp or run env.json)")
    p.add_argument("--seed", type=int, default=0)
    _add_ppo_args(p)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("replay-counterexample", help="recompute the bound report of a saved instance")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    return parser


# ---------------------------------------------------------------- config files

_SECTION_RE = re.compile(r"^\s*\[")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _key_lines(lines: list[str]) -> dict:
    """``(section, key) -> line number`` for diagnostics."""
    where, section = {}, None
    for n, line in enumerate(lines, start=1):
        stripped = line.strip()
        if _SECTION_RE.match(line):
            section = stripped.strip("[]").strip()
        elif (m := _KEY_RE.match(line)) and not stripped.startswith(("#", ";")):
            where[(section, m.group(1).strip().lower().replace("-", "_"))] = n
    return where


def load_config(path, command: str) -> tuple[dict, dict]:
    """Read a key=value config file.

    Sections are named after subcommands; keys before the first section
    header belong to ``command``. Returns ``(values, line_numbers)`` for
    ``command``'s section with keys normalized to snake_case.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"no such config file: {path}") from None
    lines = text.splitlines()
    first = next((ln for ln in lines if ln.strip() and not ln.strip().startswith(("#", ";"))), "")
    offset = 0
    if first and not _SECTION_RE.match(first):
        text = f"[{command}]\n{text}"
        lines = [f"[{command}]"] + lines
        offset = 1
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00none", strict=True)
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise UsageError(f"{path}:{exc.lineno - offset}: expected a [section] header") from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] - offset if exc.errors else 0
        raise UsageError(f"{path}:{lineno}: malformed line, expected key = value") from None
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f"{path}:{lineno - offset}" if lineno else str(path)
        raise UsageError(f"{where}: {exc.message}") from None
    where = {k: v - offset for k, v in _key_lines(lines).items()}
    for section in parser.sections():
        if section not in COMMANDS:
            line = next((n for n, ln in enumerate(lines, 1) if ln.strip() == f"[{section}]"), 0) - offset
            raise UsageError(f"{path}:{line}: unknown section [{section}]")
    values = {}
    if parser.has_section(command):
        for key, raw in parser.items(command):
            norm = key.strip().lower().replace("-", "_")
            values[norm] = raw.strip().strip('"').strip("'")
    lines_for = {k: n for (s, k), n in where.items() if s == command}
    return values, lines_for


def _apply_config(parser: argparse.ArgumentParser, argv: list, args) -> argparse.Namespace:
    sub = parser._subparsers._group_actions[0].choices[args.command]
    values, lines = load_config(args.config, args.command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        line = lines.get(key, "?")
        if key in _CLI_ONLY or key not in actions:
            raise UsageError(f"{args.config}:{line}: unknown key {key!r} for {args.command}")
        action = actions[key]
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"{args.config}:{line}: invalid value {raw!r} for {key}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}:{line}: {key} must be one of {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    # required options may now come from the config file
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def _ppo_config(args, mdp: TabularMdp) -> PpoConfig:
    """PPO settings from flags and config; the discount defaults to the MDP's."""
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(PpoConfig)
              if f.name != "seed" and getattr(args, f.name, None) is not None}
    values["seed"] = args.seed
    values.setdefault("gamma", mdp.gamma)
    try:
        return PpoConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


# ---------------------------------------------------------------- commands

def _cmd_gen_mdp(args) -> int:
    mdp, family = _environment_from_args(args)
    write_atomic(args.out, dumps(environment_dict(mdp, family)))
    print(args.out)
    return 0


def _environment_from_args(args):
    try:
        return build_environment(args.env, args.family, args.n_functions, args.n_train, args.seed,
                                 obs_dim=args.obs_dim, width=args.width, height=args.height,
                                 palette=args.palette, states=args.states, actions=args.actions,
                                 gamma=getattr(args, "gamma", None))
    except (ValueError, RuntimeError) as exc:
        raise UsageError(str(exc)) from None


def _cmd_verify_bounds(args) -> int:
    sizes = {"n_states": args.states, "n_actions": args.actions, "n_functions": args.functions,
             "n_train": args.train, "gamma": args.gamma}
    if args.instances < 0:
        raise UsageError("--instances must be >= 0")
    if args.train is not None and args.functions is not None and not 1 <= args.train <= args.functions:
        raise UsageError("--train must lie in [1, --functions]")
    reports, summary, failing = campaign(args.instances, args.seed, worker_count(args.workers), **sizes)
    write_atomic(args.out, dumps({"reports": [r.to_dict() for r in reports], "summary": summary}))
    print(json.dumps(summary, default=_json_default))
    if failing:
        out = Path(args.out)
        for index, instance, report in failing:
            path = out.with_name(f"{out.stem}.counterexample-{index}.json")
            write_atomic(path, dumps(counterexample_dict(instance, report)))
            print(f"counterexample: {path}")
        return 1
    return 0


def _write_run(out: Path, result: TrainResult, mdp, family, config: PpoConfig, extra: dict) -> None:
    write_atomic(out / "metrics.csv", metrics_csv(result.metrics))
    write_atomic(out / "env.json", dumps(environment_dict(mdp, family)))
    write_atomic(out / "config.ini", "[train]\n" + "".join(
        f"{k} = {v}\n" for k, v in config.to_dict().items()))
    finals = []
    for i, agent in enumerate(result.agents):
        write_atomic(out / f"agent_{i}.json", agent.to_json() + "\n")
        eta, zeta = exact_returns(agent, family, mdp)
        finals.append({"agent": i, "eta_exact": eta, "zeta_exact": zeta})
    write_atomic(out / "summary.json", dumps({**extra, "final": finals}))


def _cmd_train(args) -> int:
    if args.env_file:
        mdp, family = load_environment(args.env_file)
    else:
        mdp, family = _environment_from_args(args)
    config = _ppo_config(args, mdp)
    try:
        result = train(mdp, family, config, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_run(Path(args.out), result, mdp, family, config, {"mode": args.mode})
    print(args.out)
    return 0


def _cmd_robustness(args) -> int:
    policy = _load_checkpoint(args.checkpoint)
    mdp, family = load_environment(args.family)
    if policy.obs_dim != family.obs_dim:
        raise UsageError(f"checkpoint obs_dim {policy.obs_dim} != family obs_dim {family.obs_dim}")
    suite = make_suite(family.obs_dim, args.n_perturbations, args.seed)
    try:
        record = robustness_test(policy, mdp, family, suite, args.n_steps, args.split,
                                 seed=seed_tree(args.seed, "rollout"), direction=args.direction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = record.to_dict()
    if args.embeddings:
        rows = export_embeddings(policy, family.tables().reshape(-1, family.obs_dim), suite)
        write_atomic(args.embeddings, embeddings_csv(rows))
        out["feature_dispersion"] = feature_dispersion(rows)
    write_atomic(args.out, dumps(out))
    print(json.dumps({"summary_mean": record.summary_mean, "summary_std": record.summary_std}))
    return 0


def _cmd_ablation(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    mdp, family = load_environment(args.family)
    config = _ppo_config(args, mdp)
    try:
        result = frozen_encoder_retrain(ckpt, mdp, family, config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_run(Path(args.out), result, mdp, family, config, {"mode": "frozen-encoder"})
    print(args.out)
    return 0


def _cmd_replay(args) -> int:
    data = _read_json(args.input)
    try:
        mdp = TabularMdp.from_dict(data["mdp"])
        family = family_from_dict(data["family"])
        pi = ObservationPolicy.from_dict(data["pi"])
        pi_tilde = ObservationPolicy.from_dict(data["pi_tilde"])
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"{args.input}: not a counterexample file ({exc})") from None
    report = compute_report(lift_pair(pi, pi_tilde, family, mdp), family, mdp)
    text = dumps(report.to_dict())
    if args.out:
        write_atomic(args.out, text)
    failed = [t for t in THEOREMS if not getattr(report, f"holds_{t}")]
    print(json.dumps({"failed": failed}))
    return 1 if failed else 0


_HANDLERS = {
    "gen-mdp": _cmd_gen_mdp,
    "verify-bounds": _cmd_verify_bounds,
    "train": _cmd_train,
    "robustness": _cmd_robustness,
    "ablation": _cmd_ablation,
    "replay-counterexample": _cmd_replay,
}


def run_cli(argv=None) -> int:
    """Run one subcommand; returns 0 on success, 1 on a violated bound, 2 on bad usage."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    start = time.perf_counter()
    try:
        if getattr(args, "config", None):
            try:
                args = _apply_config(parser, argv, args)
            except SystemExit as exc:
                return int(exc.code or 0)
        code = _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"metarep {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.command} finished in {time.perf_counter() - start:.2f}s", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run_cli())
