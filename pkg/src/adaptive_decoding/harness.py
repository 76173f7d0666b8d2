"""Command-line experiment runner.

Usage::

    adaptive-decoding select-actions --config run.json [--out DIR] [--seed N] [--workers N]
    adaptive-decoding train --config run.json [--checkpoint CKPT]   # resume from CKPT
    adaptive-decoding eval --config run.json --checkpoint A.ckpt [--checkpoint B.ckpt]
    adaptive-decoding sweep --config run.json

Every file written embeds the resolved config, so rerunning from it
reproduces the output byte for byte. Exit codes: 0 success, 1 usage or
config error, 2 runtime failure, 3 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from adaptive_decoding.actions import (
    DEFAULT_GRID,
    build_candidate_pool,
    estimate_reward_matrix,
    greedy_select,
    topk_by_mean_select,
)
from adaptive_decoding.categorical import TOKEN_LEVEL_ACTIONS, DecodingAction
from adaptive_decoding.env import ForkingChain, TwoRegime, make_env
from adaptive_decoding.evaluation import MixtureMethod, PolicyMethod, StaticMethod, evaluate
from adaptive_decoding.exceptions import (
    IncompatibleCheckpointError,
    InvalidConfigError,
    InvalidInputError,
    InvalidParameterError,
    TrainingDivergedError,
)
from adaptive_decoding.policy import load_policy, make_seq_policy, make_tok_policy
from adaptive_decoding.rng import substream
from adaptive_decoding.train import TrainConfig, make_trainer, resume_trainer, trace_to_csv

log = logging.getLogger("adaptive_decoding")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3
METRICS = ("pass@1", "pass@2", "pass@4", "pass@8")
METHODS = ("best_static", "mixed_static", "adapter_no_budget", "adapter_budget")

_TOP_KEYS = {"experiment", "seed", "env", "grid", "selection", "adapter", "train", "eval", "output_dir", "sweep"}
_REQUIRED = ("experiment", "seed", "env", "adapter")
_SELECTION_DEFAULTS = {"k": 6, "samples_per_cell": 8, "n_instances": 200, "method": "greedy"}
_ADAPTER_DEFAULTS = {
    "kind": None,
    "budget_aware": True,
    "hidden": [64, 64],
    "dropout": 0.1,
    "embed_dim": 8,
    "policy_temperature": 1.0,
    "actions": None,
}
_EVAL_DEFAULTS = {"metrics": list(METRICS), "episodes": 1000}
_SWEEP_DEFAULTS = {"seeds": [0, 1, 2], "budgets": [1, 2, 4, 8]}


def _merge(section: str, given, defaults: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise InvalidConfigError(f"'{section}' must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise InvalidConfigError(f"unknown {section} keys: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


@dataclass
class RunConfig:
    experiment: str
    seed: int
    env: dict
    grid: dict
    selection: dict
    adapter: dict
    train: TrainConfig
    eval: dict
    output_dir: str
    sweep: dict = field(default_factory=lambda: dict(_SWEEP_DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidConfigError("config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in _REQUIRED if k not in d]
        if missing:
            raise InvalidConfigError(f"missing required config keys: {missing}")
        seed = d["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise InvalidConfigError("seed must be a non-negative integer")

        adapter = _merge("adapter", d["adapter"], _ADAPTER_DEFAULTS)
        if adapter["kind"] not in ("seq", "tok"):
            raise InvalidConfigError(f"adapter kind must be 'seq' or 'tok', got {adapter['kind']!r}")
        if adapter["budget_aware"] not in (True, False, "both"):
            raise InvalidConfigError("adapter.budget_aware must be true, false or 'both'")
        if not all(isinstance(h, int) and h > 0 for h in adapter["hidden"]):
            raise InvalidConfigError("adapter.hidden must be a list of positive integers")
        if not 0 <= adapter["dropout"] < 1 or adapter["embed_dim"] < 1 or adapter["policy_temperature"] <= 0:
            raise InvalidConfigError("need dropout in [0, 1), embed_dim >= 1 and policy_temperature > 0")
        acts = adapter["actions"]
        if acts is not None and acts not in ("selected", "token_default") and not isinstance(acts, list):
            raise InvalidConfigError("adapter.actions must be 'selected', 'token_default' or a list of actions")

        train_d = dict(d.get("train") or {})
        if "seed" in train_d:
            raise InvalidConfigError("the training seed is the run seed; remove train.seed")
        train_d["seed"] = seed
        train = TrainConfig.from_dict(train_d)

        ev = _merge("eval", d.get("eval"), _EVAL_DEFAULTS)
        bad = [m for m in ev["metrics"] if m not in METRICS]
        if bad or not ev["metrics"]:
            raise InvalidConfigError(f"metrics must be a non-empty subset of {list(METRICS)}, got {ev['metrics']}")
        if ev["episodes"] < 2:
            raise InvalidConfigError("eval.episodes must be >= 2")

        sel = _merge("selection", d.get("selection"), _SELECTION_DEFAULTS)
        if sel["method"] not in ("greedy", "topk_mean"):
            raise InvalidConfigError("selection.method must be 'greedy' or 'topk_mean'")
        sweep = _merge("sweep", d.get("sweep"), _SWEEP_DEFAULTS)
        if not sweep["seeds"]:
            raise InvalidConfigError("sweep.seeds must be non-empty")
        if not sweep["budgets"] or min(sweep["budgets"]) < 1:
            raise InvalidConfigError("sweep.budgets must be positive")

        grid = d.get("grid")
        grid = copy.deepcopy(DEFAULT_GRID) if grid is None else copy.deepcopy(grid)
        build_candidate_pool(grid)  # validates
        if not isinstance(d["env"], dict):
            raise InvalidConfigError("'env' must be an object")
        cfg = cls(
            experiment=str(d["experiment"]),
            seed=seed,
            env=copy.deepcopy(d["env"]),
            grid=grid,
            selection=sel,
            adapter=adapter,
            train=train,
            eval=ev,
            output_dir=str(d.get("output_dir", "runs/" + str(d["experiment"]))),
            sweep=sweep,
        )
        cfg.build_env()  # validates the environment section
        return cfg

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "env": self.env,
            "grid": self.grid,
            "selection": self.selection,
            "adapter": self.adapter,
            "train": train,
            "eval": self.eval,
            "output_dir": self.output_dir,
            "sweep": self.sweep,
        }

    def with_overrides(self, seed=None, out=None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = int(seed)
        if out is not None:
            d["output_dir"] = str(out)
        return RunConfig.from_dict(d)

    # derived objects ---------------------------------------------------------
    def pool(self) -> list:
        explicit = self.env.get("actions")
        if self.env.get("kind") == "two_regime" and explicit is not None:
            return [DecodingAction.from_dict(a) for a in explicit]
        return build_candidate_pool(self.grid)

    def build_env(self):
        if self.env.get("kind") == "two_regime":
            return make_env(self.env, self.pool())
        return make_env(self.env)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise InvalidConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InvalidConfigError(f"config is not valid JSON: {e}") from e
    return RunConfig.from_dict(doc)


class OutputWriter:
    """The only place files are written; each write is atomic (temp file + rename)."""

    def __init__(self, root):
        self.root = Path(root)
        self.written: list = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(content)
        os.replace(tmp, p)
        self.written.append(p)
        return p

    def json(self, name: str, doc: dict) -> Path:
        return self.text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- selection --------------------------------------------------------------------


def run_selection(cfg: RunConfig, workers: int = 1):
    env = cfg.build_env()
    pool = cfg.pool()
    sel = cfg.selection
    instances = env.sample_instances(sel["n_instances"], cfg.seed, start_id=0)
    R = estimate_reward_matrix(env, pool, instances, sel["samples_per_cell"], seed=cfg.seed, workers=workers)
    k = min(sel["k"], len(pool))
    return R, greedy_select(R, k, pool), topk_by_mean_select(R, k, pool)


def adapter_actions(cfg: RunConfig, workers: int = 1) -> list:
    spec = cfg.adapter["actions"]
    if spec is None:
        spec = "token_default" if cfg.adapter["kind"] == "tok" else "selected"
    if spec == "token_default":
        return list(TOKEN_LEVEL_ACTIONS)
    if spec == "selected":
        _, gre, top = run_selection(cfg, workers)
        return (gre if cfg.selection["method"] == "greedy" else top).actions
    return [DecodingAction.from_dict(a) for a in spec]


def cmd_select_actions(cfg: RunConfig, workers: int = 1) -> int:
    R, gre, top = run_selection(cfg, workers)
    prov = {"config": cfg.to_dict()}
    out = OutputWriter(cfg.output_dir)
    out.text("reward_matrix.csv", R.to_csv(provenance=prov))
    out.text("actions_greedy.json", gre.to_json(provenance=prov))
    out.text("actions_topk_mean.json", top.to_json(provenance=prov))
    log.info("greedy selection: %s", [a.name for a in gre.actions])
    return EXIT_OK


# -- training ---------------------------------------------------------------------


def _check_adapter_env(cfg: RunConfig, env):
    kind = cfg.adapter["kind"]
    if kind == "tok" and not isinstance(env, ForkingChain):
        raise InvalidConfigError("a token-level adapter needs a forking_chain environment")
    if kind == "seq" and isinstance(env, ForkingChain):
        raise InvalidConfigError("a sequence-level adapter needs a two_regime environment")


def _awareness(cfg: RunConfig) -> tuple:
    flag = cfg.adapter["budget_aware"]
    return (False, True) if flag == "both" else (flag,)


def build_policy(cfg: RunConfig, env, actions, budget_aware: Optional[bool] = None):
    a = cfg.adapter
    aware = a["budget_aware"] if budget_aware is None else budget_aware
    rng = substream(cfg.seed, "policy-init", a["kind"], int(aware))
    if a["kind"] == "seq":
        return make_seq_policy(
            env.obs_dim, actions, rng, aware, tuple(a["hidden"]), a["embed_dim"], a["dropout"], a["policy_temperature"]
        )
    return make_tok_policy(env.obs_dim, rng, actions, aware, tuple(a["hidden"]), a["dropout"], a["policy_temperature"])


def train_run(cfg: RunConfig, out: Optional[OutputWriter], actions=None, resume=None, budget_aware=None, workers=1):
    """Train one adapter; writes checkpoints and trace when ``out`` is given."""
    env = cfg.build_env()
    _check_adapter_env(cfg, env)
    if actions is None:
        actions = adapter_actions(cfg, workers)
    prov = {"config": cfg.to_dict()}
    if resume is not None:
        trainer = resume_trainer(resume, env, cfg.train)
        if trainer.policy.actions != list(actions):
            raise IncompatibleCheckpointError("checkpoint action set does not match the config")
    else:
        trainer = make_trainer(build_policy(cfg, env, actions, budget_aware), env, cfg.train)

    tag = "budget" if trainer.policy.budget_aware else "no_budget"

    def checkpoint(tr):
        if out is not None:
            tr.save(out.path(f"checkpoints/{tag}_step{tr.step:06d}.ckpt"), prov)

    trainer.run(checkpoint_fn=checkpoint)
    if out is not None:
        trainer.save(out.path(f"policy_{tag}.ckpt"), prov)
        names = [a.name for a in trainer.policy.actions]
        out.text(f"trace_{tag}.csv", trace_to_csv(trainer.trace, names, provenance=prov))
    return trainer


def cmd_train(cfg: RunConfig, checkpoints=(), workers: int = 1) -> int:
    if len(checkpoints) > 1:
        raise InvalidConfigError("train resumes from at most one checkpoint")
    out = OutputWriter(cfg.output_dir)
    actions = adapter_actions(cfg, workers)
    if checkpoints:
        train_run(cfg, out, actions=actions, resume=checkpoints[0])
    else:
        for aware in _awareness(cfg):
            train_run(cfg, out, actions=actions, budget_aware=aware)
    out.json("config.json", cfg.to_dict())
    return EXIT_OK


# -- evaluation -------------------------------------------------------------------


def _metric_k(metric: str) -> int:
    return int(metric.split("@")[1])


@dataclass
class RunReport:
    metrics: list
    table: dict  # method -> metric -> {"mean", "half_width"} or None
    best_static_action: dict  # metric -> action name
    config: dict = field(default_factory=dict)

    def delta(self, method: str, metric: str):
        cell, base = self.table[method][metric], self.table["best_static"][metric]
        if cell is None:
            return None, None
        d = cell["mean"] - base["mean"]
        return d, (d / base["mean"] if base["mean"] != 0 else None)

    def to_dict(self) -> dict:
        deltas = {
            m: {k: dict(zip(("abs", "rel"), self.delta(m, k))) for k in self.metrics} for m in METHODS
        }
        return {
            "metrics": self.metrics,
            "table": self.table,
            "best_static_action": self.best_static_action,
            "deltas_vs_best_static": deltas,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps({"config": self.config}, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "metric", "mean", "ci_low", "ci_high", "delta_abs", "delta_rel"])
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        for m in METHODS:
            for k in self.metrics:
                cell = self.table[m][k]
                if cell is None:
                    w.writerow([m, k, "", "", "", "", ""])
                    continue
                d_abs, d_rel = self.delta(m, k)
                lo, hi = cell["mean"] - cell["half_width"], cell["mean"] + cell["half_width"]
                w.writerow([m, k, fmt(cell["mean"]), fmt(lo), fmt(hi), fmt(d_abs), fmt(d_rel)])
        return buf.getvalue()


def _cell(res) -> dict:
    return {"mean": res.mean, "half_width": res.half_width}


def evaluate_methods(cfg: RunConfig, env, actions, policies: dict, metrics, episodes: int, seed: int) -> RunReport:
    """Evaluate the four report columns on the same fresh instances.

    ``policies`` maps "adapter_no_budget" / "adapter_budget" to policies;
    missing entries give empty columns.
    """
    table = {m: {} for m in METHODS}
    best_name = {}
    for metric in metrics:
        k = _metric_k(metric)
        statics = [evaluate(StaticMethod(a), env, k, episodes, seed) for a in actions]
        j = int(np.argmax([r.mean for r in statics]))
        table["best_static"][metric] = _cell(statics[j])
        best_name[metric] = actions[j].name
        table["mixed_static"][metric] = _cell(evaluate(MixtureMethod(actions), env, k, episodes, seed))
        for col in ("adapter_no_budget", "adapter_budget"):
            pol = policies.get(col)
            table[col][metric] = None if pol is None else _cell(evaluate(PolicyMethod(pol), env, k, episodes, seed))
    return RunReport(list(metrics), table, best_name, cfg.to_dict())


def cmd_eval(cfg: RunConfig, checkpoints, workers: int = 1) -> int:
    if not checkpoints:
        raise InvalidConfigError("eval needs at least one --checkpoint")
    env = cfg.build_env()
    _check_adapter_env(cfg, env)
    actions = adapter_actions(cfg, workers)
    policies = {}
    for path in checkpoints:
        pol, _, _ = load_policy(path, expected_actions=actions)
        col = "adapter_budget" if pol.budget_aware else "adapter_no_budget"
        if col in policies:
            raise InvalidConfigError(f"two checkpoints map to the {col} column")
        policies[col] = pol
    report = evaluate_methods(cfg, env, actions, policies, cfg.eval["metrics"], cfg.eval["episodes"], cfg.seed)
    out = OutputWriter(cfg.output_dir)
    out.text("report.json", report.to_json())
    out.text("report.csv", report.to_csv())
    return EXIT_OK


# -- sweep ------------------------------------------------------------------------


def _sweep_child(args):
    cfg_dict, seed, actions_d = args
    cfg = RunConfig.from_dict(cfg_dict).with_overrides(seed=seed)
    actions = [DecodingAction.from_dict(a) for a in actions_d]
    try:
        trainer = train_run(cfg, None, actions=actions, budget_aware=_awareness(cfg)[-1])
        env = cfg.build_env()
        rows = []
        for B in cfg.sweep["budgets"]:
            episodes = cfg.eval["episodes"]
            statics = [evaluate(StaticMethod(a), env, B, episodes, seed).mean for a in actions]
            rows.append(
                {
                    "seed": seed,
                    "budget": B,
                    "best_static": max(statics),
                    "mixed_static": evaluate(MixtureMethod(actions), env, B, episodes, seed).mean,
                    "adapter": evaluate(PolicyMethod(trainer.policy), env, B, episodes, seed).mean,
                    "status": "ok",
                }
            )
        return rows
    except TrainingDivergedError as e:
        return [{"seed": seed, "budget": B, "status": f"diverged: {e}"} for B in cfg.sweep["budgets"]]
    except Exception as e:  # recorded; the sweep continues
        return [{"seed": seed, "budget": B, "status": f"failed: {type(e).__name__}: {e}"} for B in cfg.sweep["budgets"]]


def t_interval(values):
    """Mean and 95% t half-width over seed means; half-width is None for one seed."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), None
    half = float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
    return float(v.mean()), half


def cmd_sweep(cfg: RunConfig, workers: int = 1) -> int:
    env = cfg.build_env()
    _check_adapter_env(cfg, env)
    actions = adapter_actions(cfg, workers)
    jobs = [(cfg.to_dict(), int(s), [a.to_dict() for a in actions]) for s in cfg.sweep["seeds"]]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_child, jobs))
    else:
        results = [_sweep_child(j) for j in jobs]
    rows = sorted((r for rs in results for r in rs), key=lambda r: (r["seed"], r["budget"]))

    cols = ("best_static", "mixed_static", "adapter")
    buf = io.StringIO()
    buf.write("# " + json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "budget", *cols, "status"])
    for r in rows:
        w.writerow([r["seed"], r["budget"], *[repr(float(r[c])) if c in r else "" for c in cols], r["status"]])

    summary = io.StringIO()
    summary.write("# " + json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
    ws = csv.writer(summary, lineterminator="\n")
    ws.writerow(["budget", "method", "n_seeds", "mean", "ci_low", "ci_high"])
    for B in cfg.sweep["budgets"]:
        ok = [r for r in rows if r["budget"] == B and r["status"] == "ok"]
        for c in cols:
            if not ok:
                ws.writerow([B, c, 0, "undefined", "undefined", "undefined"])
                continue
            mean, half = t_interval([r[c] for r in ok])
            lo = "undefined" if half is None else repr(mean - half)
            hi = "undefined" if half is None else repr(mean + half)
            ws.writerow([B, c, len(ok), repr(mean), lo, hi])

    out = OutputWriter(cfg.output_dir)
    out.text("sweep.csv", buf.getvalue())
    out.text("sweep_summary.csv", summary.getvalue())
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        log.error("%d sweep rows failed", len(failed))
        return EXIT_DIVERGED if all(r["status"].startswith("diverged") for r in failed) else EXIT_RUNTIME
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adaptive-decoding", description="Adaptive decoding experiments on synthetic verifiers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("select-actions", "train", "eval", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run config")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="override the output directory")
        s.add_argument("--workers", type=int, default=1, help="parallel rollout workers")
        s.add_argument("--checkpoint", action="append", default=[], help="policy checkpoint (repeatable)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise InvalidConfigError("--workers must be >= 1")
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
        if args.command == "select-actions":
            return cmd_select_actions(cfg, args.workers)
        if args.command == "train":
            return cmd_train(cfg, args.checkpoint, args.workers)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.workers)
        return cmd_sweep(cfg, args.workers)
    except (InvalidConfigError, InvalidParameterError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        log.error("training diverged: %s", e)
        return EXIT_DIVERGED
    except (IncompatibleCheckpointError, InvalidInputError, OSError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
