"""REINFORCE training for the sequence-level and token-level adapters.

Both trainers maximize expected terminal reward plus ``beta`` times the
policy entropy, with a reward baseline for variance reduction. All
randomness for batch ``s`` comes from ``substream(seed, "train-batch", s)``,
so a run resumed from a checkpoint replays the remaining batches exactly.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from adaptive_decoding.env import EpisodeRecord, ForkingChain, chain_rollout_batch
from adaptive_decoding.evaluation import PolicyMethod, evaluate
from adaptive_decoding.exceptions import InvalidConfigError, InvalidInputError, TrainingDivergedError
from adaptive_decoding.net import OptimizerState, adam_step
from adaptive_decoding.policy import (
    SeqPolicy,
    TokPolicy,
    load_policy,
    save_policy,
    seq_backward,
    seq_logits,
    softmax_rows,
    tok_backward,
    tok_features,
    tok_logits,
)
from adaptive_decoding.categorical import sample_rows
from adaptive_decoding.rng import substream

__all__ = ["EpisodeRecord", "TrainConfig", "compute_baseline", "train_seq", "train_tok"]

log = logging.getLogger(__name__)

VALIDATION_ID_OFFSET = 500_000


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-3
    lr_decay: float = 0.97
    epoch_steps: int = 100
    beta_start: float = 0.05
    beta_end: float = 0.005
    baseline: str = "batch_mean"
    ema_decay: float = 0.9
    budgets: tuple = (1, 2, 4, 8)
    fixed_budget: int = 1
    mask_threshold: float = 0.95
    filter_bounds: Optional[tuple] = (0.02, 0.98)
    filter_window: int = 50
    train_instances: int = 256
    eval_interval: int = 100
    eval_episodes: int = 200
    eval_k: int = 1
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        self.budgets = tuple(int(b) for b in self.budgets)
        if self.filter_bounds is not None:
            self.filter_bounds = tuple(float(b) for b in self.filter_bounds)
            if len(self.filter_bounds) != 2 or self.filter_bounds[0] > self.filter_bounds[1]:
                raise InvalidConfigError("filter_bounds must be [low, high] with low <= high")
        if self.steps < 0 or self.batch_size < 1 or self.epoch_steps < 1:
            raise InvalidConfigError("steps >= 0, batch_size >= 1 and epoch_steps >= 1 required")
        if self.beta_start < 0 or self.beta_end < 0:
            raise InvalidConfigError("entropy coefficients must be >= 0")
        if not 0 < self.mask_threshold <= 1:
            raise InvalidConfigError("mask_threshold must lie in (0, 1]")
        if self.baseline not in ("batch_mean", "ema"):
            raise InvalidConfigError(f"unknown baseline mode {self.baseline!r}")
        if not 0 <= self.ema_decay < 1:
            raise InvalidConfigError("ema_decay must lie in [0, 1)")
        if not self.budgets or min(self.budgets) < 1 or self.fixed_budget < 1:
            raise InvalidConfigError("budgets must be positive")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise InvalidConfigError("lr must be > 0 and lr_decay in (0, 1]")
        if self.train_instances < 1 or self.filter_window < 1 or self.eval_episodes < 2:
            raise InvalidConfigError("train_instances, filter_window >= 1 and eval_episodes >= 2 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budgets"] = list(self.budgets)
        d["filter_bounds"] = None if self.filter_bounds is None else list(self.filter_bounds)
        return d


def compute_baseline(rewards, mode: str = "batch_mean", previous: float = 0.0, decay: float = 0.9) -> float:
    """Batch mean, or one EMA update ``decay * previous + (1 - decay) * mean``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise InvalidInputError("baseline of an empty batch")
    if mode == "batch_mean":
        return float(r.mean())
    if mode == "ema":
        return float(decay * previous + (1.0 - decay) * r.mean())
    raise InvalidConfigError(f"unknown baseline mode {mode!r}")


def row_entropy(p: np.ndarray) -> np.ndarray:
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def objective_logit_grad(p, actions, advantages, beta: float, temperature: float = 1.0, keep=None):
    """d/d(logits) of ``adv * log p[a] + beta * H(p)`` per row, for ``p = softmax(logits / T)``.

    Rows with ``keep`` false are exactly zero.
    """
    n, A = p.shape
    onehot = np.zeros_like(p)
    onehot[np.arange(n), actions] = 1.0
    logp = np.log(np.where(p > 0, p, 1.0))
    H = -(p * logp).sum(axis=1, keepdims=True)
    g = np.asarray(advantages, dtype=np.float64)[:, None] * (onehot - p) - beta * p * (logp + H)
    g = g / temperature
    if keep is not None:
        g = np.where(np.asarray(keep, dtype=bool)[:, None], g, 0.0)
    return g


class PromptFilter:
    """Drops instances whose rolling mean reward leaves ``bounds`` once the window is full."""

    def __init__(self, bounds, window: int):
        self.bounds = bounds
        self.window = window
        self.history: dict = {}
        self.dropped: set = set()

    def update(self, ids, rewards):
        if self.bounds is None:
            return
        lo, hi = self.bounds
        for iid, r in zip(ids, rewards):
            h = self.history.setdefault(int(iid), deque(maxlen=self.window))
            h.append(float(r))
            if len(h) == self.window:
                m = sum(h) / len(h)
                if m < lo or m > hi:
                    self.dropped.add(int(iid))

    def eligible(self, n_pool: int) -> np.ndarray:
        idx = np.array([i for i in range(n_pool) if i not in self.dropped], dtype=np.int64)
        if idx.size == 0:
            log.warning("prompt filter excluded every training instance; sampling from the full pool")
            return np.arange(n_pool)
        return idx

    def state(self) -> dict:
        return {
            "history": {str(k): list(v) for k, v in sorted(self.history.items())},
            "dropped": sorted(self.dropped),
        }

    def restore(self, s: dict):
        self.history = {int(k): deque(v, maxlen=self.window) for k, v in s["history"].items()}
        self.dropped = set(s["dropped"])


@dataclass
class TraceRow:
    step: int
    mean_reward: float
    baseline: float
    entropy: float
    action_probs: list
    validation: Optional[float] = None
    n_masked: int = 0


class _Trainer:
    def __init__(self, policy, env, cfg: TrainConfig, opt_state: Optional[OptimizerState] = None, resume: Optional[dict] = None):
        self.policy = policy
        self.env = env
        self.cfg = cfg
        self.opt = opt_state or OptimizerState.for_params(policy.params(), base_lr=cfg.lr, decay=cfg.lr_decay)
        self.pool = env.sample_instances(cfg.train_instances, cfg.seed)
        self.validation = env.sample_instances(cfg.eval_episodes, cfg.seed, start_id=VALIDATION_ID_OFFSET)
        self.filter = PromptFilter(cfg.filter_bounds, cfg.filter_window)
        self.step = 0
        self.ema = 0.0
        self.trace: list = []
        if resume is not None:
            self.step = int(resume["step"])
            self.ema = float(resume["ema"])
            self.filter.restore(resume["filter"])

    def beta(self, step: int) -> float:
        if self.cfg.steps <= 1:
            return self.cfg.beta_start
        frac = min(step / (self.cfg.steps - 1), 1.0)
        return self.cfg.beta_start + frac * (self.cfg.beta_end - self.cfg.beta_start)

    def state(self) -> dict:
        return {"step": self.step, "ema": self.ema, "filter": self.filter.state()}

    def _baseline(self, rewards) -> float:
        b = compute_baseline(rewards, self.cfg.baseline, self.ema, self.cfg.ema_decay)
        if self.cfg.baseline == "ema":
            self.ema = b
        return b

    def _batch(self, rng):
        idx = self.filter.eligible(len(self.pool))
        pick = idx[rng.integers(idx.size, size=self.cfg.batch_size)]
        return [self.pool[i] for i in pick]

    def _apply(self, grads):
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient at step {self.step}")
        adam_step(self.policy.params(), grads, self.opt)

    def _validate(self) -> float:
        res = evaluate(
            PolicyMethod(self.policy, deterministic=True),
            self.env,
            k=self.cfg.eval_k,
            episodes=len(self.validation),
            seed=self.cfg.seed,
            instances=self.validation,
        )
        return res.mean

    def run(self, until: Optional[int] = None, checkpoint_fn=None):
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        while self.step < until:
            row = self.train_step(substream(self.cfg.seed, "train-batch", self.step))
            self.step += 1
            if self.step % self.cfg.epoch_steps == 0:
                self.opt.end_epoch()
            if self.cfg.eval_interval and (self.step % self.cfg.eval_interval == 0 or self.step == self.cfg.steps):
                row.validation = self._validate()
            self.trace.append(row)
            if checkpoint_fn is not None and self.cfg.checkpoint_interval and self.step % self.cfg.checkpoint_interval == 0:
                checkpoint_fn(self)
        return self.policy, self.trace

    def save(self, path, extra: Optional[dict] = None):
        meta = dict(extra or {})
        meta["trainer"] = self.state()
        meta["train_config"] = self.cfg.to_dict()
        save_policy(path, self.policy, self.opt, meta)


class SeqTrainer(_Trainer):
    def train_step(self, rng) -> TraceRow:
        pol: SeqPolicy = self.policy
        cfg = self.cfg
        insts = self._batch(rng)
        n = len(insts)
        E = self.env.features(insts)
        if pol.budget_aware:
            B = rng.choice(np.array(cfg.budgets), size=n)
        else:
            B = np.full(n, cfg.fixed_budget)
        logits, cache = seq_logits(pol, E, B if pol.budget_aware else None, train=True, rng=rng)
        p = softmax_rows(logits, pol.temperature)
        a = sample_rows(p, rng)
        rewards = np.array(
            [self.env.episode_reward(inst, pol.actions[a[i]], int(B[i]), rng) for i, inst in enumerate(insts)]
        )
        self.filter.update([inst.id for inst in insts], rewards)
        b = self._baseline(rewards)
        g = objective_logit_grad(p, a, rewards - b, self.beta(self.step), pol.temperature) / n
        self._apply(seq_backward(pol, cache, -g))
        return TraceRow(self.step, float(rewards.mean()), b, float(row_entropy(p).mean()), list(p.mean(axis=0)))


class TokTrainer(_Trainer):
    def train_step(self, rng) -> TraceRow:
        pol: TokPolicy = self.policy
        cfg = self.cfg
        env: ForkingChain = self.env
        insts = self._batch(rng)
        n = len(insts)
        steps = []

        def choose(t, obs, remaining):
            x = tok_features(obs, np.full(n, remaining), env.token_budget) if pol.budget_aware else obs
            logits, cache = tok_logits(pol, x, train=True, rng=rng)
            p = softmax_rows(logits, pol.temperature)
            a = sample_rows(p, rng)
            steps.append((cache, p, a))
            return a

        _, _, masks, rewards = chain_rollout_batch(env, insts, pol.actions, choose, rng, cfg.mask_threshold)
        self.filter.update([inst.id for inst in insts], rewards)
        b = self._baseline(rewards)
        adv = rewards - b
        beta = self.beta(self.step)
        grads = [np.zeros_like(q) for q in pol.params()]
        ent, probs, kept = 0.0, np.zeros(pol.n_actions), 0
        for t, (cache, p, a) in enumerate(steps):
            keep = ~masks[t]
            g = objective_logit_grad(p, a, adv, beta, pol.temperature, keep) / n
            for acc, gt in zip(grads, tok_backward(pol, cache, -g)):
                acc += gt
            ent += float(row_entropy(p)[keep].sum())
            probs += p[keep].sum(axis=0)
            kept += int(keep.sum())
        self._apply(grads)
        denom = max(kept, 1)
        return TraceRow(
            self.step, float(rewards.mean()), b, ent / denom, list(probs / denom), n_masked=int(masks.sum())
        )


def train_seq(policy: SeqPolicy, env, cfg: TrainConfig, checkpoint_fn=None):
    """Train a sequence-level policy in place; returns ``(policy, trace)``."""
    if policy.n_actions < 1:
        raise InvalidInputError("empty action set")
    return SeqTrainer(policy, env, cfg).run(checkpoint_fn=checkpoint_fn)


def train_tok(policy: TokPolicy, env, cfg: TrainConfig, checkpoint_fn=None):
    """Train a token-level policy in place; returns ``(policy, trace)``."""
    if policy.n_actions < 1:
        raise InvalidInputError("empty action set")
    return TokTrainer(policy, env, cfg).run(checkpoint_fn=checkpoint_fn)


def make_trainer(policy, env, cfg, opt_state=None, resume=None) -> _Trainer:
    cls = SeqTrainer if isinstance(policy, SeqPolicy) else TokTrainer
    return cls(policy, env, cfg, opt_state, resume)


def resume_trainer(path, env, cfg: TrainConfig) -> _Trainer:
    policy, state, header = load_policy(path)
    return make_trainer(policy, env, cfg, state, header["extra"]["trainer"])


def trace_to_csv(trace, action_names, provenance: Optional[dict] = None) -> str:
    import json

    buf = io.StringIO()
    if provenance is not None:
        buf.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "mean_reward", "baseline", "entropy", *[f"p_{n}" for n in action_names], "validation"])
    for r in trace:
        w.writerow(
            [
                r.step,
                repr(float(r.mean_reward)),
                repr(float(r.baseline)),
                repr(float(r.entropy)),
                *[repr(float(x)) for x in r.action_probs],
                "" if r.validation is None else repr(float(r.validation)),
            ]
        )
    return buf.getvalue()
