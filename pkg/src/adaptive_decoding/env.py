"""Synthetic frozen-generator environments with verifiable terminal rewards.

``ForkingChain`` is a token-level environment: a fixed-length chain where a
few planted fork steps put the only viable continuation below the argmax,
and every other step has a single correct token plus a dead-end token.
Greedy decoding always fails, uniform stochasticity almost always fails,
and the optimum (greedy off-fork, hot at forks) has a closed form.

``TwoRegime`` is a sequence-level environment: each instance belongs to one
of two classes with different per-action success rates, observable through
noisy class features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from adaptive_decoding.categorical import DecodingAction, apply_action, apply_actions, sample_rows, softmax
from adaptive_decoding.exceptions import InvalidConfigError, InvalidInputError
from adaptive_decoding.rng import substream

# finite stand-in for log(0); exp underflows to exactly 0 after max-subtraction
LOGIT_FLOOR = -1.0e4
Z_95 = 1.959963984540054


@dataclass
class EpisodeRecord:
    instance_id: int
    context: Optional[np.ndarray] = None
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    dists: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    reward: float = 0.0
    budget_used: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "instance_id": int(self.instance_id),
                "actions": [int(a) for a in self.actions],
                "reward": float(self.reward),
                "length": int(self.budget_used),
            },
            sort_keys=True,
        )


def write_episode_log(path, records: Sequence[EpisodeRecord]):
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def _rows(rngs, n):
    if isinstance(rngs, np.random.Generator):
        return None
    if len(rngs) != n:
        raise InvalidInputError(f"expected {n} row generators, got {len(rngs)}")
    return rngs


def uniform_draws(rngs, n: int) -> np.ndarray:
    per_row = _rows(rngs, n)
    if per_row is None:
        return rngs.random(n)
    return np.array([g.random() for g in per_row])


def normal_draws(rngs, n: int, d: int) -> np.ndarray:
    per_row = _rows(rngs, n)
    if per_row is None:
        return rngs.standard_normal((n, d))
    return np.vstack([g.standard_normal(d) for g in per_row])


def sample_rows_from(probs: np.ndarray, rngs) -> np.ndarray:
    """Inverse-CDF sampling with either one shared generator or one per row."""
    if isinstance(rngs, np.random.Generator):
        return sample_rows(probs, rngs)
    u = uniform_draws(rngs, probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


# -- pass@k -------------------------------------------------------------------


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: ``1 - C(n-c, k) / C(n, k)``."""
    if not 0 <= c <= n:
        raise InvalidInputError(f"need 0 <= c <= n, got n={n}, c={c}")
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= n, got n={n}, k={k}")
    if n - c < k:
        return 1.0
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


# -- forking chain --------------------------------------------------------------


@dataclass(frozen=True)
class ForkingChainSpec:
    length: int = 20
    fork_positions: tuple = (6, 13)
    fork_viable: float = 0.45
    noise: float = 0.3
    vocab_size: int = 8
    noise_tokens: int = 1
    obs_noise: float = 0.1
    token_budget: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "fork_positions", tuple(int(t) for t in self.fork_positions))
        if self.length < 1:
            raise InvalidConfigError("chain length must be >= 1")
        if len(set(self.fork_positions)) != len(self.fork_positions):
            raise InvalidConfigError("fork positions must be distinct")
        if any(t < 0 or t >= self.length for t in self.fork_positions):
            raise InvalidConfigError("fork positions must lie inside the chain")
        if not 0 < self.fork_viable < 0.5:
            raise InvalidConfigError("fork viable mass must lie in (0, 0.5)")
        if not 0 <= self.noise < 0.5:
            raise InvalidConfigError("off-fork noise mass must lie in [0, 0.5)")
        if self.vocab_size < 2 or not 1 <= self.noise_tokens <= self.vocab_size - 1:
            raise InvalidConfigError("need vocab_size >= 2 and 1 <= noise_tokens < vocab_size")
        if self.obs_noise < 0:
            raise InvalidConfigError("observation noise must be >= 0")
        if self.token_budget is not None and self.token_budget < self.length:
            raise InvalidConfigError("token budget must cover the chain length")

    @property
    def budget(self) -> int:
        return self.length if self.token_budget is None else int(self.token_budget)

    @property
    def n_forks(self) -> int:
        return len(self.fork_positions)


@dataclass(frozen=True)
class ChainInstance:
    id: int
    correct: tuple  # correct token per step
    noise: tuple  # tuple of dead-end tokens per step; at a fork the first one is used


class ForkingChain:
    kind = "forking_chain"
    obs_dim = 2

    def __init__(self, spec: ForkingChainSpec = ForkingChainSpec()):
        self.spec = spec
        self._forks = frozenset(spec.fork_positions)
        self._table_cache: dict = {}

    @property
    def horizon(self) -> int:
        return self.spec.length

    @property
    def token_budget(self) -> int:
        return self.spec.budget

    def is_fork(self, t: int) -> bool:
        return t in self._forks

    def sample_instances(self, n: int, seed: int, start_id: int = 0) -> list:
        out = []
        V = self.spec.vocab_size
        for iid in range(start_id, start_id + n):
            g = substream(seed, "chain-instance", iid)
            correct, noise = [], []
            for _ in range(self.spec.length):
                perm = g.permutation(V)
                correct.append(int(perm[0]))
                noise.append(tuple(int(x) for x in perm[1 : 1 + self.spec.noise_tokens]))
            out.append(ChainInstance(iid, tuple(correct), tuple(noise)))
        return out

    def base_probs(self, instance: ChainInstance, t: int) -> np.ndarray:
        p = np.zeros(self.spec.vocab_size)
        if self.is_fork(t):
            p[instance.correct[t]] = self.spec.fork_viable
            p[instance.noise[t][0]] = 1.0 - self.spec.fork_viable
        else:
            p[instance.correct[t]] = 1.0 - self.spec.noise
            for tok in instance.noise[t]:
                p[tok] += self.spec.noise / len(instance.noise[t])
        return p

    def logits(self, instance: ChainInstance, t: int) -> np.ndarray:
        p = self.base_probs(instance, t)
        with np.errstate(divide="ignore"):
            return np.where(p > 0, np.log(p), LOGIT_FLOOR)

    def observe(self, t: int, n: int, rngs) -> np.ndarray:
        """Noisy one-hot of the step's shape class: [fork, not fork]."""
        base = np.array([1.0, 0.0]) if self.is_fork(t) else np.array([0.0, 1.0])
        return base[None, :] + self.spec.obs_noise * normal_draws(rngs, n, 2)

    def step_dist(self, instance, t, action: DecodingAction) -> np.ndarray:
        return apply_action(self.logits(instance, t), action)

    def base_max_prob(self, instance, t) -> float:
        return float(softmax(self.logits(instance, t)).max())

    def action_table(self, instance, actions) -> tuple:
        """``(dists, base_max)``: transformed distributions of shape (T, A, V) and
        the base max probability per step, memoized per (instance, actions)."""
        key = (instance, tuple(actions))
        hit = self._table_cache.get(key)
        if hit is None:
            T, V = self.spec.length, self.spec.vocab_size
            dists = np.empty((T, len(actions), V))
            base_max = np.empty(T)
            for t in range(T):
                z = self.logits(instance, t)
                base_max[t] = softmax(z).max()
                dists[t] = apply_actions(z, actions)
            hit = (dists, base_max)
            self._table_cache[key] = hit
        return hit

    def verify(self, sequence, instance: ChainInstance) -> int:
        return int(tuple(int(x) for x in sequence) == instance.correct)

    def static_rollout(self, instance, action: DecodingAction, rng) -> float:
        _, rec = forking_rollout(self, instance, [action], lambda t, obs, rem: 0, rng)
        return rec.reward

    # closed forms --------------------------------------------------------
    def expected_reward(self, fork_action: DecodingAction, offfork_action: DecodingAction) -> float:
        """Exact success probability when one action is used at forks and another elsewhere."""
        inst = self.sample_instances(1, 0)[0]
        out = 1.0
        for t in range(self.spec.length):
            a = fork_action if self.is_fork(t) else offfork_action
            out *= self.step_dist(inst, t, a)[inst.correct[t]]
        return float(out)

    def expected_static_reward(self, action: DecodingAction) -> float:
        return self.expected_reward(action, action)


def chain_rollout_batch(
    env: ForkingChain,
    instances: Sequence[ChainInstance],
    actions: Sequence[DecodingAction],
    choose: Callable,
    rngs,
    mask_threshold: float = 1.0,
):
    """Roll out one trajectory per instance.

    ``choose(t, obs, remaining)`` returns an action index per row, where
    ``obs`` has shape (n, obs_dim). Returns ``(tokens, action_idx, masks,
    rewards)`` with ``masks[t, i]`` true when the base distribution at that
    step has max probability above ``mask_threshold``.
    """
    n = len(instances)
    T = env.horizon
    tables = [env.action_table(inst, actions) for inst in instances]
    dists = np.stack([d for d, _ in tables])  # (n, T, A, V)
    masks = np.stack([m for _, m in tables]).T > mask_threshold  # (T, n)
    correct = np.array([inst.correct for inst in instances], dtype=np.int64).reshape(n, T)
    rows = np.arange(n)
    tokens = np.zeros((n, T), dtype=np.int64)
    taken = np.zeros((T, n), dtype=np.int64)
    for t in range(T):
        obs = env.observe(t, n, rngs)
        a_idx = np.asarray(choose(t, obs, env.token_budget - t), dtype=np.int64).reshape(n)
        tokens[:, t] = sample_rows_from(dists[rows, t, a_idx], rngs)
        taken[t] = a_idx
    rewards = (tokens == correct).all(axis=1).astype(np.float64)
    return tokens, taken, masks, rewards


def forking_rollout(env: ForkingChain, instance: ChainInstance, actions, controller, rng):
    """Single-trajectory rollout; ``controller(t, obs_vector, remaining)`` picks an action index."""

    def choose(t, obs, remaining):
        return [controller(t, obs[0], remaining)]

    tokens, taken, masks, rewards = chain_rollout_batch(env, [instance], actions, choose, rng)
    rec = EpisodeRecord(
        instance_id=instance.id,
        actions=[int(a) for a in taken[:, 0]],
        masks=[bool(m) for m in masks[:, 0]],
        reward=float(rewards[0]),
        budget_used=env.horizon,
    )
    return [int(x) for x in tokens[0]], rec


# -- two-regime bandit ----------------------------------------------------------

# Per-class answer distributions used to derive a default success table from
# any action pool: an action succeeds with the mass it leaves on the correct
# answer (index 0). Class 0 rewards sharp decoding, class 1 rewards
# exploration of a low-ranked answer.
REGIME_TEMPLATES = (
    np.array([0.40, 0.25] + [0.035] * 10),
    np.array([0.08, 0.30, 0.25, 0.20] + [0.17 / 8] * 8),
)


@dataclass
class TwoRegimeSpec:
    actions: list
    success: list  # success[class][action]
    class_mix: float = 0.5  # probability of class 0
    obs_noise: float = 0.1

    def __post_init__(self):
        self.actions = list(self.actions)
        s = np.asarray(self.success, dtype=np.float64)
        if s.shape != (2, len(self.actions)):
            raise InvalidConfigError(f"success table must be 2 x {len(self.actions)}, got {s.shape}")
        if np.any(s < 0) or np.any(s > 1):
            raise InvalidConfigError("success probabilities must lie in [0, 1]")
        if not 0 <= self.class_mix <= 1:
            raise InvalidConfigError("class_mix must lie in [0, 1]")
        if self.obs_noise < 0:
            raise InvalidConfigError("observation noise must be >= 0")
        self.success = s

    @classmethod
    def from_templates(cls, actions, class_mix=0.5, obs_noise=0.1) -> "TwoRegimeSpec":
        table = [[float(apply_action(np.log(tpl), a)[0]) for a in actions] for tpl in REGIME_TEMPLATES]
        return cls(list(actions), table, class_mix, obs_noise)


@dataclass(frozen=True)
class RegimeInstance:
    id: int
    cls: int
    features: tuple
    outcome_key: int


class TwoRegime:
    kind = "two_regime"
    obs_dim = 2

    def __init__(self, spec: TwoRegimeSpec):
        self.spec = spec
        self._index = {a: j for j, a in enumerate(spec.actions)}

    def sample_instances(self, n: int, seed: int, start_id: int = 0) -> list:
        out = []
        for iid in range(start_id, start_id + n):
            g = substream(seed, "regime-instance", iid)
            c = 0 if g.random() < self.spec.class_mix else 1
            e = np.eye(2)[c] + self.spec.obs_noise * g.standard_normal(2)
            out.append(RegimeInstance(iid, c, tuple(float(x) for x in e), int(g.integers(2**32))))
        return out

    def features(self, instances) -> np.ndarray:
        return np.array([inst.features for inst in instances])

    def success_prob(self, cls: int, action: DecodingAction) -> float:
        j = self._index.get(action)
        if j is None:
            raise InvalidConfigError(f"action {action.name} is not in this environment's table")
        return float(self.spec.success[cls, j])

    def n_successes(self, instance: RegimeInstance, action: DecodingAction, n: int, rng) -> int:
        """Successes among ``n`` parallel samples.

        Greedy decoding is deterministic, so its outcome is drawn once per
        instance and repeated across samples.
        """
        p = self.success_prob(instance.cls, action)
        if action.greedy:
            g = substream(instance.outcome_key, "greedy-outcome", self._index[action])
            return n * int(g.random() < p)
        return int((rng.random(n) < p).sum())

    def rollout(self, instance, action: DecodingAction, rng) -> float:
        return float(self.n_successes(instance, action, 1, rng))

    def episode_reward(self, instance, action: DecodingAction, budget: int, rng) -> float:
        """Best-of-``budget`` outcome, i.e. Pass@B with B parallel samples."""
        c = self.n_successes(instance, action, int(budget), rng)
        return pass_at_k(int(budget), c, int(budget))

    static_rollout = rollout

    def expected_pass(self, cls: int, action: DecodingAction, B: int) -> float:
        """Exact Pass@B with ``B`` samples under ``action`` for class ``cls``."""
        p = self.success_prob(cls, action)
        return p if action.greedy else 1.0 - (1.0 - p) ** B

    def oracle_action(self, cls: int, B: int) -> int:
        vals = [self.expected_pass(cls, a, B) for a in self.spec.actions]
        return int(np.argmax(vals))

    def oracle_value(self, B: int) -> float:
        mix = self.spec.class_mix
        best = [max(self.expected_pass(c, a, B) for a in self.spec.actions) for c in (0, 1)]
        return mix * best[0] + (1 - mix) * best[1]


@dataclass(frozen=True)
class BanditInstance:
    id: int
    features: tuple = (1.0,)


class ContextFreeBandit:
    """Every instance looks the same and action ``j`` pays ``rewards[j]`` exactly."""

    kind = "bandit"
    obs_dim = 1

    def __init__(self, actions, rewards):
        self.actions = list(actions)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        if self.rewards.shape != (len(self.actions),):
            raise InvalidConfigError("need one reward per action")
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise InvalidConfigError("rewards must lie in [0, 1]")
        self._index = {a: j for j, a in enumerate(self.actions)}

    def sample_instances(self, n: int, seed: int, start_id: int = 0) -> list:
        return [BanditInstance(i) for i in range(start_id, start_id + n)]

    def features(self, instances) -> np.ndarray:
        return np.ones((len(instances), 1))

    def episode_reward(self, instance, action, budget, rng) -> float:
        return float(self.rewards[self._index[action]])

    def static_rollout(self, instance, action, rng) -> float:
        return float(self.rewards[self._index[action]])


def make_env(cfg: dict, actions=None):
    """Build an environment from a JSON config section (unknown keys rejected)."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    if kind == "forking_chain":
        allowed = set(ForkingChainSpec.__dataclass_fields__)
        unknown = set(cfg) - allowed
        if unknown:
            raise InvalidConfigError(f"unknown forking_chain keys: {sorted(unknown)}")
        return ForkingChain(ForkingChainSpec(**cfg))
    if kind == "two_regime":
        unknown = set(cfg) - {"class_mix", "obs_noise", "actions", "success"}
        if unknown:
            raise InvalidConfigError(f"unknown two_regime keys: {sorted(unknown)}")
        mix = float(cfg.get("class_mix", 0.5))
        noise = float(cfg.get("obs_noise", 0.1))
        if "success" in cfg:
            if "actions" not in cfg:
                raise InvalidConfigError("an explicit success table needs its action list")
            acts = [DecodingAction.from_dict(a) for a in cfg["actions"]]
            return TwoRegime(TwoRegimeSpec(acts, cfg["success"], mix, noise))
        if "actions" in cfg:
            actions = [DecodingAction.from_dict(a) for a in cfg["actions"]]
        if actions is None:
            raise InvalidConfigError("two_regime needs an action pool to derive its success table")
        return TwoRegime(TwoRegimeSpec.from_templates(actions, mix, noise))
    raise InvalidConfigError(f"unknown environment kind {kind!r}")


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    mean: float
    half_width: float
    n: int
    scores: np.ndarray = field(repr=False, default=None)

    @property
    def ci(self):
        return (self.mean - self.half_width, self.mean + self.half_width)


def mean_ci(scores) -> EvalResult:
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise InvalidInputError("a confidence interval needs at least two episodes")
    half = Z_95 * s.std(ddof=1) / math.sqrt(s.size)
    return EvalResult(float(s.mean()), float(half), int(s.size), s)
