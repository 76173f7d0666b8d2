"""Pass@k evaluation of static actions, uniform mixtures and learned policies."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from adaptive_decoding.categorical import DecodingAction
from adaptive_decoding.env import ForkingChain, TwoRegime, chain_rollout_batch, mean_ci, pass_at_k, uniform_draws
from adaptive_decoding.exceptions import InvalidInputError
from adaptive_decoding.policy import SeqPolicy, TokPolicy, seq_forward, tok_features, tok_forward
from adaptive_decoding.rng import substream

EVAL_ID_OFFSET = 1_000_000


class StaticMethod:
    def __init__(self, action: DecodingAction):
        self.actions = [action]

    def choose(self, rows: int, rngs, **_):
        return np.zeros(rows, dtype=np.int64)


class MixtureMethod:
    """Uniform mixture: a fresh uniformly random action for every decision."""

    def __init__(self, actions: Sequence[DecodingAction]):
        self.actions = list(actions)

    def choose(self, rows: int, rngs, **_):
        u = uniform_draws(rngs, rows)
        return np.minimum((u * len(self.actions)).astype(np.int64), len(self.actions) - 1)


class PolicyMethod:
    def __init__(self, policy, deterministic: bool = True):
        self.policy = policy
        self.actions = list(policy.actions)
        self.deterministic = deterministic

    def choose(self, rows: int, rngs, features=None, budget=None, remaining=None, token_budget=None):
        if isinstance(self.policy, SeqPolicy):
            p = seq_forward(self.policy, features, budget if self.policy.budget_aware else None)
        else:
            x = features
            if self.policy.budget_aware:
                x = tok_features(features, np.full(rows, remaining), token_budget)
            p = tok_forward(self.policy, x)
        p = np.atleast_2d(p)
        if self.deterministic:
            return np.argmax(p, axis=1)
        u = uniform_draws(rngs, rows)
        cdf = np.cumsum(p, axis=1)
        return np.minimum((cdf <= u[:, None] * cdf[:, -1:]).sum(axis=1), p.shape[1] - 1)


def as_method(obj):
    if isinstance(obj, DecodingAction):
        return StaticMethod(obj)
    if isinstance(obj, (SeqPolicy, TokPolicy)):
        return PolicyMethod(obj)
    return obj


def evaluate(method, env, k: int, episodes: int, seed: int, n_samples=None, instances=None):
    """Mean Pass@k over ``episodes`` fresh instances with a 95% normal CI.

    Each instance gets ``n_samples`` (default ``k``) parallel samples and the
    parallel budget handed to budget-aware policies is that sample count.
    Randomness is keyed by (seed, instance id, sample id), so every method
    sees the same instances and common random numbers.
    """
    method = as_method(method)
    n = int(k if n_samples is None else n_samples)
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= n_samples, got k={k}, n={n}")
    if instances is None:
        instances = env.sample_instances(episodes, seed, start_id=EVAL_ID_OFFSET)
    if len(instances) < 2:
        raise InvalidInputError("evaluation needs at least two episodes")
    if isinstance(env, TwoRegime):
        scores = _eval_regime(method, env, instances, n, k, seed)
    elif isinstance(env, ForkingChain):
        scores = _eval_chain(method, env, instances, n, k, seed)
    else:
        raise InvalidInputError(f"cannot evaluate on {type(env).__name__}")
    return mean_ci(scores)


def _eval_regime(method, env: TwoRegime, instances, n, k, seed):
    rngs = [substream(seed, "eval", inst.id) for inst in instances]
    choice = method.choose(len(instances), rngs, features=env.features(instances), budget=n)
    scores = np.empty(len(instances))
    for i, inst in enumerate(instances):
        c = env.n_successes(inst, method.actions[choice[i]], n, rngs[i])
        scores[i] = pass_at_k(n, c, k)
    return scores


def _eval_chain(method, env: ForkingChain, instances, n, k, seed):
    rows = [inst for inst in instances for _ in range(n)]
    rngs = [substream(seed, "eval", inst.id, j) for inst in instances for j in range(n)]

    def choose(t, obs, remaining):
        return method.choose(len(rows), rngs, features=obs, remaining=remaining, token_budget=env.token_budget)

    _, _, _, rewards = chain_rollout_batch(env, rows, method.actions, choose, rngs)
    counts = rewards.reshape(len(instances), n).sum(axis=1).astype(int)
    return np.array([pass_at_k(n, int(c), k) for c in counts])
