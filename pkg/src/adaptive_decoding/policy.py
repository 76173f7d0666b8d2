"""Sequence-level and token-level decoding policies.

Both policies map features to a softmax over a finite action set, scaled by
a policy temperature. The sequence policy optionally appends a learned
embedding of the parallel budget ``B``; the token policy optionally appends
the normalized remaining token budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from adaptive_decoding.categorical import TOKEN_LEVEL_ACTIONS, DecodingAction, sample_rows
from adaptive_decoding.exceptions import IncompatibleCheckpointError, InvalidInputError
from adaptive_decoding.net import Mlp, backward, forward, init_mlp, load_checkpoint, save_checkpoint


def softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _PolicyBase:
    trunk: Mlp
    actions: list
    temperature: float = 1.0

    def nets(self) -> dict:
        return {"trunk": self.trunk}

    def params(self) -> list:
        # order must match save_checkpoint: nets sorted by name
        nets = self.nets()
        return [p for name in sorted(nets) for p in nets[name].params()]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def sidecar(self) -> dict:
        return {
            "kind": self.kind,
            "budget_aware": self.budget_aware,
            "temperature": self.temperature,
            "actions": [a.to_dict() | {"name": a.name} for a in self.actions],
        }


@dataclass
class SeqPolicy(_PolicyBase):
    """Contextual-bandit policy over whole-sequence decoding actions."""

    embedder: Optional[Mlp] = None
    kind: str = field(default="seq", init=False)

    def __post_init__(self):
        if self.trunk.sizes[-1] != len(self.actions):
            raise InvalidInputError("trunk output width must equal the number of actions")
        if self.embedder is not None and self.embedder.sizes[0] != 1:
            raise InvalidInputError("budget embedder takes a single scalar input")

    @property
    def budget_aware(self) -> bool:
        return self.embedder is not None

    @property
    def context_dim(self) -> int:
        extra = self.embedder.sizes[-1] if self.embedder is not None else 0
        return self.trunk.sizes[0] - extra

    def nets(self) -> dict:
        out = {"trunk": self.trunk}
        if self.embedder is not None:
            out["embedder"] = self.embedder
        return out


@dataclass
class TokPolicy(_PolicyBase):
    """Per-step policy over token-level decoding actions."""

    budget_aware: bool = True
    kind: str = field(default="tok", init=False)

    def __post_init__(self):
        if self.trunk.sizes[-1] != len(self.actions):
            raise InvalidInputError("trunk output width must equal the number of actions")

    @property
    def context_dim(self) -> int:
        return self.trunk.sizes[0] - int(self.budget_aware)


def make_seq_policy(
    context_dim: int,
    actions,
    rng: np.random.Generator,
    budget_aware: bool = True,
    hidden=(64, 64),
    embed_dim: int = 8,
    dropout: float = 0.1,
    temperature: float = 1.0,
) -> SeqPolicy:
    embedder = init_mlp([1, embed_dim, embed_dim], rng, dropout=0.0) if budget_aware else None
    in_dim = context_dim + (embed_dim if budget_aware else 0)
    trunk = init_mlp([in_dim, *hidden, len(actions)], rng, dropout=dropout)
    return SeqPolicy(trunk, list(actions), temperature, embedder)


def make_tok_policy(
    context_dim: int,
    rng: np.random.Generator,
    actions=TOKEN_LEVEL_ACTIONS,
    budget_aware: bool = True,
    hidden=(64, 64),
    dropout: float = 0.1,
    temperature: float = 1.0,
) -> TokPolicy:
    in_dim = context_dim + int(budget_aware)
    trunk = init_mlp([in_dim, *hidden, len(actions)], rng, dropout=dropout)
    return TokPolicy(trunk, list(actions), temperature, budget_aware)


@dataclass
class PolicyCache:
    trunk: object
    embedder: object = None
    context_dim: int = 0


def _as_rows(x, width: int, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise InvalidInputError(f"{what} must have width {width}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{what} must be finite")
    return a


def seq_logits(policy: SeqPolicy, e, budget=None, train=False, rng=None):
    """Batched trunk logits for context rows ``e`` and budgets ``budget``."""
    E = _as_rows(e, policy.context_dim, "context features")
    ecache = None
    if policy.budget_aware:
        if budget is None:
            raise InvalidInputError("budget-aware policy needs a budget")
        B = np.broadcast_to(np.asarray(budget, dtype=np.float64).reshape(-1), (E.shape[0],))
        emb, ecache = forward(policy.embedder, B[:, None], train=train, rng=rng)
        z = np.hstack([E, emb])
    else:
        z = E
    logits, tcache = forward(policy.trunk, z, train=train, rng=rng)
    return logits, PolicyCache(tcache, ecache, E.shape[1])


def seq_backward(policy: SeqPolicy, cache: PolicyCache, grad_logits) -> list:
    """Parameter gradients (in ``policy.params()`` order) of ``sum(grad_logits * logits)``."""
    tgrads, gz = backward(policy.trunk, cache.trunk, grad_logits)
    if not policy.budget_aware:
        return tgrads
    egrads, _ = backward(policy.embedder, cache.embedder, gz[:, cache.context_dim :])
    return egrads + tgrads  # "embedder" sorts before "trunk"


def seq_forward(policy: SeqPolicy, e, budget=None, train=False, rng=None) -> np.ndarray:
    """Action distribution(s); a single context vector gives a single distribution."""
    logits, _ = seq_logits(policy, e, budget, train, rng)
    p = softmax_rows(logits, policy.temperature)
    return p[0] if np.ndim(e) == 1 else p


def _select(p: np.ndarray, deterministic: bool, rng):
    if deterministic:
        idx = np.argmax(p, axis=1)
    else:
        if rng is None:
            raise InvalidInputError("stochastic selection needs an rng")
        idx = sample_rows(p, rng)
    logp = np.log(p[np.arange(p.shape[0]), idx])
    return idx, logp


def seq_select(policy: SeqPolicy, e, budget=None, deterministic=False, rng=None):
    """Return ``(action index, distribution, log-probability of that index)``."""
    p = seq_forward(policy, np.asarray(e, dtype=np.float64).reshape(1, -1), budget)
    idx, logp = _select(p, deterministic, rng)
    return int(idx[0]), p[0], float(logp[0])


def tok_features(e_t, remaining, budget) -> np.ndarray:
    """Append the normalized remaining budget ``remaining / budget`` to ``e_t``.

    Works row-wise when ``e_t`` is a matrix and ``remaining`` a vector.
    """
    e = np.asarray(e_t, dtype=np.float64)
    rem = np.asarray(remaining, dtype=np.float64)
    if budget < 1:
        raise InvalidInputError(f"token budget must be >= 1, got {budget}")
    if np.any(rem < 0) or np.any(rem > budget):
        raise InvalidInputError(f"remaining budget must lie in [0, {budget}]")
    phi = rem / float(budget)
    if e.ndim == 1:
        return np.append(e, phi)
    return np.hstack([e, np.broadcast_to(phi.reshape(-1, 1), (e.shape[0], 1))])


def tok_logits(policy: TokPolicy, x, train=False, rng=None):
    X = _as_rows(x, policy.trunk.sizes[0], "token features")
    logits, tcache = forward(policy.trunk, X, train=train, rng=rng)
    return logits, PolicyCache(tcache, None, X.shape[1])


def tok_backward(policy: TokPolicy, cache: PolicyCache, grad_logits) -> list:
    grads, _ = backward(policy.trunk, cache.trunk, grad_logits)
    return grads


def tok_forward(policy: TokPolicy, x, train=False, rng=None) -> np.ndarray:
    logits, _ = tok_logits(policy, x, train, rng)
    p = softmax_rows(logits, policy.temperature)
    return p[0] if np.ndim(x) == 1 else p


def tok_select(policy: TokPolicy, x, deterministic=False, rng=None):
    p = tok_forward(policy, np.asarray(x, dtype=np.float64).reshape(1, -1))
    idx, logp = _select(p, deterministic, rng)
    return int(idx[0]), p[0], float(logp[0])


# -- persistence --------------------------------------------------------------


def save_policy(path, policy, state=None, extra: Optional[dict] = None):
    """Checkpoint file at ``path`` plus ``path + '.json'`` naming the action set."""
    meta = dict(extra or {})
    meta["policy"] = policy.sidecar()
    save_checkpoint(path, policy.nets(), state, meta)
    with open(str(path) + ".json", "w") as f:
        f.write(json.dumps(policy.sidecar(), indent=2, sort_keys=True) + "\n")


def load_policy(path, expected_actions=None):
    """Return ``(policy, optimizer_state, header)``."""
    nets, state, header = load_checkpoint(path)
    meta = header["extra"].get("policy")
    if meta is None:
        raise IncompatibleCheckpointError(f"{path} does not hold a policy")
    actions = [DecodingAction.from_dict({k: v for k, v in a.items() if k != "name"}) for a in meta["actions"]]
    if expected_actions is not None and list(expected_actions) != actions:
        raise IncompatibleCheckpointError(
            f"checkpoint action set {[a.name for a in actions]} does not match "
            f"{[a.name for a in expected_actions]}"
        )
    if meta["kind"] == "seq":
        policy = SeqPolicy(nets["trunk"], actions, meta["temperature"], nets.get("embedder"))
    elif meta["kind"] == "tok":
        policy = TokPolicy(nets["trunk"], actions, meta["temperature"], meta["budget_aware"])
    else:
        raise IncompatibleCheckpointError(f"unknown policy kind {meta['kind']!r}")
    return policy, state, header
