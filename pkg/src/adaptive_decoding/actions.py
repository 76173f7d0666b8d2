"""Candidate decoding strategies and coverage-based action-set selection."""

from __future__ import annotations

import csv
import io
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from adaptive_decoding.categorical import DecodingAction
from adaptive_decoding.exceptions import InvalidConfigError, InvalidInputError
from adaptive_decoding.rng import substream

OFF = "off"

DEFAULT_GRID = {
    "temperature": [0.3, 0.5, 0.75, 1.0, 1.25],
    "top_k": [5, 10, 50, OFF],
    "top_p": [0.9, 0.95, OFF],
    "min_p": [0.1, 0.2, OFF],
}
GRID_KEYS = ("temperature", "top_k", "top_p", "min_p")


def build_candidate_pool(grid: Optional[dict] = None) -> list[DecodingAction]:
    """Cartesian product of the parameter ranges, in grid order.

    ``"off"`` (or ``None``) maps to an unset field. The temperature range may
    not contain ``"off"``.
    """
    grid = DEFAULT_GRID if grid is None else grid
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise InvalidConfigError(f"unknown grid parameters: {sorted(unknown)}")
    ranges = []
    for key in GRID_KEYS:
        values = list(grid.get(key, [OFF] if key != "temperature" else []))
        if not values:
            raise InvalidConfigError(f"grid range for {key!r} is empty")
        ranges.append([None if v in (OFF, None) else v for v in values])
    pool = []
    seen = set()
    for t, k, p, m in itertools.product(*ranges):
        if t is None:
            raise InvalidConfigError("temperature cannot be 'off' in a sampling grid")
        action = DecodingAction(
            temperature=float(t),
            top_k=None if k is None else int(k),
            top_p=None if p is None else float(p),
            min_p=None if m is None else float(m),
        )
        if action in seen:
            raise InvalidConfigError(f"duplicate configuration {action.name} in grid")
        seen.add(action)
        pool.append(action)
    return pool


@dataclass
class RewardMatrix:
    """Rewards in [0, 1] for ``N`` validation instances by ``M`` strategies."""

    rewards: np.ndarray
    instance_ids: list = field(default_factory=list)
    strategy_ids: list = field(default_factory=list)

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
            raise InvalidInputError(f"reward matrix must be N x M with N, M >= 1, got {r.shape}")
        if not np.all(np.isfinite(r)) or r.min() < 0 or r.max() > 1:
            raise InvalidInputError("reward entries must lie in [0, 1]")
        self.rewards = r
        if not self.instance_ids:
            self.instance_ids = list(range(r.shape[0]))
        if not self.strategy_ids:
            self.strategy_ids = [f"s{j}" for j in range(r.shape[1])]
        if len(self.instance_ids) != r.shape[0] or len(self.strategy_ids) != r.shape[1]:
            raise InvalidInputError("id lists do not match the reward matrix shape")

    @property
    def shape(self):
        return self.rewards.shape

    def to_csv(self, provenance: Optional[dict] = None) -> str:
        buf = io.StringIO()
        if provenance is not None:
            buf.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["instance_id", *self.strategy_ids])
        for iid, row in zip(self.instance_ids, self.rewards):
            w.writerow([iid, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RewardMatrix":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = list(csv.reader(lines))
        header, body = rows[0], rows[1:]
        ids = [int(r[0]) if r[0].lstrip("-").isdigit() else r[0] for r in body]
        vals = np.array([[float(v) for v in r[1:]] for r in body])
        return cls(vals, ids, header[1:])


@dataclass
class ActionSet:
    actions: list
    coverage_trace: list
    indices: list = field(default_factory=list)

    def to_json(self, provenance: Optional[dict] = None) -> str:
        doc = {
            "actions": [a.to_dict() | {"name": a.name} for a in self.actions],
            "coverage_trace": [float(v) for v in self.coverage_trace],
            "indices": [int(i) for i in self.indices],
        }
        if provenance is not None:
            doc["provenance"] = provenance
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ActionSet":
        doc = json.loads(text)
        actions = [
            DecodingAction.from_dict({k: v for k, v in a.items() if k != "name"})
            for a in doc["actions"]
        ]
        return cls(actions, doc["coverage_trace"], doc.get("indices", []))


def _as_rewards(R) -> np.ndarray:
    if isinstance(R, RewardMatrix):
        return R.rewards
    return RewardMatrix(R).rewards


def coverage_value(S: Sequence[int], R, normalize: bool = False) -> float:
    """Sum over instances of the best reward reachable inside ``S``."""
    r = _as_rewards(R)
    S = list(S)
    if not S:
        raise InvalidInputError("coverage of an empty strategy set is undefined")
    if min(S) < 0 or max(S) >= r.shape[1]:
        raise InvalidInputError(f"strategy index out of range in {S}")
    total = float(r[:, S].max(axis=1).sum())
    return total / r.shape[0] if normalize else total


def _check_k(k: int, M: int):
    if int(k) != k or k < 1 or k > M:
        raise InvalidConfigError(f"k must satisfy 1 <= k <= {M}, got {k}")


def greedy_indices(r: np.ndarray, k: int) -> tuple[list[int], list[float]]:
    _check_k(k, r.shape[1])
    chosen: list[int] = []
    trace: list[float] = []
    # rewards are non-negative, so an all-zero running best is F of the empty set
    best = np.zeros(r.shape[0])
    available = np.ones(r.shape[1], dtype=bool)
    for _ in range(int(k)):
        gains = np.maximum(r - best[:, None], 0.0).sum(axis=0)
        gains = np.where(available, gains, -np.inf)
        j = int(np.argmax(gains))
        chosen.append(j)
        available[j] = False
        best = np.maximum(best, r[:, j])
        trace.append(float(best.sum()))
    return chosen, trace


def topk_indices(r: np.ndarray, k: int) -> tuple[list[int], list[float]]:
    _check_k(k, r.shape[1])
    order = np.argsort(-r.mean(axis=0), kind="stable")[: int(k)]
    chosen = [int(j) for j in order]
    trace = [float(r[:, chosen[: i + 1]].max(axis=1).sum()) for i in range(len(chosen))]
    return chosen, trace


def greedy_select(R, k: int, pool: Optional[Sequence[DecodingAction]] = None) -> ActionSet:
    """Greedy maximization of the coverage objective; ties go to the lowest index."""
    chosen, trace = greedy_indices(_as_rewards(R), k)
    return ActionSet([pool[j] for j in chosen] if pool is not None else [], trace, chosen)


def topk_by_mean_select(R, k: int, pool: Optional[Sequence[DecodingAction]] = None) -> ActionSet:
    """The ``k`` strategies with the highest mean reward."""
    chosen, trace = topk_indices(_as_rewards(R), k)
    return ActionSet([pool[j] for j in chosen] if pool is not None else [], trace, chosen)


def _estimate_row(args):
    env, instance, pool, samples_per_cell, seed = args
    row = np.empty(len(pool))
    for j, action in enumerate(pool):
        total = 0.0
        for s in range(samples_per_cell):
            rng = substream(seed, "reward-matrix", instance.id, j, s)
            total += env.static_rollout(instance, action, rng)
        row[j] = total / samples_per_cell
    return row


def estimate_reward_matrix(
    env,
    pool: Sequence[DecodingAction],
    instances: Sequence,
    samples_per_cell: int,
    seed: int,
    workers: int = 1,
) -> RewardMatrix:
    """Monte Carlo mean reward per (instance, strategy) cell.

    Each cell draws from its own substream keyed by (seed, instance id,
    strategy index, sample index), so the matrix does not depend on
    ``workers``.
    """
    if int(samples_per_cell) != samples_per_cell or samples_per_cell < 1:
        raise InvalidConfigError("samples_per_cell must be a positive integer")
    jobs = [(env, inst, list(pool), int(samples_per_cell), seed) for inst in instances]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_estimate_row, jobs))
    else:
        rows = [_estimate_row(j) for j in jobs]
    return RewardMatrix(np.vstack(rows), [inst.id for inst in instances], [a.name for a in pool])


class CoverageSelector(TransformerMixin, BaseEstimator):
    """Select ``k`` complementary strategy columns from a reward matrix.

    Parameters
    ----------
    k : int, default=6
        Number of strategies to keep.
    method : {"greedy", "topk_mean"}, default="greedy"
        Coverage-greedy selection or the mean-reward baseline.

    Attributes
    ----------
    selected_ : ndarray of shape (k,)
        Column indices in selection order.
    coverage_trace_ : ndarray of shape (k,)
        Coverage after each addition, summed over instances.
    """

    def __init__(self, k=6, method="greedy"):
        self.k = k
        self.method = method

    def fit(self, X, y=None):
        r = X.rewards if isinstance(X, RewardMatrix) else check_array(X, dtype=np.float64)
        RewardMatrix(r)
        if self.method == "greedy":
            chosen, trace = greedy_indices(r, self.k)
        elif self.method == "topk_mean":
            chosen, trace = topk_indices(r, self.k)
        else:
            raise InvalidConfigError(f"unknown selection method {self.method!r}")
        self.selected_ = np.array(chosen)
        self.coverage_trace_ = np.array(trace)
        self.n_features_in_ = r.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "selected_")
        r = X.rewards if isinstance(X, RewardMatrix) else check_array(X, dtype=np.float64)
        if r.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} strategy columns, got {r.shape[1]}")
        return r[:, self.selected_]

    def coverage(self, X, normalize=True):
        check_is_fitted(self, "selected_")
        return coverage_value(self.selected_, X, normalize=normalize)
