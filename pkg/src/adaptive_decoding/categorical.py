"""Finite categorical distributions and the decoding transforms acting on them.

Distributions are plain 1-D ``float64`` arrays. Every filter keeps the
input untouched when it removes no mass, so the "off" settings of each
transform return the input exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from adaptive_decoding.exceptions import InvalidInputError, InvalidParameterError

DIST_ATOL = 1e-9
# Slack on the cumulative-mass comparison of top-p so that prefixes whose
# exact mass equals p are not lost to rounding in the running sum.
TOP_P_SLACK = 1e-12
# Relative slack on the min-p threshold: an entry sitting exactly on the
# threshold stays kept after renormalization, which keeps min-p idempotent.
MIN_P_SLACK = 1e-12


@dataclass(frozen=True)
class DecodingAction:
    """One sampling configuration.

    ``greedy=True`` means argmax decoding and requires every other field to
    be unset. Otherwise ``temperature`` is mandatory and the filters are
    optional.
    """

    greedy: bool = False
    temperature: Optional[float] = 1.0
    top_k: Optional[int] = None
    top_p: Optional[float] = None
    min_p: Optional[float] = None

    def __post_init__(self):
        if self.greedy:
            if any(v is not None for v in (self.temperature, self.top_k, self.top_p, self.min_p)):
                raise InvalidParameterError("greedy action must leave all sampling fields unset")
            return
        if self.temperature is None or not self.temperature > 0:
            raise InvalidParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k is not None and (int(self.top_k) != self.top_k or self.top_k < 1):
            raise InvalidParameterError(f"top_k must be a positive integer, got {self.top_k}")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise InvalidParameterError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.min_p is not None and not 0 <= self.min_p < 1:
            raise InvalidParameterError(f"min_p must lie in [0, 1), got {self.min_p}")

    @classmethod
    def make_greedy(cls) -> "DecodingAction":
        return cls(greedy=True, temperature=None)

    @property
    def name(self) -> str:
        if self.greedy:
            return "greedy"
        parts = [f"T{self.temperature:g}"]
        if self.top_k is not None:
            parts.append(f"k{self.top_k}")
        if self.top_p is not None:
            parts.append(f"p{self.top_p:g}")
        if self.min_p is not None:
            parts.append(f"m{self.min_p:g}")
        return "-".join(parts)

    def to_dict(self) -> dict:
        return {
            "greedy": self.greedy,
            "temperature": self.temperature,
            "top_k": self.top_k,
            "top_p": self.top_p,
            "min_p": self.min_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecodingAction":
        unknown = set(d) - {"greedy", "temperature", "top_k", "top_p", "min_p"}
        if unknown:
            raise InvalidParameterError(f"unknown decoding-action fields: {sorted(unknown)}")
        greedy = bool(d.get("greedy", False))
        if greedy:
            return cls.make_greedy()
        if "temperature" not in d:
            raise InvalidParameterError("sampling action requires a temperature")
        return cls(
            greedy=False,
            temperature=float(d["temperature"]),
            top_k=None if d.get("top_k") is None else int(d["top_k"]),
            top_p=None if d.get("top_p") is None else float(d["top_p"]),
            min_p=None if d.get("min_p") is None else float(d["min_p"]),
        )


TOKEN_LEVEL_ACTIONS = (
    DecodingAction.make_greedy(),
    DecodingAction(temperature=0.5),
    DecodingAction(temperature=1.0),
    DecodingAction(temperature=1.25),
)


def check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise InvalidInputError(f"logits must be a non-empty vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    return z


def check_dist(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise InvalidInputError(f"distribution must be a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("distribution entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > DIST_ATOL:
        raise InvalidInputError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def softmax(logits) -> np.ndarray:
    z = check_logits(logits)
    e = np.exp(z - z.max())
    return e / e.sum()


def apply_temperature(logits, temperature: float) -> np.ndarray:
    z = check_logits(logits)
    if not temperature > 0:
        raise InvalidParameterError(f"temperature must be > 0, got {temperature}")
    return z / temperature


# All kernels below work on (n, V) row stacks so a whole action pool can be
# applied to one distribution in a single pass; the 1-D public functions
# are single-row calls into the same code.


def _keep_rows(P: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # rows losing no mass are returned untouched, so "off" settings are exact
    out = np.where(keep, P, 0.0)
    removed = np.any((P > 0) & ~keep, axis=1)
    if not removed.any():
        return P.copy()
    s = out.sum(axis=1, keepdims=True)
    return np.where(removed[:, None], out / np.where(removed[:, None], s, 1.0), P)


def _ranks(P: np.ndarray):
    # stable sort on -p keeps lower indices first among ties
    order = np.argsort(-P, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(P.shape[1])[None, :], axis=1)
    return order, rank


def _top_k_rows(P: np.ndarray, k: np.ndarray) -> np.ndarray:
    _, rank = _ranks(P)
    return _keep_rows(P, rank < k[:, None])


def _top_p_rows(P: np.ndarray, top_p: np.ndarray) -> np.ndarray:
    order, rank = _ranks(P)
    cum = np.cumsum(np.take_along_axis(P, order, axis=1), axis=1)
    # smallest prefix reaching top_p: entries whose preceding mass is still short
    n_keep = (cum < (top_p - TOP_P_SLACK)[:, None]).sum(axis=1) + 1
    keep = (rank < n_keep[:, None]) | (top_p >= 1)[:, None]
    return _keep_rows(P, keep)


def _min_p_rows(P: np.ndarray, min_p: np.ndarray) -> np.ndarray:
    thr = (min_p * (1.0 - MIN_P_SLACK))[:, None] * P.max(axis=1, keepdims=True)
    return _keep_rows(P, P >= thr)


def top_k_filter(dist, k: int) -> np.ndarray:
    p = check_dist(dist)
    if int(k) != k or k < 1:
        raise InvalidParameterError(f"k must be a positive integer, got {k}")
    return _top_k_rows(p[None, :], np.array([int(k)]))[0]


def top_p_filter(dist, top_p: float) -> np.ndarray:
    p = check_dist(dist)
    if not 0 < top_p <= 1:
        raise InvalidParameterError(f"top_p must lie in (0, 1], got {top_p}")
    return _top_p_rows(p[None, :], np.array([float(top_p)]))[0]


def min_p_filter(dist, min_p: float) -> np.ndarray:
    p = check_dist(dist)
    if not 0 <= min_p < 1:
        raise InvalidParameterError(f"min_p must lie in [0, 1), got {min_p}")
    return _min_p_rows(p[None, :], np.array([float(min_p)]))[0]


def point_mass(index: int, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[index] = 1.0
    return out


def apply_actions(logits, actions) -> np.ndarray:
    """Row ``j`` is the distribution obtained by decoding ``logits`` with ``actions[j]``.

    Order: temperature, softmax, top-k, top-p, min-p. min-p thresholds
    against the largest probability of the distribution entering that stage.
    """
    z = check_logits(logits)
    actions = list(actions)
    out = np.zeros((len(actions), z.size))
    greedy = np.array([a.greedy for a in actions], dtype=bool)
    out[greedy, int(np.argmax(z))] = 1.0
    rows = [a for a in actions if not a.greedy]
    if not rows:
        return out
    # the actions' parameters were validated at construction
    Z = z[None, :] / np.array([a.temperature for a in rows])[:, None]
    E = np.exp(Z - Z.max(axis=1, keepdims=True))
    P = E / E.sum(axis=1, keepdims=True)
    sel = np.array([a.top_k is not None for a in rows])
    if sel.any():
        P[sel] = _top_k_rows(P[sel], np.array([a.top_k for a in rows if a.top_k is not None]))
    sel = np.array([a.top_p is not None for a in rows])
    if sel.any():
        P[sel] = _top_p_rows(P[sel], np.array([a.top_p for a in rows if a.top_p is not None]))
    sel = np.array([a.min_p is not None for a in rows])
    if sel.any():
        P[sel] = _min_p_rows(P[sel], np.array([a.min_p for a in rows if a.min_p is not None]))
    out[~greedy] = P
    return out


def apply_action(logits, action: DecodingAction) -> np.ndarray:
    """Distribution obtained by decoding ``logits`` with ``action``."""
    return apply_actions(logits, [action])[0]


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = check_dist(dist)
    nz = p[p > 0]
    return float(max(-np.sum(nz * np.log(nz)), 0.0))


def sample(dist, rng: np.random.Generator) -> int:
    p = check_dist(dist)
    return int(sample_rows(p[None, :], rng)[0])


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of a (n, V) probability matrix by inverse CDF.

    Zero-probability entries are never returned.
    """
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    # rounding can push idx past the last positive entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)
