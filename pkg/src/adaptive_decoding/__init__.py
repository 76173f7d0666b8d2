"""Learned decoding adapters over a frozen stochastic token generator."""

from adaptive_decoding.categorical import DecodingAction, apply_action, apply_actions, entropy, softmax
from adaptive_decoding.actions import CoverageSelector, RewardMatrix, build_candidate_pool
from adaptive_decoding.estimators import SequenceAdapter, TokenAdapter

__all__ = [
    "CoverageSelector",
    "DecodingAction",
    "RewardMatrix",
    "SequenceAdapter",
    "TokenAdapter",
    "apply_action",
    "apply_actions",
    "build_candidate_pool",
    "entropy",
    "softmax",
]

__version__ = "0.1.0"
