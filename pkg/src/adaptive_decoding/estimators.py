"""scikit-learn style front ends for the two decoding adapters."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from adaptive_decoding.categorical import TOKEN_LEVEL_ACTIONS
from adaptive_decoding.exceptions import InvalidInputError
from adaptive_decoding.policy import make_seq_policy, make_tok_policy, seq_forward, tok_features, tok_forward
from adaptive_decoding.rng import substream
from adaptive_decoding.train import SeqTrainer, TokTrainer, TrainConfig


def _train_config(cfg, random_state) -> TrainConfig:
    if cfg is None:
        return TrainConfig(seed=random_state)
    if isinstance(cfg, TrainConfig):
        return cfg
    return TrainConfig.from_dict({"seed": random_state, **cfg})


class SequenceAdapter(BaseEstimator):
    """Contextual-bandit decoding adapter.

    ``fit`` takes a sequence-level environment instead of a design matrix;
    ``predict`` maps context features (and budgets, when ``budget_aware``)
    to action indices.

    Parameters
    ----------
    actions : list of DecodingAction
        The action set the policy chooses from.
    budget_aware : bool, default=True
        Feed the parallel budget through a two-layer embedder.
    hidden : tuple of int, default=(64, 64)
    embed_dim : int, default=8
    dropout : float, default=0.1
    policy_temperature : float, default=1.0
    train_config : TrainConfig or dict, optional
    random_state : int, default=0
    """

    def __init__(
        self,
        actions=None,
        budget_aware=True,
        hidden=(64, 64),
        embed_dim=8,
        dropout=0.1,
        policy_temperature=1.0,
        train_config=None,
        random_state=0,
    ):
        self.actions = actions
        self.budget_aware = budget_aware
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.dropout = dropout
        self.policy_temperature = policy_temperature
        self.train_config = train_config
        self.random_state = random_state

    def fit(self, env, y=None):
        actions = list(self.actions if self.actions is not None else getattr(env, "actions", None) or env.spec.actions)
        cfg = _train_config(self.train_config, self.random_state)
        policy = make_seq_policy(
            env.obs_dim,
            actions,
            substream(cfg.seed, "policy-init"),
            budget_aware=self.budget_aware,
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            dropout=self.dropout,
            temperature=self.policy_temperature,
        )
        self.policy_, self.trace_ = SeqTrainer(policy, env, cfg).run()
        self.n_features_in_ = env.obs_dim
        return self

    def predict_proba(self, X, budget=None):
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.policy_.budget_aware:
            if budget is None:
                raise InvalidInputError("budget-aware adapter needs a budget")
            budget = np.broadcast_to(np.asarray(budget, dtype=np.float64), (X.shape[0],))
        else:
            budget = None
        return np.atleast_2d(seq_forward(self.policy_, X, budget))

    def predict(self, X, budget=None):
        return np.argmax(self.predict_proba(X, budget), axis=1)

    def predict_actions(self, X, budget=None):
        return [self.policy_.actions[i] for i in self.predict(X, budget)]


class TokenAdapter(BaseEstimator):
    """Per-step decoding adapter for token-level environments.

    ``predict`` takes step features of shape (n, d) plus the remaining and
    total token budgets.
    """

    def __init__(
        self,
        actions=TOKEN_LEVEL_ACTIONS,
        budget_aware=True,
        hidden=(64, 64),
        dropout=0.1,
        policy_temperature=1.0,
        train_config=None,
        random_state=0,
    ):
        self.actions = actions
        self.budget_aware = budget_aware
        self.hidden = hidden
        self.dropout = dropout
        self.policy_temperature = policy_temperature
        self.train_config = train_config
        self.random_state = random_state

    def fit(self, env, y=None):
        cfg = _train_config(self.train_config, self.random_state)
        policy = make_tok_policy(
            env.obs_dim,
            substream(cfg.seed, "policy-init"),
            actions=list(self.actions),
            budget_aware=self.budget_aware,
            hidden=self.hidden,
            dropout=self.dropout,
            temperature=self.policy_temperature,
        )
        self.policy_, self.trace_ = TokTrainer(policy, env, cfg).run()
        self.n_features_in_ = env.obs_dim
        return self

    def predict_proba(self, X, remaining=None, budget=None):
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.float64)
        if self.policy_.budget_aware:
            if remaining is None or budget is None:
                raise InvalidInputError("budget-aware adapter needs remaining and total budget")
            X = tok_features(X, np.broadcast_to(np.asarray(remaining, dtype=np.float64), (X.shape[0],)), budget)
        return np.atleast_2d(tok_forward(self.policy_, X))

    def predict(self, X, remaining=None, budget=None):
        return np.argmax(self.predict_proba(X, remaining, budget), axis=1)
