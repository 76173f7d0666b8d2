import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from adaptive_decoding import SequenceAdapter, TokenAdapter
from adaptive_decoding.categorical import TOKEN_LEVEL_ACTIONS
from adaptive_decoding.env import ForkingChain, ForkingChainSpec, TwoRegime, TwoRegimeSpec
from adaptive_decoding.exceptions import InvalidInputError

GREEDY, _, T1, T125 = TOKEN_LEVEL_ACTIONS
FAST = {"steps": 300, "batch_size": 32, "eval_interval": 0, "filter_bounds": None}


@pytest.fixture(scope="module")
def regime():
    return TwoRegime(TwoRegimeSpec([GREEDY, T1, T125], [[0.9, 0.1, 0.1], [0.1, 0.1, 0.9]]))


def test_params_and_clone():
    est = SequenceAdapter(hidden=(8,), random_state=3)
    assert est.get_params()["hidden"] == (8,)
    twin = clone(est.set_params(dropout=0.0))
    assert twin.get_params() == est.get_params()


def test_unfitted():
    with pytest.raises(NotFittedError):
        SequenceAdapter().predict([[1.0, 0.0]], budget=1)


def test_sequence_fit_predict(regime):
    est = SequenceAdapter(hidden=(16,), train_config=FAST).fit(regime)
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    proba = est.predict_proba(X, budget=1)
    assert proba.shape == (2, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    assert list(est.predict(X, budget=1)) == [0, 2]
    assert est.predict_actions(X, budget=1) == [GREEDY, T125]
    assert len(est.trace_) == 300


def test_sequence_input_checks(regime):
    est = SequenceAdapter(hidden=(4,), train_config={**FAST, "steps": 2}).fit(regime)
    with pytest.raises(InvalidInputError):
        est.predict([[1.0, 0.0, 0.0]], budget=1)
    with pytest.raises(InvalidInputError):
        est.predict([[1.0, 0.0]])
    with pytest.raises(ValueError):
        est.predict([[np.nan, 0.0]], budget=1)


def test_budget_agnostic_ignores_budget(regime):
    est = SequenceAdapter(budget_aware=False, hidden=(4,), train_config={**FAST, "steps": 5}).fit(regime)
    X = [[1.0, 0.0]]
    np.testing.assert_array_equal(est.predict_proba(X, budget=1), est.predict_proba(X, budget=8))


def test_token_adapter():
    env = ForkingChain(ForkingChainSpec(length=6, fork_positions=(2,)))
    est = TokenAdapter(hidden=(8,), train_config={**FAST, "steps": 10}).fit(env)
    obs = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert est.predict_proba(obs, remaining=3, budget=6).shape == (2, 4)
    assert est.predict(obs, remaining=3, budget=6).shape == (2,)
    with pytest.raises(InvalidInputError):
        est.predict(obs)
