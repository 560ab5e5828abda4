import math

import numpy as np
import pytest

from conftest import random_params
from selssm.artifacts import read_csv
from selssm.autograd import GradientSet, stability_regularizer
from selssm.datasets import gen_listops, gen_majority
from selssm.errors import NumericError, ParameterError
from selssm.ssm import PARAM_FIELDS, init_params
from selssm.training import (
    EVAL_HEADER,
    METRICS_HEADER,
    AdamState,
    TrainConfig,
    adam_step,
    fit,
    write_metrics,
)


def zero_grads(params):
    return GradientSet.zeros_like(params)


def test_train_config_invariants():
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(subset_frac=0.0)
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.N) == (0.01, 1e-5, 4)


def test_adam_zero_gradient_without_decay_is_identity():
    params = random_params(np.random.default_rng(0), 2, 3)
    new, state = adam_step(params, zero_grads(params), AdamState.zeros(params), lr=0.01, wd=0.0)
    for name in PARAM_FIELDS:
        assert np.array_equal(getattr(new, name), getattr(params, name))
    assert state.step == 1


def test_adam_zero_gradient_with_decay_is_pure_shrink():
    params = random_params(np.random.default_rng(1), 2, 3)
    lr, wd = 0.05, 0.2
    new, _ = adam_step(params, zero_grads(params), AdamState.zeros(params), lr=lr, wd=wd)
    for name in PARAM_FIELDS:
        assert np.array_equal(getattr(new, name), np.asarray(getattr(params, name)) * (1 - lr * wd))


def test_adam_two_steps_of_unit_gradient():
    # m1 = 0.1, v1 = 0.001 and m2 = 0.19, v2 = 0.001999 both bias-correct to 1
    params = random_params(np.random.default_rng(2), 1, 1, K=1, V=1)
    grads = zero_grads(params)
    grads.d_p = 1.0
    state = AdamState.zeros(params)
    lr = 0.01
    p0 = params.p
    params, state = adam_step(params, grads, state, lr=lr)
    assert params.p - p0 == pytest.approx(-lr, abs=1e-6)
    p1 = params.p
    params, state = adam_step(params, grads, state, lr=lr)
    assert params.p - p1 == pytest.approx(-lr, abs=1e-6)
    assert state.m["p"] == pytest.approx(0.19, rel=1e-15)
    assert state.v["p"] == pytest.approx(0.001999, rel=1e-12)


def test_adam_rejects_non_finite_gradient():
    params = random_params(np.random.default_rng(3), 2, 2)
    grads = zero_grads(params)
    grads.d_w_b[0, 0] = math.nan
    with pytest.raises(NumericError):
        adam_step(params, grads, AdamState.zeros(params), lr=0.01)


def test_adam_rejects_mismatched_state():
    params = random_params(np.random.default_rng(4), 2, 2)
    other = random_params(np.random.default_rng(4), 3, 2)
    with pytest.raises(ParameterError):
        adam_step(params, zero_grads(params), AdamState.zeros(other), lr=0.01)


def test_regularizer_only_step_reduces_instability():
    params = init_params(3, 2, 2, 2, 0.3, seed=0)
    before, g = stability_regularizer(params.a_diag, 1.0)
    grads = zero_grads(params)
    grads.d_a_diag = g
    new, _ = adam_step(params, grads, AdamState.zeros(params), lr=0.01)
    after, _ = stability_regularizer(new.a_diag, 1.0)
    assert before > 0 and after < before


def majority_config(T, **kw):
    return TrainConfig(**{"T": T, "d": 4, "N": 4, "K": 2, "V": 2, "epochs": 3, **kw})


def test_fit_zero_epochs_leaves_params_untouched():
    train, test = gen_majority(40, 8, 0.1, seed=0), gen_majority(40, 8, seed=1)
    params = init_params(4, 4, 2, 2, 0.0, seed=5)
    result = fit(majority_config(8, epochs=0), train, test, params=params.copy())
    assert result.rows == []
    for name in PARAM_FIELDS:
        assert np.array_equal(getattr(result.params, name), getattr(params, name))


def test_fit_rejects_mismatched_splits_and_config():
    train = gen_majority(20, 8, seed=0)
    with pytest.raises(ParameterError):
        fit(majority_config(8), train, gen_majority(20, 9, seed=1))
    with pytest.raises(ParameterError):
        fit(majority_config(9), train, gen_majority(20, 8, seed=1))
    with pytest.raises(ParameterError):
        fit(majority_config(8, K=3), train, gen_majority(20, 8, seed=1))


def test_fit_learns_short_majority():
    train, test = gen_majority(400, 20, 0.1, seed=0), gen_majority(400, 20, seed=1)
    result = fit(majority_config(20, epochs=8), train, test)
    assert len(result.rows) == 8 and not result.diverged
    last = result.rows[-1]
    assert last.test_accuracy > 0.85
    assert result.succeeded(2)
    for row in result.rows:
        assert 0.0 <= row.accuracy <= 1.0 and 0.0 <= row.test_accuracy <= 1.0


def test_fit_is_deterministic():
    train, test = gen_majority(100, 12, 0.1, seed=0), gen_majority(100, 12, seed=1)
    a = fit(majority_config(12, seed=3), train, test)
    b = fit(majority_config(12, seed=3), train, test)
    assert [repr(r.metrics_row() + r.eval_row()) for r in a.rows] == [
        repr(r.metrics_row() + r.eval_row()) for r in b.rows
    ]
    c = fit(majority_config(12, seed=4), train, test)
    assert repr(a.rows[-1].metrics_row()) != repr(c.rows[-1].metrics_row())


def test_fit_marks_divergence_and_stops():
    train, test = gen_majority(64, 600, seed=0), gen_majority(64, 600, seed=1)
    result = fit(majority_config(600, s_a_init=2.0, epochs=5), train, test)
    assert result.diverged
    assert len(result.rows) == 1
    assert result.rows[-1].diverged and not result.succeeded(2)
    assert math.isnan(result.rows[-1].test_accuracy)


def test_fit_on_balanced_subset():
    train, test = gen_majority(200, 10, 0.1, seed=0), gen_majority(50, 10, seed=1)
    result = fit(majority_config(10, subset_frac=0.1, epochs=2), train, test)
    assert len(result.rows) == 2


def test_fit_on_listops():
    train, test = gen_listops(60, 20, seed=0), gen_listops(30, 20, seed=1)
    cfg = TrainConfig(T=25, d=8, N=4, K=10, V=train.vocab_size, epochs=2)
    result = fit(cfg, train, test)
    assert len(result.rows) == 2 and not result.diverged


def test_metrics_files(tmp_path):
    train, test = gen_majority(40, 8, 0.1, seed=0), gen_majority(40, 8, seed=1)
    result = fit(majority_config(8, epochs=2), train, test)
    write_metrics(result, tmp_path / "metrics.csv", tmp_path / "eval.csv")
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,mean_loss,accuracy,s_a,abs_p,q_l2,wb_l2,wb_l11,wc_l2,wc_l11,ac_l2,max_u_l2,diverged"
    assert tuple(header.split(",")) == METRICS_HEADER
    rows = read_csv(tmp_path / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert float(rows[-1]["s_a"]) == result.rows[-1].s_a
    assert tuple(read_csv(tmp_path / "eval.csv")[0]) == EVAL_HEADER
