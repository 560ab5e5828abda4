import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params, restricted_params, scalar_params
from selssm.errors import DataError, ParameterError, ScanOverflowError
from selssm.ssm import (
    SsmParams,
    discretize_a,
    embed,
    init_params,
    linear_attention_output,
    load_checkpoint,
    logits_batch,
    save_checkpoint,
    scan_batch,
    scan_forward,
    spectral_abscissa,
    step_size,
    unrolled_output,
)

UNIT_P = math.log(math.e - 1)


def test_step_size_examples():
    params = random_params(np.random.default_rng(0), 3, 2)
    params.p, params.q = 0.0, np.zeros(3)
    assert step_size(params, np.array([5.0, -1.0, 2.0])) == pytest.approx(math.log(2))
    params.p = UNIT_P
    assert step_size(params, np.ones(3)) == pytest.approx(1.0, rel=1e-15)
    params.p, params.q = 1.0, np.array([1.0, 0.0, 0.0])
    assert step_size(params, np.array([1.0, 0.0, 0.0])) == pytest.approx(2.126928, abs=1e-6)
    with pytest.raises(ParameterError):
        step_size(params, np.ones(2))


def test_discretize_examples():
    assert np.all(discretize_a(np.zeros((2, 3)), 0.7) == 1.0)
    assert discretize_a(np.array([[-1.0]]), 1.0)[0, 0] == pytest.approx(0.3678794, abs=1e-7)
    assert discretize_a(np.array([[math.log(2)]]), 0.5)[0, 0] == pytest.approx(1.4142136, abs=1e-7)
    with pytest.raises(ParameterError):
        discretize_a(np.zeros((1, 1)), 0.0)


@given(st.floats(-50, 50), st.floats(1e-3, 10))
def test_discretize_strictly_positive(a, delta):
    assert discretize_a(np.array([[a]]), delta)[0, 0] > 0


def test_scan_hand_unrolled_example():
    params = scalar_params(0.0, p=UNIT_P)
    ys, logits = scan_forward(params, np.array([1.0, 1.0]))
    assert [y[0] for y in ys] == pytest.approx([1.0, 2.0], rel=1e-14)
    assert logits[0] == pytest.approx(2.0, rel=1e-14)
    assert unrolled_output(params, np.array([1.0, 1.0]))[0] == pytest.approx(2.0, rel=1e-12)


def test_scan_zero_input_gives_zero_logits():
    params = random_params(np.random.default_rng(1), 3, 2)
    _, logits = scan_forward(params, np.zeros((1, 3)))
    assert np.all(logits == 0.0)


def test_restricted_instance_gives_seven():
    ys, logits = scan_forward(restricted_params(1.0), np.ones(3), unit_step=True)
    assert [y[0] for y in ys] == pytest.approx([1.0, 3.0, 7.0], rel=1e-14)
    assert logits[0] == pytest.approx(7.0, rel=1e-14)


def test_single_step_unrolled_is_one_term():
    rng = np.random.default_rng(2)
    params = random_params(rng, 3, 2)
    u = rng.normal(size=3)
    delta = step_size(params, u)
    expected = np.kron(np.eye(3), (params.w_c @ u)[None, :]) @ (delta * np.kron(np.eye(3), (params.w_b @ u)[:, None]) @ u)
    assert unrolled_output(params, u[None])[0] == pytest.approx(expected[0], rel=1e-12)
    assert np.allclose(scan_forward(params, u[None])[0][0], expected, rtol=1e-12, atol=0)


def test_linear_attention_examples():
    assert linear_attention_output(1.0, 1.0, 1.0, [1.0, 1.0])[0] == pytest.approx(2.0)
    assert linear_attention_output(1.0, 1.0, 1.0, [0.0, 0.0, 0.0])[0] == 0.0
    c, wc, wb, r = 1.7, 0.3, -2.0, 0.5
    assert linear_attention_output(wb, wc, r, [c])[0] == pytest.approx(c**3 * wc * wb * r, rel=1e-14)


def test_linear_attention_matches_unrolled_with_zero_state_matrix():
    rng = np.random.default_rng(3)
    params = random_params(rng, 3, 2)
    params.a_diag = np.zeros((3, 2))
    U = rng.normal(size=(6, 3))
    y = unrolled_output(params, U, unit_step=True)
    expected = linear_attention_output(params.w_b, params.w_c, params.readout, U)
    assert np.allclose(params.readout @ y, expected, rtol=1e-12, atol=1e-14)


def test_cubic_homogeneity_in_linear_attention_regime():
    rng = np.random.default_rng(4)
    params = random_params(rng, 2, 3)
    params.a_diag = np.zeros((2, 3))
    U = rng.normal(size=(5, 2))
    _, base = scan_forward(params, U, unit_step=True)
    _, scaled = scan_forward(params, 2.5 * U, unit_step=True)
    assert np.allclose(scaled, 2.5**3 * base, rtol=1e-12)


def test_spectral_abscissa_examples():
    assert spectral_abscissa(np.array([[-0.5, -0.1, -1.2]])) == -0.1
    assert spectral_abscissa(np.full((2, 2), 0.1)) == 0.1
    assert spectral_abscissa(np.array([[math.log1p(0.5)]])) == math.log1p(0.5)


@pytest.mark.parametrize("s", [0.1, 0.0, -0.1])
def test_init_params_pins_abscissa(s):
    params = init_params(4, 4, 2, 2, s, seed=7)
    assert spectral_abscissa(params.a_diag) == s
    assert params.p == 0.0
    assert np.all(params.a_diag >= s - 1.0)
    r = 1 / math.sqrt(4)
    for arr in (params.w_b, params.w_c, params.q, params.readout, params.embedding):
        assert np.all(np.abs(arr) <= r)


def test_init_params_deterministic():
    a, b = init_params(3, 2, 4, 6, 0.0, seed=11), init_params(3, 2, 4, 6, 0.0, seed=11)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    c = init_params(3, 2, 4, 6, 0.0, seed=12)
    assert not np.array_equal(a.w_b, c.w_b)


def test_embed():
    table = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(embed([0], table), table[:1])
    out = embed([2, 2], table)
    assert np.array_equal(out[0], out[1])
    assert embed([], table).shape == (0, 2)
    with pytest.raises(DataError):
        embed([3], table)
    with pytest.raises(DataError):
        embed([-1], table)


def test_params_validation():
    good = random_params(np.random.default_rng(0), 2, 3).to_dict()
    bad = dict(good, w_b=np.zeros((2, 2)))
    del bad["d"], bad["N"], bad["K"], bad["V"]
    with pytest.raises(ParameterError):
        SsmParams(**bad)
    nan = {k: good[k] for k in ("a_diag", "w_b", "w_c", "p", "q", "readout", "embedding")}
    nan["p"] = math.nan
    with pytest.raises(ParameterError):
        SsmParams(**nan)


def test_checkpoint_round_trip(tmp_path):
    params = random_params(np.random.default_rng(5), 2, 3)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"d", "N", "K", "V", "a_diag", "w_b", "w_c", "p", "q", "readout", "embedding"}
    back = load_checkpoint(path)
    for name in ("a_diag", "w_b", "w_c", "q", "readout", "embedding"):
        assert np.array_equal(getattr(back, name), getattr(params, name))
    assert back.p == params.p


def test_checkpoint_rejects_inconsistent_dims(tmp_path):
    doc = random_params(np.random.default_rng(5), 2, 3).to_dict()
    doc["N"] = 7
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParameterError):
        load_checkpoint(path)


def test_overflow_reports_first_bad_step():
    params = scalar_params(5.0)
    with pytest.raises(ScanOverflowError) as info:
        scan_forward(params, np.ones(400), unit_step=True)
    # the state grows like e^(5t) and leaves double range just past t = 141
    assert info.value.timestep == 143


def test_batch_scan_matches_single_scans():
    rng = np.random.default_rng(6)
    params = random_params(rng, 3, 2, V=4)
    tokens = rng.integers(0, 4, size=(5, 7))
    batched = logits_batch(params, tokens, chunk=2)
    for row, toks in zip(batched, tokens):
        assert np.allclose(row, scan_forward(params, toks)[1], rtol=1e-13, atol=1e-15)
    ys = scan_batch(params, embed(tokens, params.embedding), all_outputs=True)
    assert ys.shape == (5, 7, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 20))
def test_scan_matches_unrolled_property(seed, d, N, T):
    rng = np.random.default_rng(seed)
    params = random_params(rng, d, N)
    U = rng.normal(size=(T, d))
    y_scan = scan_forward(params, U)[0][-1]
    y_unroll = unrolled_output(params, U)
    assert np.linalg.norm(y_scan - y_unroll) <= 1e-10 * (1 + np.linalg.norm(y_scan))
