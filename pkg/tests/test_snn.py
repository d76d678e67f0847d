import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from est.ann import ann_forward, init_params
from est.converter import calibrate_thresholds, convert
from est.errors import ConfigError, SequencingError
from est.neuron import if_init, rate_decode
from est.snn import (
    POPULATIONS,
    PsaSchedule,
    SnnModel,
    ThresholdSet,
    context_current,
    context_step,
    infer,
    init_states,
    load_model,
    model_from_dict,
    qkv_step,
    save_model,
    score_current,
    score_step,
    snn_forward,
)


def unit_thresholds(blocks=1):
    return ThresholdSet({p: [1.0] * blocks for p in POPULATIONS})


def random_model(mode="sa", T=16, rho=0.5, gain="auto", seed=0):
    p = init_params(4, 8, 4, 3, d_ff=16, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 1, (20, 4, 8))
    th, _ = calibrate_thresholds(p, x)
    return convert(p, th, PsaSchedule(T, rho, gain), mode), x


# -- schedule -----------------------------------------------------------------

@pytest.mark.parametrize("T,rho,T_qk", [(4, 0.5, 2), (64, 0.5, 32), (5, 0.5, 3), (10, 0.3, 3),
                                        (1, 0.5, 1), (7, 1.0, 7), (3, 0.01, 1)])
def test_active_window(T, rho, T_qk):
    assert PsaSchedule(T, rho).T_qk == T_qk


def test_gain_modes():
    assert PsaSchedule(64, 0.5).gain == 2.0
    assert PsaSchedule(64, 0.5, "fixed").gain == 1.0
    assert PsaSchedule(64, 1.0, "auto").gain == 1.0


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
def test_rho_range(rho):
    with pytest.raises(ConfigError):
        PsaSchedule(4, rho)


def test_sa_forces_rho_one():
    m = SnnModel(init_params(2, 2, 1, 2), unit_thresholds(), PsaSchedule(8, 0.5), "sa")
    assert m.schedule.rho == 1.0 and m.schedule.gain == 1.0


def test_threshold_set_must_be_complete():
    with pytest.raises(ConfigError, match="score"):
        ThresholdSet({p: [1.0] for p in POPULATIONS if p != "score"})


# -- per-step operations ---------------------------------------------------------

def test_zero_weights_never_spike():
    p = init_params(4, 8, 4, 3, seed=0).map(np.zeros_like)
    m = SnnModel(p, unit_thresholds(), PsaSchedule(10), "sa")
    st_ = init_states(m, 1)[0]
    x = np.ones((1, 4, 8))
    for t in range(1, 11):
        q, k, v, st_ = qkv_step(x, m, st_, t)
        assert not (q.any() or k.any() or v.any())


def test_psa_steps_qk_only_in_window():
    m, x = random_model("psa", T=4, rho=0.5)
    st_ = init_states(m, len(x))[0]
    for t in range(1, 5):
        q, k, _, st_ = qkv_step(x, m, st_, t)
        if t > 2:
            assert not q.any() and not k.any()
    assert st_["q"].t == 2 and st_["k"].t == 2 and st_["v"].t == 4


def test_sa_and_psa_agree_inside_window():
    sa, x = random_model("sa", T=16)
    psa, _ = random_model("psa", T=16, rho=0.5)
    s_sa, s_psa = init_states(sa, len(x))[0], init_states(psa, len(x))[0]
    for t in range(1, psa.schedule.T_qk + 1):
        q1, k1, v1, s_sa = qkv_step(x, sa, s_sa, t)
        q2, k2, v2, s_psa = qkv_step(x, psa, s_psa, t)
        assert q1.tobytes() == q2.tobytes() and k1.tobytes() == k2.tobytes()
        assert v1.tobytes() == v2.tobytes()


def test_step_beyond_T():
    m, x = random_model(T=3)
    with pytest.raises(SequencingError):
        qkv_step(x, m, init_states(m, len(x))[0], 4)
    with pytest.raises(SequencingError):
        qkv_step(x, m, init_states(m, len(x))[0], 0)


def test_score_current_popcount_example():
    q = np.array([[1, 0, 1, 1]])
    k = np.array([[1, 1, 0, 1]])
    # AND = [1,0,0,1] -> popcount 2, / d=4
    assert score_current(q, k, 4)[0, 0] == 0.5


def test_score_current_zero_query():
    k = np.random.default_rng(0).integers(0, 2, (3, 4))
    assert not score_current(np.zeros((3, 4)), k, 4).any()


@given(st.integers(1, 6), st.integers(1, 8), st.floats(1, 4), st.data())
def test_score_current_bounds(n, d, gain, data):
    q = np.array(data.draw(st.lists(st.lists(st.integers(0, 1), min_size=d, max_size=d),
                                    min_size=n, max_size=n)))
    k = np.array(data.draw(st.lists(st.lists(st.integers(0, 1), min_size=d, max_size=d),
                                    min_size=n, max_size=n)))
    cur = score_current(q, k, d, gain)
    assert cur.min() >= 0 and cur.max() <= gain + 1e-12
    oracle = np.array([[gain * np.sum(q[i] & k[j]) / d for j in range(n)] for i in range(n)])
    np.testing.assert_allclose(cur, oracle)


def test_score_keeps_stepping_after_window():
    m, x = random_model("psa", T=4, rho=0.5)
    s = if_init((1, 4, 4), 0.5)
    s = s.__class__(np.full((1, 4, 4), 3.0), s.o_prev, s.v, 2, 0)
    q = np.ones((1, 4, 4), dtype=np.uint8)
    a, s2 = score_step(q, q, m, s, t=3)
    # input is ignored after T_qk; residual charge 3.0 > 0.5 still fires
    assert a.all() and s2.t == 3
    np.testing.assert_array_equal(s2.u, 3.0)


def test_context_current_examples():
    rng = np.random.default_rng(0)
    v = rng.integers(0, 2, (3, 2)).astype(float)
    W_o = rng.standard_normal((2, 5))
    assert not context_current(np.zeros((3, 3)), v, W_o).any()
    np.testing.assert_allclose(context_current(np.eye(3), v, W_o), v @ W_o)
    assert context_current([[1]], [[1]], [[1.0]])[0, 0] == 1.0


def test_context_step_advances_state():
    m, x = random_model(T=2)
    s = init_states(m, 1)[0]["context"]
    h, s2 = context_step(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), m, s, 1)
    assert not h.any() and s2.t == 1


# -- full forward ----------------------------------------------------------------

def test_zero_input_zero_everything():
    m, _ = random_model(T=1)
    logits, rec = snn_forward(m, np.zeros((4, 8)))
    assert not logits.any() and rec.counts.sum() == 0


def test_uncalibrated_rejected():
    m = SnnModel(init_params(2, 2, 1, 2), None, PsaSchedule(4))
    with pytest.raises(ConfigError):
        snn_forward(m, np.zeros((2, 2)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_psa_qk_totals_equal_sa_first_window(seed):
    sa, x = random_model("sa", T=32, seed=seed)
    psa, _ = random_model("psa", T=32, rho=0.5, gain="fixed", seed=seed)
    _, r_sa = snn_forward(sa, x)
    _, r_psa = snn_forward(psa, x)
    w = psa.schedule.T_qk
    for layer in ("b0.q", "b0.k", "b0.score"):
        np.testing.assert_array_equal(r_psa.layer(layer)[:w], r_sa.layer(layer)[:w])
    for layer in ("b0.q", "b0.k"):
        assert r_psa.layer(layer).sum() == r_sa.layer(layer)[:w].sum()
        assert not r_psa.layer(layer)[w:].any()
    np.testing.assert_array_equal(r_psa.layer("b0.v"), r_sa.layer("b0.v"))


@pytest.mark.parametrize("gain", ["auto", "fixed"])
def test_rho_one_collapse(gain):
    sa, x = random_model("sa", T=16)
    psa, _ = random_model("psa", T=16, rho=1.0, gain=gain)
    l1, r1 = snn_forward(sa, x)
    l2, r2 = snn_forward(psa, x)
    assert l1.tobytes() == l2.tobytes()
    assert r1.counts.tobytes() == r2.counts.tobytes()
    assert psa.effective_mode == "sa"


def test_record_conservation_and_bounds():
    m, x = random_model("psa", T=24, rho=0.5)
    _, rec = snn_forward(m, x)
    assert rec.counts.sum() == rec.emitted
    assert rec.pair_counts[0].sum() == rec.layer("b0.score").sum()
    assert (rec.counts >= 0).all()
    sizes = np.array(rec.layer_sizes)[:, None] * rec.n_samples
    assert (rec.counts <= sizes).all()


def test_all_signals_binary():
    m, x = random_model("psa", T=8)
    st_ = init_states(m, len(x))[0]
    for t in range(1, 9):
        q, k, v, st_ = qkv_step(x, m, st_, t)
        a, st_["score"] = score_step(q, k, m, st_["score"], t)
        for s in (q, k, v, a):
            assert s.dtype == np.uint8 and s.max() <= 1


def test_single_layer_rate_fidelity():
    """Decoded Q rates track the ANN's Q within 2v/T wherever Q <= v."""
    m, x = random_model("sa", T=1000)
    v_q = m.thresholds.get("q")
    st_ = init_states(m, len(x))[0]
    counts = np.zeros(st_["q"].shape, dtype=np.int64)
    for t in range(1, 1001):
        q, _, _, st_ = qkv_step(x, m, st_, t)
        counts += q
    _, cache = ann_forward(m.params, x)
    ann_q = cache.blocks[0].q
    inside = ann_q <= v_q
    err = np.abs(rate_decode(counts, 1000, v_q) - ann_q)[inside]
    assert err.max() <= 2 * v_q / 1000


def test_batch_equals_single_sample():
    m, x = random_model("psa", T=12)
    batch, _ = snn_forward(m, x)
    for i in range(3):
        single, _ = snn_forward(m, x[i])
        assert single.tobytes() == batch[i].tobytes()


def test_workers_do_not_change_results():
    m, x = random_model("psa", T=12)
    l1, r1 = infer(m, x, workers=1)
    l3, r3 = infer(m, x, workers=3)
    assert l1.tobytes() == l3.tobytes()
    assert r1.counts.tobytes() == r3.counts.tobytes()
    assert r1.pair_counts[0].tobytes() == r3.pair_counts[0].tobytes()
    assert r1.emitted == r3.emitted and r3.n_samples == len(x)


def test_two_block_model_runs():
    p = init_params(4, 8, 4, 3, d_ff=16, blocks=2, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (5, 4, 8))
    th, _ = calibrate_thresholds(p, x)
    m = convert(p, th, PsaSchedule(64, 0.5), "psa")
    logits, rec = snn_forward(m, x)
    assert logits.shape == (5, 3) and len(rec.layers) == 14
    assert rec.layers[7] == "b1.q"


def test_model_file_round_trip(tmp_path):
    m, _ = random_model("psa", T=16, rho=0.5, gain="fixed")
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["schedule"] == {"T": 16, "rho": 0.5, "gain": "fixed"} and doc["mode"] == "psa"
    assert set(doc["thresholds"]) == set(POPULATIONS)


def test_malformed_model_document():
    with pytest.raises(ConfigError):
        model_from_dict({"mode": "sa"})
