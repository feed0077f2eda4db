import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmask.explain import normalize01
from xmask.monitor import (BalanceWeights, BenchmarkReport, MonitorConfig, ReportRow, balance, calibrate_threshold,
                           clean_pair_scores, config_hash, cosine_similarity, cosine_similarity_batch,
                           explain_score, monitor_verdict, normalize_speeds, renoise, speed, stealth_scores,
                           verdict_from_scores)
from xmask.nn import build_mlp
from xmask.tensor import ShapeError

vec = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=12)


def test_cosine_examples():
    a = np.array([0.3, -2.0, 1.0])
    assert abs(cosine_similarity(a, a) - 1.0) < 1e-12
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 1], [1, 0]) - 1 / math.sqrt(2)) < 1e-12
    assert abs(cosine_similarity([1, 1], [1, 0]) - 0.70711) < 1e-5
    assert cosine_similarity([0, 0], [0, 0]) == 1.0
    assert cosine_similarity([0, 0], [1, 0]) == 0.0
    with pytest.raises(ShapeError):
        cosine_similarity([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(vec, st.floats(0.01, 100))
def test_cosine_properties(v, c):
    a = np.array(v)
    b = np.roll(a, 1) + 0.5
    s = cosine_similarity(a, b)
    assert -1 <= s <= 1
    assert abs(s - cosine_similarity(b, a)) < 1e-12
    assert abs(s - cosine_similarity(a, c * b)) < 1e-9


def test_batch_matches_scalar():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 1, 3, 3)), rng.normal(size=(4, 1, 3, 3))
    assert np.allclose(cosine_similarity_batch(a, b), [cosine_similarity(a[i], b[i]) for i in range(4)])


@pytest.fixture(scope="module")
def tiny():
    m = build_mlp((1, 6, 6), hidden=(12,), classes=3, seed=4).requires_grad_(False)
    x = np.random.default_rng(1).random((30, 1, 6, 6)).astype(np.float32)
    return m, x


def test_identity_candidate_passes(tiny):
    m, x = tiny
    v = monitor_verdict(m, x, x, MonitorConfig(tau=1.0, calibration="fixed", ig_steps=8))
    assert np.allclose(v.score, 1.0) and v.pass_rate == 1.0


def test_tau_zero_passes_everything(tiny):
    m, x = tiny
    v = monitor_verdict(m, x, renoise(x, 1), MonitorConfig(tau=0.0, calibration="fixed", xai_method="lrp"))
    assert v.pass_rate == 1.0
    assert verdict_from_scores([-1.0, -0.2, 0.3, 1.0], 0.0).pass_rate == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_pass_set_monotone_in_tau(scores, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert np.all(verdict_from_scores(scores, hi).passed <= verdict_from_scores(scores, lo).passed)


def test_calibration_percentiles(tiny):
    m, x = tiny
    cfg = MonitorConfig(ig_steps=8)
    s = clean_pair_scores(m, x, cfg, seed=3)
    assert calibrate_threshold(m, x, 0, cfg, seed=3) == pytest.approx(s.min())
    assert calibrate_threshold(m, x, 100, cfg, seed=3) == pytest.approx(s.max())
    with pytest.raises(ValueError):
        calibrate_threshold(m, x[:10], 5, cfg)


def test_calibrated_tau_holds_on_held_out_pairs(desk_mnist):
    cfg = MonitorConfig(ig_steps=32)
    x = desk_mnist.test.images
    tau = calibrate_threshold(desk_mnist.model, x[:200], 5, cfg, seed=0)
    held = clean_pair_scores(desk_mnist.model, x[200:400], cfg, seed=1)
    assert np.mean(held >= tau) >= 0.95 - 0.02  # sampling slack on 200 held-out pairs


def test_renoise_bounds():
    x = np.random.default_rng(0).random((3, 1, 4, 4)).astype(np.float32)
    r = renoise(x, 5)
    assert np.all(np.abs(r - x) <= 1 / 255 + 1e-7) and r.min() >= 0 and r.max() <= 1
    assert np.array_equal(r, renoise(x, 5))


def test_stealth_uses_clean_target(tiny):
    m, x = tiny
    cfg = MonitorConfig(ig_steps=8)
    s = stealth_scores(m, x, x, cfg)
    assert np.allclose(s, 1.0)


def test_speed_examples():
    assert speed(30, 15).value == 2.0
    assert speed(0, 3).value == 0.0
    with pytest.raises(ValueError):
        speed(1, 0)
    assert speed(60, 15).value == 2 * speed(30, 15).value
    assert speed(30, 30).value == speed(30, 15).value / 2


def test_explain_score_examples():
    e = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
    assert np.allclose(explain_score(1 - normalize01(e), e), 1.0)
    # complement orthogonal to the normalised saliency -> midpoint
    sal = np.array([[[[1.0, 0.0]]]])
    mask = np.array([[[[1.0, 0.0]]]])  # 1 - mask = [0, 1], orthogonal to [1, 0]
    assert np.allclose(explain_score(mask, sal), 0.5)


def test_balance_examples():
    assert balance([(0.9, 0.5, 1.0)]) == pytest.approx(0.8)
    assert balance([(0.9, 0.5, 1.0), (0.7, 0.1, 0.0)], BalanceWeights(1, 0, 0)) == pytest.approx(0.8)
    assert balance([(0.9, 0.5, 1.0), (0.7, 0.1, 0.0)], BalanceWeights(0, 0, 1)) == pytest.approx(0.5)
    assert balance([(0.6, 0.4, 0.2)] * 2) == balance([(0.6, 0.4, 0.2)])
    with pytest.raises(ValueError):
        BalanceWeights(0, 0, 0)


def test_normalize_speeds():
    assert normalize_speeds({"a": 2.0, "b": 4.0, "c": 3.0}) == {"a": 0.0, "b": 1.0, "c": 0.5}
    assert normalize_speeds({"a": 2.0, "b": 2.0}) == {"a": 1.0, "b": 1.0}
    assert normalize_speeds({"a": 0.0}) == {"a": 0.0}


def test_report_csv_and_text():
    rows = [ReportRow("pgd", 0.25, 1.5, 0.82, 0.1, 0.5, 0.6, 3, config_hash({"x": 1}))]
    rep = BenchmarkReport(rows, {"tau": "0.99"})
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "method,accuracy,time,stealth,pass_rate,delta_exp,balance,seed,config_hash"
    assert csv_text.splitlines()[1].startswith("pgd,0.250000,1.500000,0.820000")
    assert len(config_hash({"x": 1})) == 12 and config_hash({"x": 1}) != config_hash({"x": 2})
    assert "pgd" in rep.to_text() and "# tau: 0.99" in rep.to_text()
    assert rep.row("pgd") is rows[0]
