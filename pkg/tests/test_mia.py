import json
import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from memfab.data import LabeledExample
from memfab.mia import (
    SIGMA_FLOOR,
    Auditor,
    EmptyReferenceError,
    InsufficientModelsError,
    LiRAGaussians,
    StatisticKind,
    ThresholdRule,
    attack_r_from_arrays,
    attack_r_statistic,
    decide_membership,
    fit_lira,
    fit_lira_arrays,
    lira_statistic,
    logit_scale,
    loss_statistic,
    read_lira_cache,
    rmia_from_probs,
    rmia_statistic,
    write_lira_cache,
    write_statistics_csv,
)
from memfab.metrics import auc, roc_curve
from memfab.model_core import ShadowEnsemble


def ex(shape=(1, 2, 2), y=0, sid="q"):
    return LabeledExample(sid, torch.full(shape, 0.5), y)


def logit_for(phi):
    """Two-class constant logits whose phi(p_0) equals `phi`."""
    return [phi, 0.0]


def test_loss_statistic_examples(constant_model):
    assert loss_statistic(constant_model([90.0, 0.0]), ex()) == pytest.approx(0.0, abs=1e-12)
    assert loss_statistic(constant_model([0.0, 0.0]), ex()) == pytest.approx(-0.6931, abs=1e-4)


def test_logit_scale_examples():
    assert logit_scale(0.5) == 0.0
    assert logit_scale(0.9) == pytest.approx(math.log(9), abs=1e-12)
    mpmath.mp.dps = 50
    q = mpmath.mpf(1 - 1e-12)  # the float actually passed in
    assert logit_scale(1 - 1e-12) == pytest.approx(float(mpmath.log(q / (1 - q))), rel=1e-12)
    assert logit_scale(1.0) == logit_scale(1 - 1e-12)
    ideal = mpmath.log((1 - mpmath.mpf("1e-12")) / mpmath.mpf("1e-12"))
    assert logit_scale(1 - 1e-12) == pytest.approx(float(ideal), abs=1e-3)


def test_fit_degenerate_values_floor():
    phi = np.array([1, 1, 1, -1, -1, -1], float)[:, None]
    member = np.array([1, 1, 1, 0, 0, 0], bool)[:, None]
    mu_in, mu_out, s_in, s_out, _ = fit_lira_arrays(phi, member)
    assert (mu_in[0], mu_out[0], s_in[0], s_out[0]) == (1, -1, SIGMA_FLOOR, SIGMA_FLOOR)
    assert LiRAGaussians(1, -1, 0, 0).sigma_in == SIGMA_FLOOR


def test_fit_monte_carlo():
    rng = np.random.default_rng(0)
    for m in (8, 32, 128):
        phi = np.concatenate([rng.normal(2, 0.5, m), rng.normal(-1, 0.5, m)])[:, None]
        member = np.r_[np.ones(m, bool), np.zeros(m, bool)][:, None]
        mu_in, *_ = fit_lira_arrays(phi, member)
        assert abs(mu_in[0] - 2) < 3 * 0.5 / math.sqrt(m)


def test_fit_requires_two_per_side():
    with pytest.raises(InsufficientModelsError):
        fit_lira_arrays(np.zeros((3, 1)), np.array([[1], [0], [0]], bool))


def test_fit_lira_from_ensemble(constant_model):
    models = [constant_model(logit_for(v)) for v in (1.0, 1.2, -1.0, -1.2)]
    manifest = [(["q"], []), (["q"], []), ([], ["q"]), ([], ["q"])]
    g = fit_lira(ShadowEnsemble(models, manifest), ex())
    assert g.mu_in == pytest.approx(1.1, abs=1e-6) and g.mu_out == pytest.approx(-1.1, abs=1e-6)
    assert not g.per_sample


def test_lira_statistic_examples():
    for phi in (-3.0, 0.0, 2.5):
        assert lira_statistic(LiRAGaussians(0.3, 0.3, 2, 2), phi) == 0.0
    assert lira_statistic(LiRAGaussians(1, -1, 1, 1), 1.0) == pytest.approx(2.0, abs=1e-12)
    assert lira_statistic(LiRAGaussians(1, -1, 1, 1), 0.0) == pytest.approx(0.0, abs=1e-12)


def test_attack_r_examples(constant_model):
    target = constant_model(logit_for(1.0))
    refs = [constant_model(logit_for(v)) for v in (-2.0, 0.0, 2.0)]
    assert attack_r_statistic(refs, ex(), target) == pytest.approx(2 / 3)
    assert attack_r_statistic(refs, ex(), constant_model(logit_for(-5.0))) == 0.0
    assert attack_r_statistic(refs, ex(), constant_model(logit_for(5.0))) == 1.0
    with pytest.raises(EmptyReferenceError):
        attack_r_statistic([], ex(), target)


def test_attack_r_arrays_bounds(rng):
    phi_t, refs = rng.normal(size=50), rng.normal(size=(7, 50))
    mask = rng.random((7, 50)) < 0.5
    mask[0] = True
    s = attack_r_from_arrays(phi_t, refs, mask)
    assert ((s >= 0) & (s <= 1)).all()
    with pytest.raises(EmptyReferenceError):
        attack_r_from_arrays(phi_t, refs, np.zeros((7, 50), bool))


def test_rmia_hand_example():
    s = rmia_from_probs([0.8], [0.5], [0.9, 0.1], [0.5, 0.5], gamma=1.0)
    assert s[0] == pytest.approx(0.5)


def test_rmia_identical_models(constant_model):
    m = constant_model([0.3, -0.2])
    ens = ShadowEnsemble([m, m], [(["q"], []), ([], ["q"])])
    pop = [ex(sid=f"z{i}", y=i % 2) for i in range(4)]
    for gamma in (1.0, 2.0):
        assert rmia_statistic(ens, pop, ex(), m, gamma) == 0.0
    with pytest.raises(EmptyReferenceError):
        rmia_statistic(ens, [], ex(), m)


def test_decision_strict():
    rule = ThresholdRule(0.5)
    assert decide_membership(0.5, rule) == 0
    assert decide_membership(0.51, rule) == 1
    with pytest.raises(ValueError):
        ThresholdRule(0.0, direction="less")


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_decision_property(s, tau):
    assert decide_membership(s, ThresholdRule(tau)) == int(s > tau)


def test_positive_rate_monotone_in_tau(rng):
    s = rng.normal(size=300)
    rates = [decide_membership(s, ThresholdRule(t)).mean() for t in np.sort(s)]
    assert np.all(np.diff(rates) <= 0)


def test_monotone_transferability(rng):
    p = rng.uniform(0.01, 0.99, 500)
    g = LiRAGaussians(1.5, -0.5, 0.8, 0.8)
    stats = [np.log(p), logit_scale(p), lira_statistic(g, logit_scale(p))]
    for s in stats:
        assert spearmanr(p, s).statistic == pytest.approx(1.0)


def test_auditor_orientation(tiny_model, tiny_ensemble, tiny_ds, tiny_split):
    zx = tiny_ds.subset(tiny_split.nonmember_pool[-40:])
    aud = Auditor(tiny_model, tiny_ensemble, population=(zx.x, zx.y))
    mem, non = tiny_ds.subset(tiny_split.eval_members), tiny_ds.subset(tiny_split.eval_nonmembers)
    for kind in StatisticKind:
        sm = aud.scores(kind, mem.x, mem.y, mem.ids)
        sn = aud.scores(kind, non.x, non.y, non.ids)
        assert sm.shape == (len(mem),) and np.isfinite(sm).all()
        assert auc(roc_curve(np.r_[sm, sn], np.r_[np.ones(len(sm)), np.zeros(len(sn))])) > 0.5, kind
    with pytest.raises(EmptyReferenceError):
        Auditor(tiny_model).scores("lira", mem.x, mem.y, mem.ids)


def test_persistence(tmp_path):
    p = write_statistics_csv([("a", "loss", -0.25), ("b", "loss", -1.5)], tmp_path / "s.csv")
    assert p.read_text().splitlines()[0] == "sample_id,kind,statistic"
    fits = {"a": LiRAGaussians(1, -1, 0.5, 0.7)}
    q = write_lira_cache(fits, tmp_path / "l.json")
    assert "a" in json.loads(q.read_text())
    assert read_lira_cache(q)["a"] == fits["a"]
