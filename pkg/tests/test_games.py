import numpy as np
import pytest
import torch

from memfab import metrics
from memfab.data import make_synthetic
from memfab.defense import RobustWeightConfig
from memfab.fabrication import FabricationConfig
from memfab.games import (
    EmptySelectionError,
    FabricationCache,
    GameOutcome,
    MalformedRecordError,
    MissingEnsembleError,
    MixtureSpec,
    ScoreRecord,
    armia_metrics,
    mfd_roc,
    prefilter_threshold,
    read_records,
    run_armia_game,
    run_mfa_game,
    run_mfd_game,
    run_mi_game,
)
from memfab.model_core import make_membership_splits

from conftest import ConstantNet, MemorizerNet, wrap

FAST = FabricationConfig(steps=10)


@pytest.fixture(scope="module")
def cache():
    return FabricationCache()


def test_mi_game_labels(tiny_model, tiny_ds, tiny_split):
    out = run_mi_game(tiny_model, tiny_ds, tiny_split, "loss")
    b = out.column("member")
    assert len(out.records) == 300 and b.sum() == 150
    assert out.column("fabricated").sum() == 0
    assert metrics.auc(out.roc()) > 0.5


def test_perfect_memorizer():
    ds = make_synthetic(80, image_size=4, seed=0)
    split = make_membership_splits(ds, 40, 0, seed=0)
    mem = ds.subset(split.train_members)
    model = wrap(MemorizerNet(mem.x, mem.y, ds.n_classes), ds.n_classes, ds.input_shape)
    assert metrics.auc(run_mi_game(model, ds, split, "loss").roc()) == 1.0


def test_missing_ensemble(tiny_model, tiny_ds, tiny_split):
    for kind in ("attack_r", "lira", "rmia"):
        with pytest.raises(MissingEnsembleError):
            run_mi_game(tiny_model, tiny_ds, tiny_split, kind)


def test_zero_epsilon_mfa_equals_mi(tiny_model, tiny_ds, tiny_split, cache):
    mi = run_mi_game(tiny_model, tiny_ds, tiny_split, "loss")
    mfa = run_mfa_game(tiny_model, tiny_ds, tiny_split, "loss", FabricationConfig(epsilon=0.0, steps=3), cache=cache)
    assert [r.sample_id for r in mi.records] == [r.sample_id for r in mfa.records]
    assert np.array_equal(mi.column("statistic"), mfa.column("statistic"))
    assert np.array_equal(mi.column("member"), mfa.column("member"))
    c0 = metrics.tnr_tpr_curve(mfa)
    assert metrics.error_area(c0) == pytest.approx(1 - metrics.auc(mi.roc()), abs=1e-12)
    with pytest.raises(metrics.ProtocolMismatchError):
        metrics.tnr_tpr_curve(mi)


def test_mfa_labels_and_query_discipline(tiny_model, tiny_ds, tiny_split, cache, tmp_path):
    out = run_mfa_game(tiny_model, tiny_ds, tiny_split, "loss", FAST, cache=cache)
    b, f = out.column("member"), out.column("fabricated")
    assert b.sum() == f.sum() == 150 and not (b.astype(bool) & f.astype(bool)).any()
    # recompute a random fabricated record from the persisted query tensor
    path = out.write_queries(tmp_path / "q.npz")
    z = np.load(path)
    i = int(np.random.default_rng(7).choice(np.flatnonzero(f)))
    x = torch.from_numpy(z["x"][i : i + 1])
    s = -float(tiny_model.losses(x, torch.tensor(z["y"][i : i + 1]))[0])
    assert s == pytest.approx(out.records[i].statistic, abs=1e-5)
    orig = tiny_ds[out.records[i].sample_id]
    assert not torch.equal(x[0], orig.x)


def test_mfa_raises_error_area(tiny_model, tiny_ds, tiny_split, cache):
    nat = run_mfa_game(tiny_model, tiny_ds, tiny_split, "loss", FabricationConfig(epsilon=0.0, steps=3), cache=cache)
    fab = run_mfa_game(tiny_model, tiny_ds, tiny_split, "loss", FabricationConfig(), cache=cache)
    ea = lambda o: metrics.error_area(metrics.tnr_tpr_curve(o))
    assert ea(fab) > ea(nat) + 0.2


def test_mfd_game(tiny_model, tiny_ds, tiny_split, cache):
    out = run_mfd_game(tiny_model, tiny_ds, tiny_split, FabricationConfig(), prefilter_negatives="natural", cache=cache)
    assert out.protocol == "mfd"
    assert out.config["n_selected_members"] + out.config["n_selected_fabricated"] == len(out.records)
    assert set(out.column("detected_fabricated")) <= {0, 1}
    both = run_mfd_game(tiny_model, tiny_ds, tiny_split, FabricationConfig(), backend="both",
                        prefilter_negatives="natural", cache=cache)
    assert np.isfinite(both.column("grad_norm_fd")).all()


def test_mfd_empty_selection(tiny_ds, tiny_split):
    flat = wrap(ConstantNet([0.0] * tiny_ds.n_classes), tiny_ds.n_classes, tiny_ds.input_shape)
    with pytest.raises(EmptySelectionError):
        run_mfd_game(flat, tiny_ds, tiny_split, FabricationConfig(steps=2), cache=FabricationCache())


def test_prefilter_threshold_fpr():
    s = np.arange(100.0)
    neg = np.zeros(100, bool)
    neg[::2] = True
    tau = prefilter_threshold(s, neg, 0.1)
    assert (s[neg] > tau).mean() <= 0.1
    assert (s[neg] >= tau).mean() > 0.1


def test_constant_gradient_detector_is_chance():
    recs = [ScoreRecord(f"s{i}", int(i % 2 == 0), int(i % 2 == 1), 0.0, 0.7, float("nan"), "loss") for i in range(20)]
    out = GameOutcome(recs, "mfd")
    assert metrics.auc(mfd_roc(out)) == 0.5


def test_mixture_validation_and_counts():
    with pytest.raises(ValueError):
        MixtureSpec(0.5, 0.3, 0.3)
    assert MixtureSpec().counts(150, 150) == (150, 75, 75)
    n_m, n_f, n_n = MixtureSpec().counts(100, 61)
    total = n_m + n_f + n_n
    for frac, n in zip((0.5, 0.25, 0.25), (n_m, n_f, n_n)):
        assert abs(n - frac * total) <= 1


def test_armia_game(tiny_model, tiny_ensemble, tiny_ds, tiny_split, cache):
    out = run_armia_game(tiny_model, tiny_ds, tiny_split, "attack_r", FAST, RobustWeightConfig(10), ensemble=tiny_ensemble,
                         cache=cache)
    b, f = out.column("member"), out.column("fabricated")
    n = len(out.records)
    assert abs(b.sum() - n / 2) <= 1 and abs(f.sum() - n / 4) <= 1
    assert not (b.astype(bool) & f.astype(bool)).any()
    w = out.column("weight")
    assert np.allclose(out.column("ar_statistic"), w * out.column("statistic"))
    m = armia_metrics(out, 10)
    assert set(m) == {"auc", "eer", "tpr@1%fpr", "tpr@5%fpr", "tpr@10%fpr", "tpr@20%fpr"}
    # tiny lambda drives every weight to (near) zero
    g = out.column("grad_norm")
    assert np.tanh(1e-12 * g).max() < 1e-9


def test_determinism(tiny_model, tiny_ds, tiny_split, tmp_path):
    paths = []
    for k in range(2):
        out = run_armia_game(tiny_model, tiny_ds, tiny_split, "loss", FAST, RobustWeightConfig(10), seed=3,
                             cache=FabricationCache())
        paths.append(out.write_csv(tmp_path / f"r{k}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_csv_roundtrip_and_malformed(tiny_model, tiny_ds, tiny_split, tmp_path):
    out = run_mi_game(tiny_model, tiny_ds, tiny_split, "loss")
    p = out.write_csv(tmp_path / "mi.csv")
    back = read_records(p)
    assert sorted(r.sample_id for r in back) == sorted(r.sample_id for r in out.records)
    lines = p.read_text().splitlines()
    lines[4] = lines[4].replace(",1,0,", ",1,1,", 1) if ",1,0," in lines[4] else lines[4].replace(",0,0,", ",0,x,", 1)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(MalformedRecordError, match="row 5"):
        read_records(p)
    man = out.manifest(tiny_model, seed=0)
    assert man["model_checksum"] == tiny_model.checksum() and man["protocol"] == "mi"
