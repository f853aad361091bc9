import math

import numpy as np
import pytest
import torch

from memfab.data import LabeledExample
from memfab.geometry import (
    FDConfig,
    FeatureStats,
    SingularCovarianceError,
    TaylorProbe,
    ZeroCurvatureError,
    fd_from_loss_fn,
    fd_grad_estimate,
    fd_grad_estimates,
    fit_feature_stats,
    fit_feature_stats_arrays,
    grad_norm,
    lid_from_distances,
    lid_from_features,
    mahalanobis_from_features,
    mahalanobis_score,
    taylor_step_bound,
    verify_gradient_decrease,
)
from memfab.model_core import ClassifierModel, build_network, input_gradient


def test_grad_norm_examples(constant_model, logistic):
    assert grad_norm(constant_model([1.0, 2.0]), LabeledExample("a", torch.rand(1, 2, 2), 0)) == 0.0
    for w in (0.5, -3.0):
        m = logistic(w, 0.0)
        e = LabeledExample("a", torch.zeros(1, 1, 1, dtype=torch.float64), 1)  # p = 1/2
        assert grad_norm(m, e) == pytest.approx(abs(w) / 2, abs=1e-12)


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FDConfig(n_directions=0)
    with pytest.raises(ValueError):
        FDConfig(h=0.0)
    FDConfig(n_directions=100, h=1e-3)


def test_fd_linear_field():
    d = 16
    a = torch.linspace(-1, 2, d, dtype=torch.float64)
    est = [fd_from_loss_fn(lambda b: b.reshape(len(b), -1) @ a, torch.zeros(d), FDConfig(512, seed=s)) for s in range(10)]
    mean = torch.stack(est).mean(0)
    assert float((mean - a).norm() / a.norm()) < 0.05


def _quadratic_cos(d, n, seeds=range(20)):
    rng = np.random.default_rng(0)
    A = rng.normal(size=(d, d))
    A = torch.tensor(A @ A.T / d)
    x0 = torch.tensor(rng.normal(size=d))
    truth = A @ x0
    f = lambda b: 0.5 * torch.einsum("bi,ij,bj->b", b, A, b)
    cos = [float(torch.nn.functional.cosine_similarity(fd_from_loss_fn(f, x0, FDConfig(n, seed=s)), truth, dim=0))
           for s in seeds]
    return float(np.mean(cos))


def test_fd_quadratic_cosine_follows_direction_count():
    # for random unit directions the expected cosine is about sqrt(N / (N + d))
    d = 64
    for n in (d // 4, d, 4 * d):
        assert abs(_quadratic_cos(d, n) - math.sqrt(n / (n + d))) < 0.08
    assert _quadratic_cos(d, 4 * d) > 0.7


def test_fd_error_shrinks_with_directions():
    d = 32
    a = torch.linspace(-1, 1, d, dtype=torch.float64)
    errs = []
    for n in (16, 64, 256, 1024):
        e = [float((fd_from_loss_fn(lambda b: torch.sin(b.reshape(len(b), -1) @ a), torch.zeros(d), FDConfig(n, seed=s))
                    - a).norm()) for s in range(10)]
        errs.append(np.median(e))
    assert all(x > y for x, y in zip(errs, errs[1:]))


def test_fd_on_model_matches_exact(logistic, tiny_ds):
    m = logistic(2.0, -0.3)
    e = LabeledExample("a", torch.tensor([[[0.4]]], dtype=torch.float64), 1)
    g, n = fd_grad_estimate(m, e, FDConfig(8))
    assert float(g.flatten()[0]) == pytest.approx(float(input_gradient(m, e).flatten()[0]), rel=1e-5)
    torch.manual_seed(0)
    net = build_network("mlp", tiny_ds.input_shape, tiny_ds.n_classes)
    mlp = ClassifierModel(net, tiny_ds.n_classes, "mlp", tiny_ds.input_shape)
    x, y = tiny_ds.x[:4], tiny_ds.y[:4]
    d = x[0].numel()
    est, norms = fd_grad_estimates(mlp, x, y, FDConfig(4 * d), ids=tiny_ds.ids[:4])
    exact, _ = mlp.to(torch.float64).input_gradients(x.double(), y)
    cos = torch.nn.functional.cosine_similarity(est.flatten(1), exact.flatten(1))
    assert (cos > 0.7).all()
    again, _ = fd_grad_estimates(mlp, x, y, FDConfig(4 * d), ids=tiny_ds.ids[:4])
    assert torch.equal(est, again)


# --- feature baselines ------------------------------------------------------


def test_mahalanobis_at_means():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(60, 3))
    labels = np.repeat([0, 1, 2], 20)
    st = fit_feature_stats_arrays(feats, labels, 3)
    assert np.allclose(mahalanobis_from_features(st, st.class_means), 0.0, atol=1e-12)


def test_mahalanobis_scalar_example():
    st = FeatureStats("f", np.array([[0.0]]), np.array([[4.0]]), np.zeros((3, 1)))
    assert mahalanobis_from_features(st, np.array([[2.0]]))[0] == pytest.approx(1.0)


def test_identity_covariance_is_euclidean(rng):
    means = rng.normal(size=(4, 5))
    st = FeatureStats("f", means, np.eye(5), np.zeros((3, 5)))
    q = rng.normal(size=(50, 5))
    ref = ((q[:, None] - means[None]) ** 2).sum(-1).min(1)
    assert np.allclose(mahalanobis_from_features(st, q), ref, atol=1e-9)


def test_covariance_within_sampling_error():
    rng = np.random.default_rng(1)
    sigma = np.array([[1.0, 0.3, 0.0], [0.3, 0.5, 0.1], [0.0, 0.1, 0.8]])
    n = 2000
    feats = np.concatenate([rng.multivariate_normal([0, 0, 0], sigma, n), rng.multivariate_normal([2, 1, 0], sigma, n)])
    labels = np.repeat([0, 1], n)
    st = fit_feature_stats_arrays(feats, labels, 2, regularize=False)
    var = (np.outer(np.diag(sigma), np.diag(sigma)) + sigma**2) / (2 * n)
    assert np.linalg.norm(st.shared_covariance - sigma) < 3 * math.sqrt(var.sum())


def test_singular_covariance():
    feats = np.c_[np.arange(10.0), np.zeros(10)]
    with pytest.raises(SingularCovarianceError):
        fit_feature_stats_arrays(feats, np.zeros(10, int), 1, regularize=False)
    fit_feature_stats_arrays(feats, np.zeros(10, int), 1)  # regularized fit stays invertible


def test_lid_line():
    rng = np.random.default_rng(0)
    v = np.array([1.0, 2.0, -0.5])
    ref = rng.random((3000, 1)) * v
    st = FeatureStats("f", np.zeros((1, 3)), np.eye(3), ref)
    q = rng.uniform(0.2, 0.8, (100, 1)) * v
    assert abs(np.mean(lid_from_features(st, q, k=20)) - 1) < 0.2


def test_lid_five_ball():
    rng = np.random.default_rng(0)

    def ball(n, r=1.0):
        u = rng.normal(size=(n, 5))
        return r * u / np.linalg.norm(u, axis=1, keepdims=True) * rng.random((n, 1)) ** (1 / 5)

    st = FeatureStats("f", np.zeros((1, 5)), np.eye(5), ball(5000))
    est = np.mean(lid_from_features(st, ball(200, 0.5), k=20))
    assert abs(est - 5) < 0.25 * 5


def test_lid_equal_distances_finite():
    v = lid_from_distances(np.array([[1.0, 1.0]]))
    assert np.isfinite(v).all() and v[0] > 1e6


def test_feature_scores_on_model(tiny_model, tiny_ds, tiny_split):
    members = tiny_ds.subset(tiny_split.train_members)
    st = fit_feature_stats(tiny_model, members)
    e = tiny_ds[tiny_split.eval_nonmembers[0]]
    assert np.isfinite(mahalanobis_score(st, tiny_model, e))
    assert np.all(np.diff(sorted(lid_from_features(st, tiny_model.features(members.x[:5]).numpy(), skip_self=True))) >= 0)


# --- second-order check -----------------------------------------------------


def test_step_bound_examples():
    g = torch.tensor([0.5, -2.0, 1.0, 0.25])
    assert taylor_step_bound(TaylorProbe(g, torch.eye(4))) == pytest.approx(2 * g.abs().sum().item() / 4)
    assert taylor_step_bound(TaylorProbe(torch.tensor([1.0, 0.0]), torch.diag(torch.tensor([2.0, 1.0])))) == 1.0
    assert taylor_step_bound(TaylorProbe(torch.tensor([1.0, 2.0]), -torch.eye(2))) < 0
    with pytest.raises(ZeroCurvatureError):
        taylor_step_bound(TaylorProbe(torch.tensor([1.0, 2.0]), torch.zeros(2, 2)))


def test_decrease_examples():
    p = TaylorProbe(torch.tensor([3.0, 4.0]), torch.eye(2))
    assert taylor_step_bound(p) == pytest.approx(7.0)
    before, after = verify_gradient_decrease(p, 0.0)
    assert before == after == 5.0
    before, after = verify_gradient_decrease(p, 1.0)
    assert (before, after) == (5.0, pytest.approx(math.sqrt(13)))


def test_decrease_random_psd():
    rng = np.random.default_rng(0)
    positive = 0
    for _ in range(100):
        d = int(rng.integers(2, 12))
        A = rng.normal(size=(d, d))
        p = TaylorProbe(torch.tensor(rng.normal(size=d)), torch.tensor(A @ A.T))
        a_star = taylor_step_bound(p)
        if a_star <= 0:
            continue  # no guaranteed decrease for this probe
        positive += 1
        before, after = verify_gradient_decrease(p, 0.5 * a_star)
        assert after < before + 1e-8
    assert positive >= 50


def test_probe_from_model():
    torch.manual_seed(0)
    shape = (1, 4, 4)
    m = ClassifierModel(build_network("mlp", shape, 3, hidden=8), 3, "mlp", shape)
    e = LabeledExample("a", torch.rand(shape), 2)
    p = TaylorProbe.from_model(m, e)
    assert p.H.shape == (16, 16) and torch.allclose(p.H, p.H.T)
    exact = input_gradient(m.to(torch.float64), LabeledExample("a", e.x.double(), 2)).flatten()
    assert torch.allclose(p.g, exact, atol=1e-12)
