"""Input-gradient norms (exact and query-only), feature-space detectors, and the
quadratic-model check that a signed descent step shrinks the gradient norm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors

from .data import ExampleSet, LabeledExample
from .model_core import ClassifierModel
from .seeding import derive_seed

DIST_FLOOR = 1e-12
EXPLICIT_HESSIAN_MAX_DIM = 4096


class ZeroCurvatureError(ValueError):
    pass


class SingularCovarianceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# gradient norms
# ---------------------------------------------------------------------------


def grad_norms(model: ClassifierModel, x, y) -> np.ndarray:
    g, _ = model.input_gradients(x, y)
    return g.flatten(1).norm(dim=1).double().numpy()


def grad_norm(model: ClassifierModel, example: LabeledExample) -> float:
    return float(grad_norms(model, example.x, torch.tensor([example.y]))[0])


@dataclass(frozen=True)
class FDConfig:
    n_directions: int = 100
    h: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_directions < 1:
            raise ValueError("n_directions must be >= 1")
        if not self.h > 0:
            raise ValueError("h must be positive")


def _directions(d: int, n: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    u = torch.randn(n, d, generator=gen, dtype=torch.float64)
    return u / u.norm(dim=1, keepdim=True)


def fd_from_loss_fn(loss_fn, x: torch.Tensor, config: FDConfig, seed: int | None = None) -> torch.Tensor:
    """Symmetric finite-difference gradient estimate of a scalar field at one point.

    Averages [(l(x+hu) - l(x-hu)) / 2h] u over unit directions and scales by the dimension d,
    since E[u u^T] = I/d for uniform unit vectors; the estimate is then unbiased for linear fields.
    `loss_fn` maps a (B, *x.shape) float64 batch to B losses.
    """
    d = x.numel()
    u = _directions(d, config.n_directions, config.seed if seed is None else seed)
    xs = x.reshape(1, d).double()
    plus = loss_fn((xs + config.h * u).reshape(-1, *x.shape))
    minus = loss_fn((xs - config.h * u).reshape(-1, *x.shape))
    coef = (plus - minus) / (2 * config.h)
    return (d * (coef[:, None] * u).mean(0)).reshape(x.shape)


def fd_grad_estimates(
    model: ClassifierModel,
    x: torch.Tensor,
    y,
    config: FDConfig,
    ids: Sequence[str] | None = None,
    max_batch: int = 8192,
) -> tuple[torch.Tensor, np.ndarray]:
    """Query-only gradient estimates for a batch; the loss oracle is evaluated in float64.

    Each sample's directions come from a seed derived from (config.seed, sample id).
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    y = torch.as_tensor(y).reshape(-1)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(x))]
    oracle = model if model.dtype == torch.float64 else model.to(torch.float64)
    out = torch.empty(x.shape, dtype=torch.float64)
    for i in range(len(x)):
        yi = y[i]

        def loss_fn(batch):
            vals = [oracle.losses(b, yi.expand(len(b))) for b in batch.split(max_batch)]
            return torch.cat(vals)

        out[i] = fd_from_loss_fn(loss_fn, x[i], config, derive_seed(config.seed, "fd", ids[i]))
    return out, out.flatten(1).norm(dim=1).numpy()


def fd_grad_estimate(model: ClassifierModel, example: LabeledExample, config: FDConfig) -> tuple[torch.Tensor, float]:
    g, n = fd_grad_estimates(model, example.x, [example.y], config, ids=[example.id])
    return g[0], float(n[0])


# ---------------------------------------------------------------------------
# feature-space baselines
# ---------------------------------------------------------------------------


@dataclass
class FeatureStats:
    layer_id: str
    class_means: np.ndarray  # (C, D)
    shared_covariance: np.ndarray  # (D, D), regularized
    knn_reference: np.ndarray  # (n, D)

    def __post_init__(self):
        self.shared_covariance = (self.shared_covariance + self.shared_covariance.T) / 2
        self.precision = np.linalg.inv(self.shared_covariance)
        self._nn = None

    def neighbors(self) -> NearestNeighbors:
        if self._nn is None:
            self._nn = NearestNeighbors().fit(self.knn_reference)
        return self._nn


def fit_feature_stats_arrays(
    feats: np.ndarray, labels: np.ndarray, n_classes: int, layer_id: str = "penultimate", regularize: bool = True
) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    dim = feats.shape[1]
    means = np.zeros((n_classes, dim))
    centered = np.empty_like(feats)
    for c in range(n_classes):
        sel = labels == c
        if sel.any():
            means[c] = feats[sel].mean(0)
            centered[sel] = feats[sel] - means[c]
    cov = centered.T @ centered / len(feats)
    if regularize:
        cov = cov + 1e-3 * np.trace(cov) / dim * np.eye(dim)
    elif np.linalg.matrix_rank(cov) < dim:
        raise SingularCovarianceError("shared covariance is rank-deficient; enable regularization")
    return FeatureStats(layer_id, means, cov, feats)


def fit_feature_stats(
    model: ClassifierModel,
    members: ExampleSet | Sequence[LabeledExample],
    layer_id: str = "penultimate",
    regularize: bool = True,
) -> FeatureStats:
    """Class means, shared covariance and a k-NN reference set of penultimate features."""
    if not isinstance(members, ExampleSet):
        members = ExampleSet.from_examples(list(members), model.n_classes)
    if len(members) < 2 * model.n_classes:
        raise ValueError(f"need at least {2 * model.n_classes} member samples")
    feats = model.features(members.x).double().numpy()
    return fit_feature_stats_arrays(feats, members.y.numpy(), model.n_classes, layer_id, regularize)


def mahalanobis_from_features(stats: FeatureStats, feats: np.ndarray) -> np.ndarray:
    """min_c (f - mu_c)^T Sigma^{-1} (f - mu_c) for each row of feats."""
    diff = np.asarray(feats, dtype=np.float64)[:, None, :] - stats.class_means[None]
    d2 = np.einsum("ncd,de,nce->nc", diff, stats.precision, diff)
    return d2.min(1)


def mahalanobis_score(stats: FeatureStats, model: ClassifierModel, example: LabeledExample) -> float:
    return float(mahalanobis_from_features(stats, model.features(example.x).double().numpy())[0])


def lid_from_distances(r: np.ndarray) -> np.ndarray:
    """MLE intrinsic dimension from sorted neighbor distances (rows); distances floored at 1e-12.

    When all k distances coincide the log-ratio sum is 0; it is floored too, giving a large
    finite value instead of an infinity.
    """
    r = np.maximum(np.asarray(r, dtype=np.float64), DIST_FLOOR)
    s = np.log(r / r[:, -1:]).mean(1)
    return -1.0 / np.minimum(s, -DIST_FLOOR)


def lid_from_features(stats: FeatureStats, feats: np.ndarray, k: int = 20, skip_self: bool = False) -> np.ndarray:
    """LID of each query against the reference set; `skip_self` drops zero-distance matches
    (a query that is itself a reference point)."""
    ref_n = len(stats.knn_reference)
    if ref_n <= k:
        raise ValueError(f"reference set ({ref_n}) must exceed k={k}")
    kk = k + 1 if skip_self else k
    dist, _ = stats.neighbors().kneighbors(np.asarray(feats, dtype=np.float64), n_neighbors=kk)
    if skip_self:
        dist = np.array([row[row > 0][:k] if (row > 0).sum() >= k else row[1:] for row in dist])
    return lid_from_distances(dist)


def lid_score(stats: FeatureStats, model: ClassifierModel, example: LabeledExample, k: int = 20) -> float:
    return float(lid_from_features(stats, model.features(example.x).double().numpy(), k)[0])


# ---------------------------------------------------------------------------
# second-order check
# ---------------------------------------------------------------------------


@dataclass
class TaylorProbe:
    g: torch.Tensor  # (d,)
    H: torch.Tensor  # (d, d)

    def __post_init__(self):
        self.g = torch.as_tensor(self.g, dtype=torch.float64).reshape(-1)
        H = torch.as_tensor(self.H, dtype=torch.float64)
        if (H - H.T).abs().max() > 1e-8:
            H = (H + H.T) / 2
        self.H = H

    @classmethod
    def from_model(cls, model: ClassifierModel, example: LabeledExample) -> "TaylorProbe":
        """Exact gradient and Hessian of the CE loss w.r.t. the flattened input (float64)."""
        d = example.x.numel()
        if d > EXPLICIT_HESSIAN_MAX_DIM:
            raise ValueError(f"explicit Hessian limited to {EXPLICIT_HESSIAN_MAX_DIM} input dims, got {d}")
        m64 = model if model.dtype == torch.float64 else model.to(torch.float64)
        shape = example.x.shape
        y = torch.tensor([example.y])

        def f(v):
            z = m64.net(v.reshape(1, *shape))
            return torch.nn.functional.cross_entropy(z, y)

        x0 = example.x.double().reshape(-1)
        with torch.enable_grad():
            H = torch.autograd.functional.hessian(f, x0)
            xr = x0.clone().requires_grad_(True)
            (g,) = torch.autograd.grad(f(xr), xr)
        return cls(g.detach(), H.detach())

    def hvp(self, v: torch.Tensor) -> torch.Tensor:
        return self.H @ v


def taylor_step_bound(probe: TaylorProbe) -> float:
    """alpha* = 2 g^T H sign(g) / (sign(g)^T H^2 sign(g)); sign(0) = 0."""
    s = torch.sign(probe.g)
    hs = probe.hvp(s)
    den = float(hs @ hs)
    if den <= 1e-12:
        raise ZeroCurvatureError("sign(g)^T H^2 sign(g) vanishes")
    return float(2 * (probe.g @ hs) / den)


def verify_gradient_decrease(probe: TaylorProbe, alpha: float) -> tuple[float, float]:
    """(||g||, ||g - alpha H sign(g)||): gradient norm before and after one signed step
    under the local quadratic model."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    after = probe.g - alpha * probe.hvp(torch.sign(probe.g))
    return float(probe.g.norm()), float(after.norm())
