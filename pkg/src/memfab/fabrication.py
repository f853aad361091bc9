"""Confidence-ascent perturbations that turn nonmembers into apparent members.

All attacks run batched over many samples; per-sample randomness (the I-PGD start) is drawn
from a seed derived from (config.seed, sample id) so results do not depend on batch layout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledExample
from .model_core import ClassifierModel
from .seeding import derive_seed

VARIANTS = ("mfa", "i_fgsm", "i_bim", "i_pgd", "i_cw", "i_apgd")
BASELINES = VARIANTS[1:]
ADAPTIVE_MODES = ("keep_gradient", "shrink_gradient")


class UnknownVariantError(ValueError):
    pass


@dataclass
class FabricationConfig:
    epsilon: float = 4 / 255
    steps: int = 100
    alpha0: float | None = None  # defaults to epsilon / 4
    beta: float = 0.75
    variant: str = "mfa"
    adaptive_lambda: float = 0.0
    # "keep_gradient": ascend p_y + lam * ||grad||, an attacker resisting gradient-norm collapse;
    # "shrink_gradient": ascend p_y - lam * ||grad||
    adaptive_mode: str = "keep_gradient"
    seed: int = 0

    def __post_init__(self):
        if self.alpha0 is None:
            self.alpha0 = self.epsilon / 4
        self.validate()

    def validate(self) -> "FabricationConfig":
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not (self.alpha0 > 0 or (self.epsilon == 0 and self.alpha0 == 0)):
            raise ValueError("alpha0 must be positive")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.adaptive_lambda < 0:
            raise ValueError("adaptive_lambda must be nonnegative")
        if self.adaptive_mode not in ADAPTIVE_MODES:
            raise ValueError(f"adaptive_mode must be one of {ADAPTIVE_MODES}")
        if self.variant not in VARIANTS:
            raise UnknownVariantError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        return self


@dataclass
class FabricationResult:
    x_bar: torch.Tensor
    delta: torch.Tensor
    loss_trajectory: list[float]
    gradnorm_trajectory: list[float]
    iterations_run: int


@dataclass
class FabricationBatch:
    x_bar: torch.Tensor  # (n, C, H, W)
    x_orig: torch.Tensor
    loss_traj: np.ndarray  # (n, T) clamped CE at each visited iterate
    gradnorm_traj: np.ndarray  # (n, T) l2 input-gradient norm at each visited iterate
    iterations_run: int
    final_loss: np.ndarray = field(default=None)
    final_gradnorm: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.x_bar)

    def result(self, i: int) -> FabricationResult:
        return FabricationResult(
            self.x_bar[i],
            self.x_bar[i] - self.x_orig[i],
            self.loss_traj[i].tolist(),
            self.gradnorm_traj[i].tolist(),
            self.iterations_run,
        )


def cosine_step_size(k: int, N: int, alpha0: float) -> float:
    if not 0 <= k <= N:
        raise ValueError("k must lie in [0, N]")
    return alpha0 * (1 + math.cos(math.pi * k / N)) / 2


def project_linf(x_candidate: torch.Tensor, x_center: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp into the eps-box around x_center, then into [0, 1].

    Float rounding of `x_center +/- eps` can overshoot by one ulp; such coordinates are nudged
    back so that |x - x_center| <= eps holds exactly when evaluated in float64.
    """
    if x_candidate.shape != x_center.shape:
        raise ValueError(f"shape mismatch {tuple(x_candidate.shape)} vs {tuple(x_center.shape)}")
    out = torch.minimum(torch.maximum(x_candidate, x_center - epsilon), x_center + epsilon).clamp(0.0, 1.0)
    over = (out.double() - x_center.double()).abs() > epsilon
    while over.any():
        out = torch.where(over, torch.nextafter(out, x_center), out)
        over = (out.double() - x_center.double()).abs() > epsilon
    return out


def _grad_and_loss(model: ClassifierModel, x, y):
    g, loss = model.input_gradients(x, y)
    return g, loss.numpy(), g.flatten(1).norm(dim=1).double().numpy()


def _cw_grad(model: ClassifierModel, x, y):
    """Gradient of the negated CW margin -(z_y - max_{i != y} z_i)."""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        z = model.net(x)
        zy = z.gather(1, y[:, None]).squeeze(1)
        other = z.scatter(1, y[:, None], float("-inf")).max(1).values
        (g,) = torch.autograd.grad((other - zy).sum(), x)
    return g


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.view(-1, *([1] * (like.dim() - 1)))


class _Tracker:
    """Best-iterate bookkeeping: accept a new point only on strict loss improvement."""

    def __init__(self, x, loss):
        self.x = x.clone()
        self.loss = loss.copy()

    def update(self, x, loss):
        better = loss < self.loss
        if better.any():
            mask = _bcast(torch.from_numpy(better), x)
            self.x = torch.where(mask, x, self.x)
            self.loss = np.where(better, loss, self.loss)
        return better


def _random_start(x, eps, ids, seed):
    noise = torch.empty_like(x)
    for i, sid in enumerate(ids):
        gen = torch.Generator().manual_seed(derive_seed(seed, "pgd-start", sid))
        noise[i] = (torch.rand(x.shape[1:], generator=gen, dtype=x.dtype) * 2 - 1) * eps
    return project_linf(x + noise, x, eps)


def _run_signed(model, x, y, cfg, step_fn, direction_fn=None, start=None):
    """Shared loop: momentum buffer on the descent direction, signed step, projection."""
    n_steps, beta, eps = cfg.steps, cfg.beta, cfg.epsilon
    xk = x.clone() if start is None else start
    g, loss, gn = _grad_and_loss(model, xk, y)
    tracker = _Tracker(x, _grad_and_loss(model, x, y)[1] if start is not None else loss)
    tracker.update(xk, loss)
    losses, norms = [loss], [gn]
    m = torch.zeros_like(x)
    for k in range(n_steps):
        d = g if direction_fn is None else direction_fn(xk)
        m = beta * m + (1 - beta) * d
        xk = project_linf(xk - step_fn(k) * torch.sign(m), x, eps)
        g, loss, gn = _grad_and_loss(model, xk, y)
        tracker.update(xk, loss)
        losses.append(loss)
        norms.append(gn)
    return tracker.x, np.stack(losses, 1), np.stack(norms, 1), n_steps


def _run_apgd(model, x, y, cfg):
    """APGD-style schedule on CE descent: step 2*eps halved at checkpoints that stall."""
    n_steps, eps = cfg.steps, cfg.epsilon
    n = len(x)
    # checkpoints at fractions p_0=0, p_1=0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    checkpoints = sorted({math.ceil(q * n_steps) for q in p[1:] if math.ceil(q * n_steps) <= n_steps})
    rho, alpha = 0.75, 0.75
    eta = torch.full((n,), 2.0 * eps, dtype=x.dtype)

    g, loss0, gn = _grad_and_loss(model, x, y)
    tracker = _Tracker(x, loss0)
    losses, norms = [loss0], [gn]
    x_prev = x.clone()
    xk = project_linf(x - _bcast(eta, x) * torch.sign(g), x, eps)
    g, loss, gn = _grad_and_loss(model, xk, y)
    improved = loss < loss0
    n_success = improved.astype(int)
    tracker.update(xk, loss)
    losses.append(loss)
    norms.append(gn)
    last_cp, eta_reduced_last = 0, np.zeros(n, bool)
    best_at_last_cp = tracker.loss.copy()
    prev_loss = loss
    for k in range(1, n_steps):
        z = project_linf(xk - _bcast(eta, x) * torch.sign(g), x, eps)
        x_new = project_linf(xk + alpha * (z - xk) + (1 - alpha) * (xk - x_prev), x, eps)
        x_prev, xk = xk, x_new
        g, loss, gn = _grad_and_loss(model, xk, y)
        n_success += (loss < prev_loss).astype(int)
        prev_loss = loss
        tracker.update(xk, loss)
        losses.append(loss)
        norms.append(gn)
        if k + 1 in checkpoints:
            window = k + 1 - last_cp
            cond1 = n_success < rho * window
            cond2 = ~eta_reduced_last & (tracker.loss >= best_at_last_cp)
            halve = cond1 | cond2
            if halve.any():
                hmask = torch.from_numpy(halve)
                eta = torch.where(hmask, eta / 2, eta)
                xk = torch.where(_bcast(hmask, xk), tracker.x, xk)
                x_prev = torch.where(_bcast(hmask, xk), xk, x_prev)
                g, prev_loss, _ = _grad_and_loss(model, xk, y)
            eta_reduced_last = halve
            best_at_last_cp = tracker.loss.copy()
            n_success[:] = 0
            last_cp = k + 1
    return tracker.x, np.stack(losses, 1), np.stack(norms, 1), n_steps


def _penalty_gradient(model, x, y, backend="auto", h=1e-3):
    """Gradient of ||grad_x CE||_2 w.r.t. x via double backward, else a finite-difference HVP."""
    if backend in ("auto", "exact"):
        try:
            xr = x.detach().requires_grad_(True)
            with torch.enable_grad():
                loss = F.cross_entropy(model.net(xr), y, reduction="sum")
                (g,) = torch.autograd.grad(loss, xr, create_graph=True)
                norms = g.flatten(1).norm(dim=1)
                (hg,) = torch.autograd.grad(norms.sum(), xr)
            return hg.detach(), g.detach()
        except RuntimeError:
            if backend == "exact":
                raise
    g, _ = model.input_gradients(x, y)
    u = g / _bcast(g.flatten(1).norm(dim=1).clamp_min(1e-12), g)
    gp, _ = model.input_gradients(x + h * u, y)
    gm, _ = model.input_gradients(x - h * u, y)
    return (gp - gm) / (2 * h), g


def _adaptive_objective(model, x, y, lam):
    g, loss = model.input_gradients(x, y)
    py = torch.exp(-loss).numpy()
    gn = g.flatten(1).norm(dim=1).double().numpy()
    return py + lam * gn, loss.numpy(), gn


def _run_adaptive(model, x, y, cfg, backend="auto"):
    """Ascend p_y + lam * ||grad CE|| (lam negated in shrink mode); best iterate by this objective."""
    n_steps, beta, eps = cfg.steps, cfg.beta, cfg.epsilon
    lam = cfg.adaptive_lambda if cfg.adaptive_mode == "keep_gradient" else -cfg.adaptive_lambda
    xk = x.clone()
    obj, loss, gn = _adaptive_objective(model, xk, y, lam)
    best_x, best_obj = xk.clone(), obj.copy()
    losses, norms = [loss], [gn]
    m = torch.zeros_like(x)
    for k in range(n_steps):
        with torch.enable_grad():
            xr = xk.detach().requires_grad_(True)
            py = torch.softmax(model.net(xr), dim=1).gather(1, y[:, None]).sum()
            (gp,) = torch.autograd.grad(py, xr)
        if lam:
            hg, _ = _penalty_gradient(model, xk, y, backend)
            grad_obj = gp + lam * hg
        else:
            grad_obj = gp
        m = beta * m + (1 - beta) * (-grad_obj)
        xk = project_linf(xk - cosine_step_size(k, n_steps, cfg.alpha0) * torch.sign(m), x, eps)
        obj, loss, gn = _adaptive_objective(model, xk, y, lam)
        better = obj > best_obj
        if better.any():
            best_x = torch.where(_bcast(torch.from_numpy(better), xk), xk, best_x)
            best_obj = np.where(better, obj, best_obj)
        losses.append(loss)
        norms.append(gn)
    return best_x, np.stack(losses, 1), np.stack(norms, 1), n_steps


def fabricate(
    model: ClassifierModel,
    x: torch.Tensor,
    y: torch.Tensor,
    config: FabricationConfig,
    ids: Sequence[str] | None = None,
    batch_size: int = 500,
    backend: str = "auto",
) -> FabricationBatch:
    """Run the configured variant on a batch of images (N, C, H, W) with labels (N,)."""
    config.validate()
    x = x.to(model.dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    y = torch.as_tensor(y).reshape(-1)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(x))]
    parts = []
    for s in range(0, len(x), batch_size):
        xb, yb, ib = x[s : s + batch_size], y[s : s + batch_size], ids[s : s + batch_size]
        parts.append(_fabricate_chunk(model, xb, yb, config, ib, backend))
    x_bar = torch.cat([p[0] for p in parts])
    g, fl = model.input_gradients(x_bar, y)
    return FabricationBatch(
        x_bar=x_bar,
        x_orig=x,
        loss_traj=np.concatenate([p[1] for p in parts]),
        gradnorm_traj=np.concatenate([p[2] for p in parts]),
        iterations_run=parts[0][3] if parts else 0,
        final_loss=fl.numpy(),
        final_gradnorm=g.flatten(1).norm(dim=1).double().numpy(),
    )


def _fabricate_chunk(model, x, y, cfg, ids, backend):
    v = cfg.variant
    eps, n_steps = cfg.epsilon, cfg.steps
    if v == "mfa":
        if cfg.adaptive_lambda > 0:
            return _run_adaptive(model, x, y, cfg, backend)
        return _run_signed(model, x, y, cfg, lambda k: cosine_step_size(k, n_steps, cfg.alpha0))
    if v == "i_fgsm":
        g, loss0, gn0 = _grad_and_loss(model, x, y)
        x1 = project_linf(x - eps * torch.sign(g), x, eps)
        _, loss1, gn1 = _grad_and_loss(model, x1, y)
        tracker = _Tracker(x, loss0)
        tracker.update(x1, loss1)
        return tracker.x, np.stack([loss0, loss1], 1), np.stack([gn0, gn1], 1), 1
    fixed = replace_beta(cfg, 0.0)
    if v == "i_bim":
        return _run_signed(model, x, y, fixed, lambda k: cfg.alpha0)
    if v == "i_pgd":
        start = _random_start(x, eps, ids, cfg.seed)
        return _run_signed(model, x, y, fixed, lambda k: cfg.alpha0, start=start)
    if v == "i_cw":
        return _run_signed(model, x, y, fixed, lambda k: cfg.alpha0, direction_fn=lambda xk: _cw_grad(model, xk, y))
    if v == "i_apgd":
        return _run_apgd(model, x, y, cfg)
    raise UnknownVariantError(v)


def replace_beta(cfg: FabricationConfig, beta: float) -> FabricationConfig:
    return FabricationConfig(**{**asdict(cfg), "beta": beta})


# ---------------------------------------------------------------------------
# per-sample entry points
# ---------------------------------------------------------------------------


def _single(model, example: LabeledExample, config, **kw) -> FabricationResult:
    batch = fabricate(model, example.x[None], torch.tensor([example.y]), config, ids=[example.id], **kw)
    return batch.result(0)


def mfa_fabricate(model: ClassifierModel, example: LabeledExample, config: FabricationConfig) -> FabricationResult:
    if config.variant != "mfa":
        raise UnknownVariantError("mfa_fabricate requires variant='mfa'")
    if config.adaptive_lambda:
        config = FabricationConfig(**{**asdict(config), "adaptive_lambda": 0.0})
    return _single(model, example, config)


def fabricate_baseline(model: ClassifierModel, example: LabeledExample, config: FabricationConfig) -> FabricationResult:
    if config.variant not in BASELINES:
        raise UnknownVariantError(f"baseline variant must be one of {BASELINES}, got {config.variant!r}")
    return _single(model, example, config)


def adaptive_mfa(
    model: ClassifierModel, example: LabeledExample, config: FabricationConfig, backend: str = "auto"
) -> FabricationResult:
    cfg = FabricationConfig(**{**asdict(config), "variant": "mfa"})
    if cfg.adaptive_lambda == 0:
        # the penalty vanishes: plain confidence ascent through the adaptive loop
        x, y = example.x[None].to(model.dtype), torch.tensor([example.y])
        xb, lt, gt, it = _run_adaptive(model, x, y, cfg, backend)
        return FabricationResult(xb[0], xb[0] - x[0], lt[0].tolist(), gt[0].tolist(), it)
    return _single(model, example, cfg, backend=backend)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_fabricated(
    batch: FabricationBatch, ids: Sequence[str], y, config: FabricationConfig, directory: str | Path, tag: str
) -> tuple[Path, Path]:
    """Write `<tag>.npz` (ids, x_bar, y) and `<tag>.csv` manifest rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arc = directory / f"{tag}.npz"
    np.savez_compressed(arc, ids=np.array(list(ids)), x=batch.x_bar.float().numpy(), y=np.asarray(y))
    man = directory / f"{tag}.csv"
    with man.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "variant", "epsilon", "steps", "final_loss", "final_gradnorm"])
        for sid, fl, fg in zip(ids, batch.final_loss, batch.final_gradnorm):
            w.writerow([sid, config.variant, repr(config.epsilon), config.steps, repr(float(fl)), repr(float(fg))])
    return arc, man


def load_fabricated(path: str | Path) -> tuple[list[str], torch.Tensor, torch.Tensor]:
    with np.load(path, allow_pickle=False) as z:
        return [str(s) for s in z["ids"]], torch.from_numpy(z["x"]), torch.from_numpy(z["y"]).long()
