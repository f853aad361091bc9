"""Membership-inference statistics, all oriented so that larger means more member-like."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import LabeledExample
from .model_core import P_FLOOR, ClassifierModel, ShadowEnsemble

PHI_CLAMP = math.log((1 - P_FLOOR) / P_FLOOR)
SIGMA_FLOOR = 1e-3
MIN_PER_SAMPLE_FIT = 4


class InsufficientModelsError(ValueError):
    pass


class EmptyReferenceError(ValueError):
    pass


class StatisticKind(str, enum.Enum):
    loss = "loss"
    attack_r = "attack_r"
    lira = "lira"
    rmia = "rmia"


@dataclass(frozen=True)
class ThresholdRule:
    tau: float
    direction: str = "greater"

    def __post_init__(self):
        if self.direction != "greater":
            raise ValueError("only the 'greater' orientation is supported")


def decide_membership(statistic, rule: ThresholdRule):
    """1 iff statistic > tau (strict). Works elementwise on arrays."""
    if np.ndim(statistic):
        return (np.asarray(statistic) > rule.tau).astype(int)
    return int(statistic > rule.tau)


# ---------------------------------------------------------------------------
# per-model scores
# ---------------------------------------------------------------------------


def logit_scale(p):
    """phi(p) = log(p / (1 - p)) with p clamped into [1e-12, 1 - 1e-12]."""
    q = np.clip(np.asarray(p, dtype=np.float64), P_FLOOR, 1 - P_FLOOR)
    out = np.log(q) - np.log1p(-q)
    return float(out) if out.ndim == 0 else out


def _xy(x, y):
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x, torch.as_tensor(y).reshape(-1)


def phi_scores(model: ClassifierModel, x, y) -> np.ndarray:
    """Batched phi(p_y) from logits: z_y - logsumexp_{j != y} z_j, identical to the logit of p_y
    but without rounding p_y to 1 first. Clamped to the same range as `logit_scale`."""
    x, y = _xy(x, y)
    z = model.logits(x).double()
    zy = z.gather(1, y[:, None]).squeeze(1)
    others = z.scatter(1, y[:, None], float("-inf"))
    phi = zy - torch.logsumexp(others, dim=1)
    return phi.clamp(-PHI_CLAMP, PHI_CLAMP).numpy()


def loss_scores(model: ClassifierModel, x, y) -> np.ndarray:
    x, y = _xy(x, y)
    return -model.losses(x, y).numpy()


def loss_statistic(model: ClassifierModel, example: LabeledExample) -> float:
    """log p_y(x), i.e. the negated clamped cross-entropy."""
    return float(loss_scores(model, example.x, [example.y])[0])


# ---------------------------------------------------------------------------
# LiRA
# ---------------------------------------------------------------------------


@dataclass
class LiRAGaussians:
    mu_in: float
    mu_out: float
    sigma_in: float
    sigma_out: float
    per_sample: bool = True

    def __post_init__(self):
        self.sigma_in = max(float(self.sigma_in), SIGMA_FLOOR)
        self.sigma_out = max(float(self.sigma_out), SIGMA_FLOOR)


def fit_lira_arrays(phi: np.ndarray, member: np.ndarray, strict: bool = True) -> tuple[np.ndarray, ...]:
    """Vectorized Gaussian fit for many queries.

    phi, member: (n_models, n_queries). Returns (mu_in, mu_out, sigma_in, sigma_out, per_sample).
    Sides with fewer than four models use the global residual std of that side. With
    `strict=False`, a query may have fewer than two models on a side: one model gives its value
    as the mean, and an empty side is placed at the other side's mean shifted by the average
    IN-OUT offset of the fully fitted queries.
    """
    phi = np.asarray(phi, dtype=np.float64)
    member = np.asarray(member, dtype=bool)
    n_in, n_out = member.sum(0), (~member).sum(0)
    if strict and ((n_in < 2).any() or (n_out < 2).any()):
        raise InsufficientModelsError("every query needs at least 2 IN and 2 OUT reference models")

    def side(mask, n):
        mu = np.where(mask, phi, 0).sum(0) / np.maximum(n, 1)
        resid = np.where(mask, phi - mu, 0)
        ok = n >= 2
        sd = np.sqrt((resid**2).sum(0) / np.maximum(n - 1, 1))
        dof = (n - 1)[ok].sum()
        glob = np.sqrt((resid[:, ok] ** 2).sum() / dof) if dof > 0 else SIGMA_FLOOR
        return mu, np.where(n < MIN_PER_SAMPLE_FIT, glob, sd)

    mu_in, sd_in = side(member, n_in)
    mu_out, sd_out = side(~member, n_out)
    both = (n_in >= 1) & (n_out >= 1)
    if not both.all():
        offset = float((mu_in - mu_out)[both].mean()) if both.any() else 0.0
        mu_in = np.where(n_in == 0, mu_out + offset, mu_in)
        mu_out = np.where(n_out == 0, mu_in - offset, mu_out)
    per_sample = (n_in >= MIN_PER_SAMPLE_FIT) & (n_out >= MIN_PER_SAMPLE_FIT)
    return mu_in, mu_out, np.maximum(sd_in, SIGMA_FLOOR), np.maximum(sd_out, SIGMA_FLOOR), per_sample


def fit_lira(ensemble: ShadowEnsemble, example: LabeledExample, sample_id: str | None = None) -> LiRAGaussians:
    sid = sample_id or example.id
    phi = np.array([phi_scores(m, example.x, [example.y])[0] for m in ensemble.models])[:, None]
    member = ensemble.membership([sid])
    mu_in, mu_out, s_in, s_out, ps = fit_lira_arrays(phi, member)
    return LiRAGaussians(mu_in[0], mu_out[0], s_in[0], s_out[0], bool(ps[0]))


def _log_normal(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - np.log(sd)


def lira_statistic(g: LiRAGaussians | tuple, phi_target):
    """log N(phi; mu_in, sigma_in) - log N(phi; mu_out, sigma_out)."""
    if isinstance(g, LiRAGaussians):
        mu_in, mu_out, s_in, s_out = g.mu_in, g.mu_out, g.sigma_in, g.sigma_out
    else:
        mu_in, mu_out, s_in, s_out = g[:4]
    out = _log_normal(phi_target, mu_in, s_in) - _log_normal(phi_target, mu_out, s_out)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# reference-calibrated statistics
# ---------------------------------------------------------------------------


def attack_r_statistic(out_models: Sequence[ClassifierModel], example: LabeledExample, target: ClassifierModel) -> float:
    """Fraction of OUT reference models whose phi(p_y) is strictly below the target's."""
    if not out_models:
        raise EmptyReferenceError("Attack R needs at least one OUT reference model")
    t = phi_scores(target, example.x, [example.y])[0]
    refs = np.array([phi_scores(m, example.x, [example.y])[0] for m in out_models])
    return float((refs < t).mean())


def attack_r_from_arrays(
    phi_target: np.ndarray, phi_refs: np.ndarray, out_mask: np.ndarray, strict: bool = True
) -> np.ndarray:
    """Batched Attack R. With `strict=False` a query without OUT models is ranked against all
    reference models instead of raising."""
    out_mask = np.asarray(out_mask, dtype=bool)
    n_out = out_mask.sum(0)
    if (n_out < 1).any():
        if strict:
            raise EmptyReferenceError("a query has no OUT reference model")
        out_mask = np.where(n_out < 1, True, out_mask)
        n_out = out_mask.sum(0)
    return ((phi_refs < phi_target[None]) & out_mask).sum(0) / n_out


def rmia_from_probs(p_target_x, p_ref_x, p_target_z, p_ref_z, gamma: float = 1.0) -> np.ndarray:
    """Pairwise likelihood-ratio test: fraction of population z with LR(x)/LR(z) > gamma.

    p_ref_* are reference-model means of p_y; LR(u) = p_target(u) / p_ref(u).
    """
    if len(p_target_z) == 0:
        raise EmptyReferenceError("RMIA needs a nonempty population")
    lr_x = np.maximum(np.asarray(p_target_x, float), P_FLOOR) / np.maximum(np.asarray(p_ref_x, float), P_FLOOR)
    lr_z = np.maximum(np.asarray(p_target_z, float), P_FLOOR) / np.maximum(np.asarray(p_ref_z, float), P_FLOOR)
    lr_z = np.sort(lr_z)
    # LR(x)/LR(z) > gamma  <=>  LR(z) < LR(x)/gamma
    return np.searchsorted(lr_z, np.atleast_1d(lr_x) / gamma, side="left") / len(lr_z)


def _py(model: ClassifierModel, x, y) -> np.ndarray:
    x, y = _xy(x, y)
    return model.probabilities(x).gather(1, y[:, None]).squeeze(1).numpy()


def rmia_statistic(
    ensemble: ShadowEnsemble,
    population_z: Sequence[LabeledExample],
    example: LabeledExample,
    target: ClassifierModel,
    gamma: float = 1.0,
) -> float:
    if not population_z:
        raise EmptyReferenceError("RMIA needs a nonempty population")
    if len(ensemble) == 0:
        raise EmptyReferenceError("RMIA needs at least one reference model")
    zx = torch.stack([z.x for z in population_z])
    zy = torch.tensor([z.y for z in population_z])
    ref_x = np.mean([_py(m, example.x, [example.y]) for m in ensemble.models], axis=0)
    ref_z = np.mean([_py(m, zx, zy) for m in ensemble.models], axis=0)
    return float(rmia_from_probs(_py(target, example.x, [example.y]), ref_x, _py(target, zx, zy), ref_z, gamma)[0])


# ---------------------------------------------------------------------------
# batched auditor
# ---------------------------------------------------------------------------


class Auditor:
    """Evaluates any statistic on batches of queries against one target model.

    The shadow ensemble (if any) is queried on the same inputs as the target; IN/OUT roles
    follow the query's sample id, so a fabricated copy of a nonmember keeps its origin's roles.
    Queries short of reference models on one side use the non-strict fallbacks of
    `fit_lira_arrays` and `attack_r_from_arrays`.
    """

    def __init__(
        self,
        target: ClassifierModel,
        ensemble: ShadowEnsemble | None = None,
        population: tuple[torch.Tensor, torch.Tensor] | None = None,
        rmia_gamma: float = 1.0,
    ):
        self.target = target
        self.ensemble = ensemble
        self.rmia_gamma = rmia_gamma
        self._pop = None
        if population is not None and ensemble is not None and len(ensemble):
            zx, zy = population
            self._pop = (
                _py(target, zx, zy),
                np.mean([_py(m, zx, zy) for m in ensemble.models], axis=0),
            )

    def _need_ensemble(self, kind):
        if self.ensemble is None or len(self.ensemble) == 0:
            raise EmptyReferenceError(f"{kind} needs a shadow ensemble")

    def scores(self, kind: StatisticKind | str, x, y, ids: Sequence[str]) -> np.ndarray:
        kind = StatisticKind(kind)
        x, y = _xy(x, y)
        if kind is StatisticKind.loss:
            return loss_scores(self.target, x, y)
        self._need_ensemble(kind.value)
        if kind is StatisticKind.rmia:
            if self._pop is None:
                raise EmptyReferenceError("RMIA needs a population sample")
            ref = np.mean([_py(m, x, y) for m in self.ensemble.models], axis=0)
            return rmia_from_probs(_py(self.target, x, y), ref, *self._pop, gamma=self.rmia_gamma)
        phi_t = phi_scores(self.target, x, y)
        phi_refs = np.stack([phi_scores(m, x, y) for m in self.ensemble.models])
        member = self.ensemble.membership(list(ids))
        if kind is StatisticKind.attack_r:
            return attack_r_from_arrays(phi_t, phi_refs, ~member, strict=False)
        mu_in, mu_out, s_in, s_out, _ = fit_lira_arrays(phi_refs, member, strict=False)
        return lira_statistic((mu_in, mu_out, s_in, s_out), phi_t)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_statistics_csv(rows: Sequence[tuple[str, str, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "kind", "statistic"])
        for sid, kind, s in rows:
            w.writerow([sid, kind, repr(float(s))])
    return path


def write_lira_cache(fits: dict[str, LiRAGaussians], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({k: asdict(v) for k, v in sorted(fits.items())}, indent=1))
    return path


def read_lira_cache(path: str | Path) -> dict[str, LiRAGaussians]:
    return {k: LiRAGaussians(**v) for k, v in json.loads(Path(path).read_text()).items()}
