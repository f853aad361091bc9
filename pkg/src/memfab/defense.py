"""Gradient-norm detection of fabricated members and gradient-weighted robust MIA scores."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics

LAMBDA_GRID = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0)
W_MAX = float(np.nextafter(1.0, 0.0))  # tanh rounds to 1.0 for large arguments; keep w < 1


@dataclass(frozen=True)
class DetectorRule:
    tau_prime: float
    backend: str = "exact"  # or "finite_difference"

    def __post_init__(self):
        if self.tau_prime < 0:
            raise ValueError("tau_prime must be nonnegative")
        if self.backend not in ("exact", "finite_difference"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass
class RobustWeightConfig:
    lam: float = 10.0
    grid: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if any(not g > 0 for g in self.grid):
            raise ValueError("grid values must be positive")


def mfd_detect(g, rule: DetectorRule):
    """1 (fabricated) iff grad norm <= tau_prime; inclusive boundary. Elementwise on arrays."""
    if np.ndim(g):
        return (np.asarray(g) <= rule.tau_prime).astype(int)
    if g < 0:
        raise ValueError("gradient norm must be nonnegative")
    return int(g <= rule.tau_prime)


def robustness_weight(g, lam: float):
    """tanh(lam * g), capped just below 1 so that w stays in [0, 1) in floating point."""
    w = np.minimum(np.tanh(lam * np.asarray(g, dtype=np.float64)), W_MAX)
    return float(w) if w.ndim == 0 else w


def ar_statistic(S, g, lam: float):
    """Base statistic multiplied by the robustness weight."""
    out = robustness_weight(g, lam) * np.asarray(S, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


def _objective(scores, labels, objective: str) -> float:
    curve = metrics.roc_curve(scores, labels)
    if objective == "auc":
        return metrics.auc(curve)
    if objective.startswith("tpr_at_fpr"):
        q = float(objective.split(":", 1)[1]) if ":" in objective else 0.01
        return metrics.tpr_at_fpr(curve, q)
    raise ValueError(f"unknown objective {objective!r}")


def select_lambda(
    S: Sequence[float], g: Sequence[float], member: Sequence[int], grid: Sequence[float], objective: str = "auc"
) -> tuple[float, dict[float, float]]:
    """Exhaustive search over the grid; ties go to the smaller lambda.

    `objective` is "auc" or "tpr_at_fpr:<q>". Returns (chosen lambda, objective per lambda).
    """
    if not len(grid):
        raise ValueError("empty lambda grid")
    values = {float(lam): _objective(ar_statistic(S, g, lam), member, objective) for lam in grid}
    best = max(values.values())
    chosen = min(lam for lam, v in values.items() if v == best)
    return chosen, values


def calibrate_lambda(
    shadow_model,
    dataset,
    shadow_split,
    grid: Sequence[float] = LAMBDA_GRID,
    objective: str = "auc",
    kind: str = "loss",
    fab=None,
    mixture=None,
    ensemble=None,
) -> float:
    """Choose lambda on a shadow model by simulating the fabrication mixture there.

    `shadow_split` must describe the shadow model's own members/nonmembers and share no
    evaluation ids with the target audit.
    """
    from .fabrication import FabricationConfig
    from .games import MixtureSpec, run_armia_game

    if not len(grid):
        raise ValueError("empty lambda grid")
    if len(grid) == 1:
        return float(grid[0])
    fab = fab or FabricationConfig()
    mixture = mixture or MixtureSpec()
    outcome = run_armia_game(
        shadow_model, dataset, shadow_split, kind, fab, RobustWeightConfig(float(grid[0]), list(grid)), mixture, ensemble
    )
    S, g, b = outcome.column("statistic"), outcome.column("grad_norm"), outcome.column("member")
    lam, _ = select_lambda(S, g, b, grid, objective)
    return lam
