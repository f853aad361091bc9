"""Harnesses for the membership, fabrication, detection and robust-audit games.

Each harness emits one ScoreRecord per query, where the query is the (possibly perturbed) input
the inferer actually sees. Perturbed inputs are kept on the outcome so any record can be
recomputed from what was stored.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .data import ExampleSet
from .defense import DetectorRule, RobustWeightConfig, ar_statistic, robustness_weight
from .fabrication import FabricationBatch, FabricationConfig, fabricate
from .geometry import FDConfig, fd_grad_estimates, grad_norms
from .mia import Auditor, StatisticKind
from .model_core import ClassifierModel, MembershipSplit, ShadowEnsemble
from .seeding import derive_seed

PROTOCOLS = ("mi", "mfa", "mfd", "armia")
PREFILTER_FPR = 0.10


class MissingEnsembleError(ValueError):
    pass


class EmptySelectionError(RuntimeError):
    pass


class MalformedRecordError(ValueError):
    pass


@dataclass
class ScoreRecord:
    sample_id: str
    member: int
    fabricated: int
    statistic: float
    grad_norm: float
    weight: float
    statistic_kind: str
    variant: str = "none"
    ar_statistic: float = float("nan")
    grad_norm_fd: float = float("nan")
    detected_fabricated: int = -1
    selected: int = 1

    def __post_init__(self):
        if self.fabricated and self.member:
            raise ValueError(f"{self.sample_id}: a fabricated record cannot be a member")


CSV_FIELDS = [f.name for f in fields(ScoreRecord)]
_INT_FIELDS = {"member", "fabricated", "detected_fabricated", "selected"}
_FLOAT_FIELDS = {"statistic", "grad_norm", "weight", "ar_statistic", "grad_norm_fd"}


@dataclass
class MixtureSpec:
    fraction_members: float = 0.5
    fraction_fabricated: float = 0.25
    fraction_nonmembers: float = 0.25
    fabrication_probability: float = 0.5

    def __post_init__(self):
        fr = (self.fraction_members, self.fraction_fabricated, self.fraction_nonmembers)
        if min(fr) < 0 or abs(sum(fr) - 1) > 1e-9:
            raise ValueError("mixture fractions must be nonnegative and sum to 1")
        if not 0 <= self.fabrication_probability <= 1:
            raise ValueError("fabrication_probability must lie in [0, 1]")

    def counts(self, n_members: int, n_nonmembers: int) -> tuple[int, int, int]:
        """Largest (members, fabricated, plain nonmembers) counts the pools support."""
        fm, ff, fn = self.fraction_members, self.fraction_fabricated, self.fraction_nonmembers
        limits = []
        if fm > 0:
            limits.append(n_members / fm)
        if ff + fn > 0:
            limits.append(n_nonmembers / (ff + fn))
        total = min(limits)
        n_m = min(round(fm * total), n_members)
        n_f = min(round(ff * total), n_nonmembers)
        n_n = min(round(fn * total), n_nonmembers - n_f)
        return n_m, n_f, n_n


@dataclass
class GameOutcome:
    records: list[ScoreRecord]
    protocol: str
    config: dict = field(default_factory=dict)
    queries: torch.Tensor | None = None  # (n, C, H, W) inputs the inferer saw, aligned with records
    labels_y: torch.Tensor | None = None

    def __post_init__(self):
        if not self.records:
            raise ValueError("empty outcome")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def member_scores(self) -> np.ndarray:
        return np.array([r.statistic for r in self.records if r.member])

    def fabricated_scores(self) -> np.ndarray:
        return np.array([r.statistic for r in self.records if r.fabricated])

    def roc(self, score: str = "statistic") -> metrics.RocCurve:
        """Members positive; nonmembers and fabricated negative."""
        return metrics.roc_curve(self.column(score), self.column("member"))

    # --- persistence -------------------------------------------------------

    def write_csv(self, path: str | Path, columns: Sequence[str] | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = list(columns or CSV_FIELDS)
        order = sorted(range(len(self.records)), key=lambda i: (self.records[i].sample_id, self.records[i].fabricated))
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in order:
                r = self.records[i]
                w.writerow([_fmt(getattr(r, c)) for c in cols])
        return path

    def write_queries(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            ids=np.array([r.sample_id for r in self.records]),
            fabricated=self.column("fabricated"),
            x=self.queries.float().numpy(),
            y=self.labels_y.numpy(),
        )
        return path

    def manifest(self, model: ClassifierModel | None = None, seed: int | None = None) -> dict:
        return {
            "protocol": self.protocol,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": seed,
            "model_checksum": model.checksum() if model is not None else None,
            "n_records": len(self.records),
        }

    def write_manifest(self, path: str | Path, model=None, seed=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(model, seed), indent=2, sort_keys=True))
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_records(path: str | Path) -> list[ScoreRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                kw = {}
                for k, v in row.items():
                    if k in _INT_FIELDS:
                        kw[k] = int(v)
                    elif k in _FLOAT_FIELDS:
                        kw[k] = float(v) if v != "" else float("nan")
                    elif k in CSV_FIELDS:
                        kw[k] = v
                out.append(ScoreRecord(**kw))
            except (TypeError, ValueError) as err:
                raise MalformedRecordError(f"{path}: row {row_no}: {err}") from None
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


class FabricationCache:
    """Reuses fabricated batches across statistic kinds so comparisons stay paired."""

    def __init__(self):
        self._store: dict = {}

    @staticmethod
    def _key(target, ids, fab, backend):
        return (id(target), tuple(sorted(asdict(fab).items())), tuple(ids), backend)

    def put(self, target: ClassifierModel, ids, fab: FabricationConfig, batch: FabricationBatch, backend="auto"):
        self._store[self._key(target, ids, fab, backend)] = batch

    def get(self, target: ClassifierModel, x, y, ids, fab: FabricationConfig, backend="auto") -> FabricationBatch:
        key = self._key(target, ids, fab, backend)
        if key not in self._store:
            self._store[key] = fabricate(target, x, y, fab, ids=ids, backend=backend)
        return self._store[key]


_DEFAULT_CACHE = FabricationCache()


def _needs_ensemble(kind: StatisticKind, ensemble):
    if kind is not StatisticKind.loss and (ensemble is None or len(ensemble) == 0):
        raise MissingEnsembleError(f"statistic {kind.value!r} needs a shadow ensemble")


def _auditor(target, dataset, split, ensemble, kind, auditor):
    if auditor is not None:
        return auditor
    population = None
    if kind is StatisticKind.rmia:
        evals = set(split.eval_ids)
        pool = [sid for sid in split.nonmember_pool if sid not in evals][:500]
        if not pool:
            pool = split.eval_nonmembers
        sub = dataset.subset(pool)
        population = (sub.x, sub.y)
    return Auditor(target, ensemble, population)


def _records(ids, member, fabricated, S, g, kind, variant, lam=None, **extra):
    out = []
    for i, sid in enumerate(ids):
        w = robustness_weight(g[i], lam) if lam else float("nan")
        r = ScoreRecord(
            sid,
            int(member[i]),
            int(fabricated[i]),
            float(S[i]),
            float(g[i]),
            float(w),
            kind.value,
            variant if fabricated[i] else "none",
            float(ar_statistic(S[i], g[i], lam)) if lam else float("nan"),
        )
        for k, v in extra.items():
            val = v[i] if hasattr(v, "__len__") else v
            setattr(r, k, val.item() if isinstance(val, np.generic) else val)
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# games
# ---------------------------------------------------------------------------


def run_mi_game(
    target: ClassifierModel,
    dataset: ExampleSet,
    split: MembershipSplit,
    kind: StatisticKind | str = "loss",
    ensemble: ShadowEnsemble | None = None,
    auditor: Auditor | None = None,
) -> GameOutcome:
    kind = StatisticKind(kind)
    _needs_ensemble(kind, ensemble)
    aud = _auditor(target, dataset, split, ensemble, kind, auditor)
    ids = split.eval_members + split.eval_nonmembers
    sub = dataset.subset(ids)
    member = np.r_[np.ones(len(split.eval_members)), np.zeros(len(split.eval_nonmembers))]
    S = aud.scores(kind, sub.x, sub.y, ids)
    g = grad_norms(target, sub.x, sub.y)
    recs = _records(ids, member, np.zeros(len(ids)), S, g, kind, "none")
    return GameOutcome(recs, "mi", {"kind": kind.value}, sub.x.clone(), sub.y.clone())


def _fabricated_pool(target, dataset, split, fab, cache, backend="auto"):
    """True members unchanged; every evaluation nonmember replaced by its fabricated copy."""
    mem = dataset.subset(split.eval_members)
    non = dataset.subset(split.eval_nonmembers)
    batch = (cache or _DEFAULT_CACHE).get(target, non.x, non.y, non.ids, fab, backend)
    ids = mem.ids + non.ids
    x = torch.cat([mem.x.to(batch.x_bar.dtype), batch.x_bar])
    y = torch.cat([mem.y, non.y])
    member = np.r_[np.ones(len(mem)), np.zeros(len(non))]
    return ids, x, y, member, 1 - member


def run_mfa_game(
    target: ClassifierModel,
    dataset: ExampleSet,
    split: MembershipSplit,
    kind: StatisticKind | str,
    fab: FabricationConfig,
    ensemble: ShadowEnsemble | None = None,
    auditor: Auditor | None = None,
    cache: FabricationCache | None = None,
) -> GameOutcome:
    """50% true members, 50% fabricated members; statistics computed on the perturbed inputs."""
    kind = StatisticKind(kind)
    _needs_ensemble(kind, ensemble)
    aud = _auditor(target, dataset, split, ensemble, kind, auditor)
    ids, x, y, member, fabricated = _fabricated_pool(target, dataset, split, fab, cache)
    S = aud.scores(kind, x, y, ids)
    g = grad_norms(target, x, y)
    recs = _records(ids, member, fabricated, S, g, kind, fab.variant)
    cfg = {"kind": kind.value, "fabrication": asdict(fab)}
    return GameOutcome(recs, "mfa", cfg, x, y)


def prefilter_threshold(scores: np.ndarray, negatives: np.ndarray, fpr: float = PREFILTER_FPR) -> float:
    """Smallest threshold tau (among negative scores) with #{negatives: S > tau} <= fpr * #negatives."""
    neg = np.sort(np.asarray(scores)[np.asarray(negatives, bool)])[::-1]
    k = int(math.floor(fpr * len(neg)))
    return float(neg[min(k, len(neg) - 1)])


def run_mfd_game(
    target: ClassifierModel,
    dataset: ExampleSet,
    split: MembershipSplit,
    fab: FabricationConfig,
    detector: DetectorRule | None = None,
    backend: str = "exact",
    fd: FDConfig | None = None,
    prefilter_negatives: str = "fabricated",
    cache: FabricationCache | None = None,
) -> GameOutcome:
    """Detector game on the samples a loss-attack inferer calls members.

    The inferer threshold sits at 10% FPR. With `prefilter_negatives="fabricated"` the FPR is
    measured on the fabricated half of the pool; `"natural"` measures it on the unperturbed
    evaluation nonmembers instead. Records carry only selected samples; the detector score is
    the gradient norm (fabricated predicted when small). `backend` is "exact", "fd" or "both".
    """
    if backend not in ("exact", "fd", "both"):
        raise ValueError(f"unknown backend {backend!r}")
    detector = detector or DetectorRule(0.0, "exact" if backend == "exact" else "finite_difference")
    ids, x, y, member, fabricated = _fabricated_pool(target, dataset, split, fab, cache)
    S = -target.losses(x, y).numpy()
    if prefilter_negatives == "fabricated":
        tau = prefilter_threshold(S, fabricated.astype(bool))
    elif prefilter_negatives == "natural":
        non = dataset.subset(split.eval_nonmembers)
        s_nat = -target.losses(non.x, non.y).numpy()
        tau = prefilter_threshold(s_nat, np.ones(len(s_nat), bool))
    else:
        raise ValueError(f"unknown prefilter_negatives {prefilter_negatives!r}")
    sel = np.flatnonzero(S > tau)
    if len(sel) == 0:
        raise EmptySelectionError("no sample passed the membership pre-filter")
    ids_s = [ids[i] for i in sel]
    xs, ys = x[sel], y[sel]
    n = len(sel)
    nan = np.full(n, np.nan)
    g = grad_norms(target, xs, ys) if backend in ("exact", "both") else nan
    g_fd = nan
    if backend in ("fd", "both"):
        _, g_fd = fd_grad_estimates(target, xs, ys, fd or FDConfig(), ids=ids_s)
    det_g = g if backend != "fd" else g_fd
    detected = (det_g <= detector.tau_prime).astype(int)
    recs = _records(
        ids_s, member[sel], fabricated[sel], S[sel], g, StatisticKind.loss, fab.variant,
        grad_norm_fd=g_fd, detected_fabricated=detected,
    )
    cfg = {
        "fabrication": asdict(fab),
        "prefilter_tau": tau,
        "prefilter_negatives": prefilter_negatives,
        "prefilter_fpr": PREFILTER_FPR,
        "backend": backend,
        "tau_prime": detector.tau_prime,
        "n_selected_members": int(member[sel].sum()),
        "n_selected_fabricated": int(fabricated[sel].sum()),
    }
    return GameOutcome(recs, "mfd", cfg, xs, ys)


def mfd_roc(outcome: GameOutcome, column: str = "grad_norm") -> metrics.RocCurve:
    """Detector ROC: fabricated records positive, detector score = -gradient norm."""
    if outcome.protocol != "mfd":
        raise metrics.ProtocolMismatchError("detector ROC needs an MFD outcome")
    return metrics.roc_curve(-outcome.column(column), outcome.column("fabricated"), "fabricated")


def run_armia_game(
    target: ClassifierModel,
    dataset: ExampleSet,
    split: MembershipSplit,
    kind: StatisticKind | str,
    fab: FabricationConfig,
    weight: RobustWeightConfig,
    mixture: MixtureSpec | None = None,
    ensemble: ShadowEnsemble | None = None,
    auditor: Auditor | None = None,
    cache: FabricationCache | None = None,
    seed: int = 0,
) -> GameOutcome:
    """Members vs a nonmember half in which a Pr-fraction is fabricated.

    Member and nonmember draws, and the fabrication coin, are independent seeded draws; the
    fabricated subset has exactly the mixture's size.
    """
    kind = StatisticKind(kind)
    mixture = mixture or MixtureSpec()
    _needs_ensemble(kind, ensemble)
    aud = _auditor(target, dataset, split, ensemble, kind, auditor)
    n_m, n_f, n_n = mixture.counts(len(split.eval_members), len(split.eval_nonmembers))
    rng_m = np.random.default_rng(derive_seed(seed, "armia-members"))
    rng_f = np.random.default_rng(derive_seed(seed, "armia-fabricate"))
    mem_ids = sorted(rng_m.choice(split.eval_members, n_m, replace=False).tolist())
    nonmembers = sorted(rng_m.choice(split.eval_nonmembers, n_f + n_n, replace=False).tolist())
    fab_mask = np.zeros(len(nonmembers), bool)
    fab_mask[rng_f.choice(len(nonmembers), n_f, replace=False)] = True
    fab_ids = [s for s, f in zip(nonmembers, fab_mask) if f]
    nat_ids = [s for s, f in zip(nonmembers, fab_mask) if not f]

    mem, nat = dataset.subset(mem_ids), dataset.subset(nat_ids)
    # fabricate every evaluation nonmember once (cached) and keep the drawn subset; this pairs
    # AR runs with MFA runs on identical perturbed inputs
    non_all = dataset.subset(split.eval_nonmembers)
    batch = (cache or _DEFAULT_CACHE).get(target, non_all.x, non_all.y, non_all.ids, fab)
    fidx = non_all.indices(fab_ids)
    ids = mem_ids + fab_ids + nat_ids
    dtype = batch.x_bar.dtype
    x = torch.cat([mem.x.to(dtype), batch.x_bar[fidx], nat.x.to(dtype)])
    y = torch.cat([mem.y, non_all.y[fidx], nat.y])
    member = np.r_[np.ones(n_m), np.zeros(n_f + len(nat_ids))]
    fabricated = np.r_[np.zeros(n_m), np.ones(n_f), np.zeros(len(nat_ids))]
    S = aud.scores(kind, x, y, ids)
    g = grad_norms(target, x, y)
    recs = _records(ids, member, fabricated, S, g, kind, fab.variant, lam=weight.lam)
    cfg = {
        "kind": kind.value,
        "fabrication": asdict(fab),
        "mixture": asdict(mixture),
        "lambda": weight.lam,
        "grid": list(weight.grid),
        "seed": seed,
    }
    return GameOutcome(recs, "armia", cfg, x, y)


def armia_metrics(outcome: GameOutcome, lam: float | None) -> dict:
    """AUC/EER/TPR@{1,5,10,20}%FPR of the weighted statistic (lam=None: unweighted base)."""
    S, g, b = outcome.column("statistic"), outcome.column("grad_norm"), outcome.column("member")
    scores = S if lam is None else ar_statistic(S, g, lam)
    curve = metrics.roc_curve(scores, b)
    out = {"auc": metrics.auc(curve), "eer": metrics.eer(curve)}
    for q in (0.01, 0.05, 0.10, 0.20):
        out[f"tpr@{int(q * 100)}%fpr"] = metrics.tpr_at_fpr(curve, q)
    return out
