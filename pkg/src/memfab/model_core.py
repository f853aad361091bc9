"""Membership splits, classifier training, and the differentiable model interface."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ExampleSet, LabeledExample
from .seeding import derive_seed

logger = logging.getLogger(__name__)

# p_y is floored here before taking logs; the matching loss ceiling is -log(P_FLOOR) ~ 27.63.
P_FLOOR = 1e-12
LOSS_CEIL = -math.log(P_FLOOR)


class InsufficientDataError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# membership splits
# ---------------------------------------------------------------------------


@dataclass
class MembershipSplit:
    """Target membership plus the shadow-model manifest.

    `shadow_splits[j] = (in_ids, out_ids)`: `in_ids` is the full training set of shadow j
    (its Bernoulli(1/2) draw over the evaluation pool plus filler), `out_ids` the evaluation
    examples it did not train on.
    """

    train_members: list[str]
    nonmember_pool: list[str]
    eval_members: list[str]
    eval_nonmembers: list[str]
    shadow_splits: list[tuple[list[str], list[str]]] = field(default_factory=list)
    seed: int = 0

    @property
    def eval_ids(self) -> list[str]:
        return self.eval_members + self.eval_nonmembers

    def check(self) -> None:
        """Raise AssertionError if any disjointness/containment invariant is broken."""
        train, pool = set(self.train_members), set(self.nonmember_pool)
        ev_m, ev_n = set(self.eval_members), set(self.eval_nonmembers)
        assert not train & pool, "train_members and nonmember_pool overlap"
        assert ev_m <= train, "eval_members not contained in train_members"
        assert ev_n <= pool, "eval_nonmembers not contained in nonmember_pool"
        evals = ev_m | ev_n
        for j, (ins, outs) in enumerate(self.shadow_splits):
            ins, outs = set(ins), set(outs)
            assert not ins & outs, f"shadow {j}: IN and OUT overlap"
            assert outs <= evals, f"shadow {j}: OUT ids outside the evaluation pool"
            assert (ins & evals) | outs == evals, f"shadow {j}: evaluation pool not fully assigned"
            # filler (non-evaluation training data) never touches the evaluation pool
            assert not (ins - evals) & evals

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "train_members": self.train_members,
            "nonmember_pool": self.nonmember_pool,
            "eval_members": self.eval_members,
            "eval_nonmembers": self.eval_nonmembers,
            "shadow_splits": [{"in": list(i), "out": list(o)} for i, o in self.shadow_splits],
        }

    @classmethod
    def from_json(cls, d: dict) -> "MembershipSplit":
        return cls(
            train_members=list(d["train_members"]),
            nonmember_pool=list(d["nonmember_pool"]),
            eval_members=list(d["eval_members"]),
            eval_nonmembers=list(d["eval_nonmembers"]),
            shadow_splits=[(list(s["in"]), list(s["out"])) for s in d["shadow_splits"]],
            seed=int(d.get("seed", 0)),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MembershipSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_membership_splits(
    dataset: ExampleSet | Sequence[str],
    n_train: int,
    n_shadow: int,
    seed: int,
    n_eval: int | None = None,
) -> MembershipSplit:
    """Draw D, the nonmember pool, balanced evaluation sets, and `n_shadow` shadow splits.

    Every shadow trains on an independent Bernoulli(1/2) subset of the evaluation pool,
    topped up to `n_train` examples with filler drawn from outside the evaluation pool.
    """
    ids = list(dataset.ids if isinstance(dataset, ExampleSet) else dataset)
    if n_train < 1 or n_shadow < 0:
        raise ValueError("n_train must be >= 1 and n_shadow >= 0")
    if len(ids) < 2 * n_train:
        raise InsufficientDataError(
            f"dataset has {len(ids)} examples; need at least {2 * n_train} for disjoint members/nonmembers"
        )
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    train, pool = order[:n_train], order[n_train:]
    if n_eval is None:
        n_eval = min(n_train, len(pool))
    if n_eval > n_train or n_eval > len(pool):
        raise InsufficientDataError(f"n_eval={n_eval} exceeds members ({n_train}) or pool ({len(pool)})")
    eval_members = sorted(train[:n_eval])
    eval_nonmembers = sorted(pool[:n_eval])
    evals = eval_members + eval_nonmembers
    eval_set = set(evals)
    filler_pool = [sid for sid in order if sid not in eval_set]

    shadows = []
    for _ in range(n_shadow):
        mask = rng.random(len(evals)) < 0.5
        ins = [sid for sid, m in zip(evals, mask) if m]
        outs = [sid for sid, m in zip(evals, mask) if not m]
        n_fill = min(max(n_train - len(ins), 0), len(filler_pool))
        fill = [filler_pool[i] for i in rng.choice(len(filler_pool), n_fill, replace=False)] if n_fill else []
        shadows.append((sorted(ins + fill), outs))

    split = MembershipSplit(
        train_members=sorted(train),
        nonmember_pool=sorted(pool),
        eval_members=eval_members,
        eval_nonmembers=eval_nonmembers,
        shadow_splits=shadows,
        seed=seed,
    )
    split.check()
    return split


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "elu": nn.ELU, "softplus": nn.Softplus}


class SmallCNN(nn.Module):
    """Three conv blocks and a one-hidden-layer head; inputs standardized per channel."""

    def __init__(self, input_shape, n_classes, width=16, hidden=128, activation="tanh"):
        super().__init__()
        c = input_shape[0]
        act = _ACTIVATIONS[activation]
        w = width
        self.register_buffer("mean", torch.full((1, c, 1, 1), 0.5))
        self.register_buffer("std", torch.ones(1, c, 1, 1))
        self.body = nn.Sequential(
            nn.Conv2d(c, w, 3, padding=1), act(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), act(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), act(), nn.AdaptiveAvgPool2d(2),
            nn.Flatten(), nn.Linear(8 * w, hidden), act(),
        )
        self.head = nn.Linear(hidden, n_classes)

    def features(self, x):
        return self.body((x - self.mean) / self.std)

    def forward(self, x):
        return self.head(self.features(x))


class TinyMLP(nn.Module):
    def __init__(self, input_shape, n_classes, hidden=32, activation="tanh"):
        super().__init__()
        d = int(np.prod(input_shape))
        self.register_buffer("mean", torch.full((1, *input_shape), 0.5))
        self.register_buffer("std", torch.ones(1, *input_shape))
        self.body = nn.Sequential(nn.Flatten(), nn.Linear(d, hidden), _ACTIVATIONS[activation]())
        self.head = nn.Linear(hidden, n_classes)

    def features(self, x):
        return self.body((x - self.mean) / self.std)

    def forward(self, x):
        return self.head(self.features(x))


class LinearNet(nn.Module):
    """Multinomial logistic regression on flattened pixels."""

    def __init__(self, input_shape, n_classes):
        super().__init__()
        self.head = nn.Linear(int(np.prod(input_shape)), n_classes)

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        return self.head(x.flatten(1))


ARCHITECTURES = {"cnn": SmallCNN, "mlp": TinyMLP, "linear": LinearNet}


def build_network(arch_id: str, input_shape, n_classes: int, **kwargs) -> nn.Module:
    try:
        cls = ARCHITECTURES[arch_id]
    except KeyError:
        raise ValueError(f"unknown architecture {arch_id!r}; choose from {sorted(ARCHITECTURES)}") from None
    return cls(tuple(input_shape), n_classes, **kwargs)


# ---------------------------------------------------------------------------
# model interface
# ---------------------------------------------------------------------------


class ClassifierModel:
    """A trained, frozen classifier in evaluation mode.

    Logits come from the wrapped network; probabilities and losses are formed in float64
    from those logits so that confidences near 1 keep their resolution.
    """

    def __init__(self, net: nn.Module, n_classes: int, arch_id: str, input_shape=None, arch_kwargs=None):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.n_classes = int(n_classes)
        self.arch_id = arch_id
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.arch_kwargs = dict(arch_kwargs or {})
        self.meta: dict = {}

    @property
    def dtype(self) -> torch.dtype:
        for t in self.net.parameters():
            return t.dtype
        return torch.float32

    def to(self, dtype: torch.dtype) -> "ClassifierModel":
        import copy

        net = copy.deepcopy(self.net).to(dtype)
        out = ClassifierModel(net, self.n_classes, self.arch_id, self.input_shape, self.arch_kwargs)
        out.meta = dict(self.meta)
        return out

    def _batch(self, x: torch.Tensor) -> torch.Tensor:
        if self.input_shape is not None:
            if x.shape[-len(self.input_shape):] != self.input_shape or x.dim() not in (
                len(self.input_shape),
                len(self.input_shape) + 1,
            ):
                raise ShapeMismatchError(f"expected input shape {self.input_shape}, got {tuple(x.shape)}")
            if x.dim() == len(self.input_shape):
                x = x.unsqueeze(0)
        elif x.dim() == 3:
            x = x.unsqueeze(0)
        return x.to(self.dtype)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net(self._batch(x))

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x).double(), dim=-1)

    def losses(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-sample cross-entropy -log p_y in float64, with p_y floored at 1e-12."""
        return _clamped_ce(self.logits(x).double(), torch.as_tensor(y).reshape(-1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net.features(self._batch(x))

    def input_gradients(self, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Gradient of the cross-entropy w.r.t. each input; returns (grads, float64 losses)."""
        x = self._batch(x).detach().requires_grad_(True)
        y = torch.as_tensor(y).reshape(-1)
        with torch.enable_grad():
            z = self.net(x)
            # samples are independent in eval mode, so the gradient of the sum is per-sample exact
            (g,) = torch.autograd.grad(F.cross_entropy(z, y, reduction="sum"), x)
        return g.detach(), _clamped_ce(z.detach().double(), y)

    def checksum(self) -> str:
        buf = io.BytesIO()
        torch.save({k: v.cpu() for k, v in self.net.state_dict().items()}, buf)
        return hashlib.sha256(buf.getvalue()).hexdigest()


def _clamped_ce(z64: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    zy = z64.gather(1, y[:, None]).squeeze(1)
    return (torch.logsumexp(z64, dim=1) - zy).clamp(min=0.0, max=LOSS_CEIL)


def probabilities(model: ClassifierModel, x: torch.Tensor) -> torch.Tensor:
    p = model.probabilities(x)
    return p[0] if x.dim() == 3 else p


def sample_loss(model: ClassifierModel, example: LabeledExample) -> float:
    return float(model.losses(example.x, torch.tensor([example.y]))[0])


def input_gradient(model: ClassifierModel, example: LabeledExample) -> torch.Tensor:
    g, _ = model.input_gradients(example.x, torch.tensor([example.y]))
    return g[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 100
    lr_schedule: str = "cosine"
    l1_coefficient: float = 0.0
    seed: int = 0
    augment: bool = True

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.l1_coefficient < 0:
            raise ValueError("weight_decay and l1_coefficient must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        return self


def _augment(xb: torch.Tensor, gen: torch.Generator, pad: int = 2) -> torch.Tensor:
    """Random crop with reflect padding (one offset per batch) and per-sample horizontal flip."""
    h, w = xb.shape[-2:]
    padded = F.pad(xb, (pad, pad, pad, pad), mode="reflect")
    dy, dx = torch.randint(0, 2 * pad + 1, (2,), generator=gen).tolist()
    out = padded[..., dy : dy + h, dx : dx + w]
    flip = torch.rand(len(xb), generator=gen) < 0.5
    return torch.where(flip[:, None, None, None], out.flip(-1), out)


def train_classifier(
    dataset: ExampleSet,
    ids: "MembershipSplit | Iterable[str]",
    config: TrainConfig,
    arch: str = "cnn",
    arch_kwargs: dict | None = None,
) -> ClassifierModel:
    """Minibatch SGD with momentum, weight decay, optional l1 penalty and cosine decay."""
    config.validate()
    if isinstance(ids, MembershipSplit):
        ids = ids.train_members
    ids = list(ids)
    if not ids:
        raise InsufficientDataError("empty training set")
    data = dataset.subset(ids)
    arch_kwargs = dict(arch_kwargs or {})

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    net = build_network(arch, dataset.input_shape, dataset.n_classes, **arch_kwargs)
    if hasattr(net, "mean"):
        if net.mean.dim() == 4 and net.mean.shape[2:] == (1, 1):
            net.mean.copy_(data.x.mean(dim=(0, 2, 3), keepdim=True))
            net.std.copy_(data.x.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-3))
        else:
            net.mean.copy_(data.x.mean(dim=0, keepdim=True))
            net.std.copy_(data.x.std(dim=0, keepdim=True).clamp_min(1e-3))

    opt = torch.optim.SGD(
        net.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )
    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = max(config.epochs * steps_per_epoch, 1)
    sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, total)
        if config.lr_schedule == "cosine"
        else torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    )
    augment = config.augment and data.x.dim() == 4 and min(data.x.shape[-2:]) > 2
    history = []
    net.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for start in range(0, n, config.batch_size):
            b = perm[start : start + config.batch_size]
            xb, yb = data.x[b], data.y[b]
            if augment:
                xb = _augment(xb, gen)
            loss = F.cross_entropy(net(xb), yb)
            if config.l1_coefficient:
                loss = loss + config.l1_coefficient * sum(p.abs().sum() for p in net.parameters())
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += float(loss.detach()) * len(b)
        history.append(running / n)
        logger.debug("epoch %d loss %.4f", epoch, history[-1])

    model = ClassifierModel(net, dataset.n_classes, arch, dataset.input_shape, arch_kwargs)
    model.meta = {"train_config": asdict(config), "loss_history": history, "n_train": n}
    return model


# ---------------------------------------------------------------------------
# shadow ensembles
# ---------------------------------------------------------------------------


@dataclass
class ShadowEnsemble:
    models: list[ClassifierModel]
    manifest: list[tuple[list[str], list[str]]]  # per-model (in_ids, out_ids)

    def __post_init__(self):
        if len(self.models) != len(self.manifest):
            raise ValueError("one manifest entry per model required")
        self._in_sets = [set(ins) for ins, _ in self.manifest]

    def __len__(self) -> int:
        return len(self.models)

    def membership(self, ids: Sequence[str]) -> np.ndarray:
        """Boolean (n_models, n_ids) matrix: True where the model trained on the id."""
        return np.array([[sid in s for sid in ids] for s in self._in_sets], dtype=bool).reshape(len(self), len(ids))

    def in_models(self, sid: str) -> list[ClassifierModel]:
        return [m for m, s in zip(self.models, self._in_sets) if sid in s]

    def out_models(self, sid: str) -> list[ClassifierModel]:
        return [m for m, s in zip(self.models, self._in_sets) if sid not in s]


def _train_one(args):
    dataset, ins, config, arch, arch_kwargs = args
    return train_classifier(dataset, ins, config, arch, arch_kwargs)


def train_shadow_ensemble(
    dataset: ExampleSet,
    split: MembershipSplit,
    config: TrainConfig,
    count: int,
    arch: str = "cnn",
    arch_kwargs: dict | None = None,
    workers: int = 1,
) -> ShadowEnsemble:
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > len(split.shadow_splits):
        raise ValueError(f"split holds {len(split.shadow_splits)} shadow splits, {count} requested")
    manifest = split.shadow_splits[:count]
    jobs = []
    for j, (ins, _) in enumerate(manifest):
        cfg = TrainConfig(**{**asdict(config), "seed": derive_seed(config.seed, "shadow", j)})
        jobs.append((dataset, ins, cfg, arch, arch_kwargs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            models = list(pool.map(_train_one, jobs))
    else:
        models = [_train_one(job) for job in jobs]
    return ShadowEnsemble(models, [(list(i), list(o)) for i, o in manifest])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_name(arch_id: str, seed: int) -> str:
    return f"{arch_id}-{seed}.ckpt"


def save_model(model: ClassifierModel, directory: str | Path, seed: int, config: TrainConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / checkpoint_name(model.arch_id, seed)
    torch.save(
        {
            "state_dict": model.net.state_dict(),
            "arch_id": model.arch_id,
            "arch_kwargs": model.arch_kwargs,
            "input_shape": list(model.input_shape),
            "n_classes": model.n_classes,
            "meta": model.meta,
        },
        path,
    )
    sidecar = {"train_config": asdict(config) if config else model.meta.get("train_config"), "checksum": model.checksum()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_model(path: str | Path) -> ClassifierModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    net = build_network(blob["arch_id"], blob["input_shape"], blob["n_classes"], **blob["arch_kwargs"])
    net.load_state_dict(blob["state_dict"])
    model = ClassifierModel(net, blob["n_classes"], blob["arch_id"], blob["input_shape"], blob["arch_kwargs"])
    model.meta = blob.get("meta", {})
    return model
