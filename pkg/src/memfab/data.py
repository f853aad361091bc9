"""Labeled image collections: the procedural desk dataset, sklearn digits, and on-disk archives."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    id: str
    x: torch.Tensor  # (C, H, W), values in [0, 1]
    y: int

    def __post_init__(self):
        if self.x.dim() != 3:
            raise DatasetError(f"{self.id}: expected (C, H, W) image, got shape {tuple(self.x.shape)}")
        if self.x.numel() and (self.x.min() < 0 or self.x.max() > 1):
            raise DatasetError(f"{self.id}: pixel values outside [0, 1]")
        if self.y < 0:
            raise DatasetError(f"{self.id}: negative label")


class ExampleSet:
    """An indexed collection of images sharing one shape and class count.

    Images are held as a single float tensor so that attacks and audits run batched;
    `example(i)` materializes a `LabeledExample` view when a per-sample API is wanted.
    """

    def __init__(self, ids: Sequence[str], x: torch.Tensor, y: torch.Tensor, n_classes: int):
        if len(ids) != len(x) or len(x) != len(y):
            raise DatasetError("ids, x and y must have equal length")
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate example ids")
        if x.dim() != 4:
            raise DatasetError(f"expected (N, C, H, W) images, got {tuple(x.shape)}")
        if x.numel() and (x.min() < 0 or x.max() > 1):
            raise DatasetError("pixel values outside [0, 1]")
        y = torch.as_tensor(y, dtype=torch.long)
        if len(y) and (y.min() < 0 or y.max() >= n_classes):
            raise DatasetError(f"labels must lie in [0, {n_classes})")
        self.ids = list(ids)
        self.x = x.float().contiguous()
        self.y = y
        self.n_classes = int(n_classes)
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sid: str) -> bool:
        return sid in self._index

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def indices(self, ids: Iterable[str]) -> list[int]:
        try:
            return [self._index[sid] for sid in ids]
        except KeyError as err:
            raise DatasetError(f"unknown example id {err.args[0]!r}") from None

    def subset(self, ids: Iterable[str]) -> "ExampleSet":
        ids = list(ids)
        idx = self.indices(ids)
        return ExampleSet(ids, self.x[idx], self.y[idx], self.n_classes)

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.ids[i], self.x[i], int(self.y[i]))

    def __getitem__(self, sid: str) -> LabeledExample:
        return self.example(self._index[sid])

    def __iter__(self):
        for i in range(len(self)):
            yield self.example(i)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], n_classes: int) -> "ExampleSet":
        return cls(
            [e.id for e in examples],
            torch.stack([e.x for e in examples]),
            torch.tensor([e.y for e in examples]),
            n_classes,
        )

    # --- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        """Write a packed archive (`.npz`) with ids, float images and labels."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            ids=np.array(self.ids),
            x=self.x.numpy(),
            y=self.y.numpy(),
            n_classes=np.array(self.n_classes),
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExampleSet":
        path = Path(path)
        if path.is_dir():
            if (path / "data.npz").exists():
                return cls.load(path / "data.npz")
            return load_image_folder(path)
        with np.load(path, allow_pickle=False) as z:
            ids = [str(s) for s in z["ids"]]
            n_classes = int(z["n_classes"]) if "n_classes" in z else int(z["y"].max()) + 1
            return cls(ids, torch.from_numpy(z["x"]).float(), torch.from_numpy(z["y"]).long(), n_classes)


def load_image_folder(root: str | Path) -> ExampleSet:
    """Read `<root>/<class_index>/<id>.png` images (class directories must be integers)."""
    from PIL import Image

    root = Path(root)
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: int(d.name))
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")
    ids, xs, ys = [], [], []
    for d in class_dirs:
        for f in sorted(d.glob("*.png")):
            arr = np.asarray(Image.open(f), dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            ids.append(f.stem)
            xs.append(torch.from_numpy(arr.copy()))
            ys.append(int(d.name))
    n_classes = max(ys) + 1
    meta = root / "meta.json"
    if meta.exists():
        n_classes = json.loads(meta.read_text()).get("n_classes", n_classes)
    return ExampleSet(ids, torch.stack(xs), torch.tensor(ys), n_classes)


def make_synthetic(
    n: int,
    n_classes: int = 10,
    image_size: int = 16,
    channels: int = 3,
    template_amplitude: float = 0.15,
    texture_amplitude: float = 0.15,
    noise: float = 0.1,
    contrast: float = 0.35,
    jitter: int = 8,
    seed: int = 0,
) -> ExampleSet:
    """Procedural CIFAR-like images.

    Each class owns a smooth random color template. A sample is a randomly translated crop of
    its class template plus a per-sample smooth texture and white noise, compressed around
    mid-gray by `contrast`. Class evidence is weak and spread over many pixels, so a small
    network overfits its training set and stays sensitive to small l-inf perturbations.
    """
    rng = np.random.default_rng(seed)

    def smooth(shape, sigma):
        f = gaussian_filter(rng.standard_normal(shape), sigma=(0, sigma, sigma))
        return f / f.std()

    size = image_size
    templates = [smooth((channels, size + jitter, size + jitter), 3.0) for _ in range(n_classes)]
    y = rng.integers(0, n_classes, n)
    x = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        dx, dy = rng.integers(0, jitter + 1, 2)
        t = templates[y[i]][:, dy : dy + size, dx : dx + size]
        img = template_amplitude * t + texture_amplitude * smooth((channels, size, size), 1.5)
        img = img + noise * rng.standard_normal((channels, size, size))
        x[i] = np.clip(0.5 + contrast * img, 0.0, 1.0)
    ids = [f"s{i:05d}" for i in range(n)]
    return ExampleSet(ids, torch.from_numpy(x), torch.from_numpy(y), n_classes)


def load_digits_set() -> ExampleSet:
    """The 8x8 sklearn digits (1797 images, bundled with sklearn), scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.from_numpy(d.images.astype(np.float32) / 16.0)[:, None]
    ids = [f"d{i:04d}" for i in range(len(x))]
    return ExampleSet(ids, x, torch.from_numpy(d.target), 10)


def build_dataset(spec: dict) -> ExampleSet:
    """Resolve a dataset spec: {"source": "synthetic"|"digits"|"path", ...}."""
    spec = dict(spec)
    source = spec.pop("source", "synthetic")
    if source == "synthetic":
        return make_synthetic(**spec)
    if source == "digits":
        return load_digits_set()
    if source == "path":
        return ExampleSet.load(spec["path"])
    raise DatasetError(f"unknown dataset source {source!r}")
