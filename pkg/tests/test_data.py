import numpy as np
import pytest
import torch
from PIL import Image

from memfab.data import DatasetError, ExampleSet, LabeledExample, build_dataset, load_image_folder, make_synthetic


def test_synthetic_shape_and_range():
    ds = make_synthetic(50, image_size=8, seed=0)
    assert ds.x.shape == (50, 3, 8, 8)
    assert 0 <= ds.x.min() and ds.x.max() <= 1
    assert set(ds.y.tolist()) <= set(range(10))
    assert torch.equal(ds.x, make_synthetic(50, image_size=8, seed=0).x)
    assert not torch.equal(ds.x, make_synthetic(50, image_size=8, seed=1).x)


def test_example_validation():
    with pytest.raises(DatasetError):
        LabeledExample("a", torch.full((1, 2, 2), 1.5), 0)
    with pytest.raises(DatasetError):
        LabeledExample("a", torch.zeros(2, 2), 0)
    with pytest.raises(DatasetError):
        ExampleSet(["a", "a"], torch.zeros(2, 1, 2, 2), torch.zeros(2), 2)
    with pytest.raises(DatasetError):
        ExampleSet(["a"], torch.zeros(1, 1, 2, 2), torch.tensor([3]), 2)


def test_subset_and_lookup():
    ds = make_synthetic(20, image_size=4, seed=0)
    sub = ds.subset(["s00003", "s00007"])
    assert sub.ids == ["s00003", "s00007"]
    assert torch.equal(sub.x[1], ds["s00007"].x)
    with pytest.raises(DatasetError):
        ds.indices(["nope"])


def test_npz_roundtrip(tmp_path):
    ds = make_synthetic(12, image_size=4, seed=2)
    back = ExampleSet.load(ds.save(tmp_path / "d.npz"))
    assert back.ids == ds.ids and torch.equal(back.x, ds.x) and torch.equal(back.y, ds.y)


def test_image_folder(tmp_path):
    rng = np.random.default_rng(0)
    for c in (0, 1):
        (tmp_path / str(c)).mkdir()
        for i in range(3):
            arr = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / str(c) / f"im{c}{i}.png")
    ds = load_image_folder(tmp_path)
    assert len(ds) == 6 and ds.n_classes == 2 and ds.input_shape == (3, 5, 5)
    assert 0 <= ds.x.min() and ds.x.max() <= 1


def test_build_dataset_sources():
    assert len(build_dataset({"source": "synthetic", "n": 30, "image_size": 4})) == 30
    digits = build_dataset({"source": "digits"})
    assert digits.input_shape == (1, 8, 8) and digits.n_classes == 10
