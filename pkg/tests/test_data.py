import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from crowdattack.data import (
    Dataset, PointAnnotation, Scene, downsample_density, from_uint8, generate_dataset, generate_scene,
    load_dataset, render_density, resize_scene, save_dataset, to_uint8,
)
from crowdattack.errors import ConfigError, DataError


def test_generate_scene_shapes_and_range():
    s = generate_scene(25, 64, 48, 2.0, seed=3)
    assert s.image.shape == (64, 48, 3) and s.image.dtype == np.float32
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert s.count == 25
    pts = s.annotation.points
    assert (pts[:, 0] >= 0).all() and (pts[:, 0] < 48).all()
    assert (pts[:, 1] >= 0).all() and (pts[:, 1] < 64).all()


def test_generate_scene_is_seeded():
    a = generate_scene(10, 32, 32, 2.0, seed=5)
    b = generate_scene(10, 32, 32, 2.0, seed=5)
    c = generate_scene(10, 32, 32, 2.0, seed=6)
    assert a == b
    assert not np.array_equal(a.image, c.image)


def test_generate_scene_is_already_8bit():
    s = generate_scene(10, 32, 32, 2.0, seed=1)
    assert np.array_equal(from_uint8(to_uint8(s.image)), s.image)


def test_empty_scene_and_bad_args():
    s = generate_scene(0, 32, 32, 2.0, seed=0)
    assert s.count == 0
    with pytest.raises(ConfigError):
        generate_scene(-1, 32, 32, 2.0, seed=0)
    with pytest.raises(ConfigError):
        generate_scene(5, 0, 32, 2.0, seed=0)


def test_heads_are_darker_than_background():
    s = generate_scene(30, 96, 96, 2.0, seed=2)
    lum = s.image.mean(axis=2)
    pts = np.rint(s.annotation.points).astype(int)
    on = lum[np.clip(pts[:, 1], 0, 95), np.clip(pts[:, 0], 0, 95)].mean()
    assert on < lum.mean() - 0.03


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 40), st.floats(1.0, 4.0), st.integers(0, 10_000))
def test_density_integrates_to_count(n, sigma, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(8, 56, size=(n, 2))
    d = render_density(PointAnnotation(pts), 64, 64, sigma)
    assert d.min() >= 0
    assert abs(d.sum() - n) <= 0.01 * n + 0.01
    assert downsample_density(d, 4).sum() == pytest.approx(d.sum(), rel=1e-6, abs=1e-9)


def test_single_interior_point_integrates_to_one():
    d = render_density(PointAnnotation(np.array([[32.0, 32.0]])), 64, 64, 3.0)
    assert d.sum() == pytest.approx(1.0, abs=1e-3)


def test_render_density_rejects_out_of_bounds():
    with pytest.raises(DataError):
        render_density(PointAnnotation(np.array([[70.0, 3.0]])), 64, 64, 2.0)


def test_scene_validation():
    with pytest.raises(DataError):
        Scene(np.full((8, 8, 3), 1.5, np.float32), PointAnnotation(np.zeros((0, 2))), "x")
    with pytest.raises(DataError):
        Scene(np.zeros((8, 8), np.float32), PointAnnotation(np.zeros((0, 2))), "x")


def test_dataset_unique_ids():
    s = generate_scene(3, 32, 32, 2.0, seed=0, scene_id="a")
    with pytest.raises(DataError):
        Dataset((s, s), "train")


def test_generate_dataset_counts_in_range():
    ds = generate_dataset(6, "test", 32, 32, min_count=3, max_count=9, seed=1)
    assert len(ds) == 6 and ds.split == "test"
    assert all(3 <= c <= 9 for c in ds.counts())
    assert [s.id for s in ds] == [f"test_{i:04d}" for i in range(6)]
    assert ds.fingerprint() == generate_dataset(6, "test", 32, 32, min_count=3, max_count=9, seed=1).fingerprint()


def test_save_load_roundtrip(tmp_path):
    ds = generate_dataset(3, "train", 32, 32, min_count=2, max_count=6, seed=4)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, "train")
    assert back == ds


def test_load_missing_split_is_empty(tmp_path):
    assert len(load_dataset(tmp_path, "test")) == 0


def test_load_missing_annotation_names_scene(tmp_path):
    ds = generate_dataset(2, "train", 32, 32, min_count=1, max_count=3, seed=0)
    save_dataset(ds, tmp_path)
    ann = tmp_path / "train" / "annotations.json"
    data = json.loads(ann.read_text())
    del data["train_0001"]
    ann.write_text(json.dumps(data))
    with pytest.raises(DataError, match="train_0001"):
        load_dataset(tmp_path, "train")


def test_load_malformed_points(tmp_path):
    ds = generate_dataset(1, "train", 32, 32, min_count=1, max_count=3, seed=0)
    save_dataset(ds, tmp_path)
    (tmp_path / "train" / "annotations.json").write_text(json.dumps({"train_0000": [[1, 2, 3]]}))
    with pytest.raises(DataError, match="train_0000"):
        load_dataset(tmp_path, "train")


def test_load_orphan_annotation(tmp_path):
    ds = generate_dataset(1, "train", 32, 32, min_count=1, max_count=3, seed=0)
    save_dataset(ds, tmp_path)
    ann = tmp_path / "train" / "annotations.json"
    data = json.loads(ann.read_text())
    data["ghost"] = []
    ann.write_text(json.dumps(data))
    with pytest.raises(DataError, match="ghost"):
        load_dataset(tmp_path, "train")


def test_load_out_of_bounds_points(tmp_path):
    ds = generate_dataset(1, "train", 32, 32, min_count=1, max_count=3, seed=0)
    save_dataset(ds, tmp_path)
    (tmp_path / "train" / "annotations.json").write_text(json.dumps({"train_0000": [[40.0, 2.0]]}))
    with pytest.raises(DataError):
        load_dataset(tmp_path, "train")


def test_load_16bit_image(tmp_path):
    img_dir = tmp_path / "train" / "images"
    img_dir.mkdir(parents=True)
    arr = np.full((8, 8), 65535, dtype=np.uint16)
    Image.fromarray(arr).save(img_dir / "s.png")
    (tmp_path / "train" / "annotations.json").write_text(json.dumps({"s": []}))
    ds = load_dataset(tmp_path, "train")
    assert ds[0].image.shape == (8, 8, 3)
    assert ds[0].image.max() == pytest.approx(1.0)


def test_resize_scene_scales_points():
    s = generate_scene(5, 32, 32, 2.0, seed=0)
    r = resize_scene(s, 64, 64)
    assert r.image.shape == (64, 64, 3)
    assert np.allclose(r.annotation.points, s.annotation.points * 2, atol=1.0)
    assert r.count == s.count
