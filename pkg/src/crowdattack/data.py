"""Synthetic crowd scenes, ground-truth density rendering and dataset I/O.

Images are H x W x 3 float32 arrays in [0, 1]. Point annotations are
``(x, y)`` pixel coordinates with pixel ``j`` covering ``[j, j + 1)``.
On disk a split lives under ``<root>/<split>/`` as ``images/<id>.png`` plus a
single ``annotations.json`` mapping id -> list of ``[x, y]``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom
from scipy.special import ndtr

from .errors import ConfigError, DataError

SPLITS = ("train", "test")
ANNOTATION_FILE = "annotations.json"


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class PointAnnotation:
    points: np.ndarray  # (N, 2) float64, columns x, y

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def check_bounds(self, height: int, width: int, scene_id: str = "") -> None:
        if self.count == 0:
            return
        x, y = self.points[:, 0], self.points[:, 1]
        bad = ~((x >= 0) & (x < width) & (y >= 0) & (y < height) & np.isfinite(x) & np.isfinite(y))
        if bad.any():
            where = f" in scene {scene_id!r}" if scene_id else ""
            raise DataError(f"{int(bad.sum())} point(s) outside the {width}x{height} image{where}: "
                            f"first {self.points[bad][0].tolist()}")

    def __eq__(self, other):
        return isinstance(other, PointAnnotation) and np.array_equal(self.points, other.points)


@dataclass(frozen=True, eq=False)
class Scene:
    image: np.ndarray
    annotation: PointAnnotation
    id: str

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise DataError(f"scene {self.id!r}: image must be H x W x 3, got {img.shape}")
        if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
            raise DataError(f"scene {self.id!r}: image values must lie in [0, 1]")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)
        self.annotation.check_bounds(img.shape[0], img.shape[1], self.id)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def count(self) -> int:
        return self.annotation.count

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.id == other.id
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and self.annotation == other.annotation)


@dataclass(frozen=True, eq=False)
class Dataset:
    scenes: tuple[Scene, ...] = field(default_factory=tuple)
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        object.__setattr__(self, "scenes", tuple(self.scenes))
        ids = [s.id for s in self.scenes]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise DataError(f"duplicate scene ids in split {self.split}: {dup}")

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.split == other.split
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.scenes, other.scenes)))

    def counts(self) -> np.ndarray:
        return np.array([s.count for s in self.scenes], dtype=np.int64)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.split.encode())
        for s in self.scenes:
            h.update(s.id.encode())
            h.update(to_uint8(s.image).tobytes())
            h.update(s.annotation.points.tobytes())
        return h.hexdigest()


def _sample_points(rng: np.random.Generator, n: int, height: int, width: int,
                   min_dist: float, margin: float) -> np.ndarray:
    pts = np.empty((n, 2))
    k = 0
    tries = 0
    while k < n:
        cand = rng.uniform((margin, margin), (width - margin, height - margin))
        tries += 1
        if k and min_dist > 0 and tries < 200 * n:
            d2 = ((pts[:k] - cand) ** 2).sum(axis=1)
            if d2.min() < min_dist ** 2:
                continue
        pts[k] = cand
        k += 1
    return pts


HEAD_DEPTH = (0.08, 0.14)


def generate_scene(num_points: int, height: int, width: int, blob_sigma: float, seed: int,
                   scene_id: str | None = None, head_depth: tuple[float, float] = HEAD_DEPTH) -> Scene:
    """Render a synthetic crowd scene.

    The background is smooth low-frequency colour noise with faint pixel
    grain; each person is a dark, slightly elliptical Gaussian blob whose
    size and depth are jittered per blob. The output is quantised to 8-bit
    levels so that a save/load round trip is exact.
    """
    if num_points < 0:
        raise ConfigError(f"num_points must be >= 0, got {num_points}")
    if height < 32 or width < 32:
        raise ConfigError(f"image dimensions must be at least 32x32, got {height}x{width}")
    if not blob_sigma > 0:
        raise ConfigError(f"blob_sigma must be positive, got {blob_sigma}")

    rng = np.random.default_rng(seed)
    gh, gw = max(2, height // 16), max(2, width // 16)
    coarse = rng.normal(0.0, 1.0, size=(gh, gw, 3))
    smooth = zoom(coarse, (height / gh, width / gw, 1), order=3, mode="reflect")[:height, :width]
    base = rng.uniform(0.5, 0.65) + rng.uniform(-0.04, 0.04, size=3)
    image = base + 0.05 * smooth + rng.normal(0.0, 0.01, size=(height, width, 3))

    margin = min(2.0, blob_sigma)
    pts = _sample_points(rng, num_points, height, width, min_dist=2.0 * blob_sigma, margin=margin)
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    r = int(np.ceil(4 * blob_sigma * 1.3)) + 1
    for x, y in pts:
        sx, sy = blob_sigma * rng.uniform(0.85, 1.15, size=2)
        depth = rng.uniform(*head_depth)
        tint = 1.0 + rng.uniform(-0.1, 0.1, size=3)
        i0, i1 = max(0, int(y) - r), min(height, int(y) + r + 1)
        j0, j1 = max(0, int(x) - r), min(width, int(x) + r + 1)
        gy = np.exp(-0.5 * ((ys[i0:i1] - y) / sy) ** 2)
        gx = np.exp(-0.5 * ((xs[j0:j1] - x) / sx) ** 2)
        image[i0:i1, j0:j1] -= depth * np.outer(gy, gx)[:, :, None] * tint

    image = from_uint8(to_uint8(np.clip(image, 0.0, 1.0)))
    sid = scene_id if scene_id is not None else f"synth-{seed}-{num_points}"
    return Scene(image=image, annotation=PointAnnotation(pts), id=sid)


def render_density(annotation: PointAnnotation, height: int, width: int,
                   kernel_sigma: float) -> np.ndarray:
    """Ground-truth density: one pixel-integrated unit Gaussian per point.

    Each pixel receives the Gaussian mass over its own square, so the map
    sums to the count up to the mass falling outside the image.
    """
    if not kernel_sigma > 0:
        raise ConfigError(f"kernel_sigma must be positive, got {kernel_sigma}")
    annotation.check_bounds(height, width)
    density = np.zeros((height, width), dtype=np.float64)
    if annotation.count == 0:
        return density.astype(np.float32)
    edges_y = np.arange(height + 1, dtype=np.float64)
    edges_x = np.arange(width + 1, dtype=np.float64)
    for x, y in annotation.points:
        my = np.diff(ndtr((edges_y - y) / kernel_sigma))
        mx = np.diff(ndtr((edges_x - x) / kernel_sigma))
        density += np.outer(my, mx)
    return density.astype(np.float32)


def downsample_density(density: np.ndarray, stride: int) -> np.ndarray:
    """Sum-pool a density map by ``stride`` (count preserving)."""
    h, w = density.shape
    if h % stride or w % stride:
        raise DataError(f"density map {h}x{w} not divisible by stride {stride}")
    return density.reshape(h // stride, stride, w // stride, stride).sum(axis=(1, 3))


def resize_scene(scene: Scene, height: int, width: int) -> Scene:
    if (scene.height, scene.width) == (height, width):
        return scene
    img = Image.fromarray(to_uint8(scene.image)).resize((width, height), Image.BILINEAR)
    pts = scene.annotation.points * np.array([width / scene.width, height / scene.height])
    pts = np.minimum(pts, np.array([width, height]) - 1e-6)
    return Scene(image=from_uint8(np.asarray(img)), annotation=PointAnnotation(pts), id=scene.id)


def generate_dataset(num_scenes: int, split: str, height: int = 128, width: int = 128,
                     min_count: int = 20, max_count: int = 130, blob_sigma: float = 2.0,
                     seed: int = 0, head_depth: tuple[float, float] = HEAD_DEPTH) -> Dataset:
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    counts = rng.integers(min_count, max_count + 1, size=num_scenes)
    seeds = rng.integers(0, 2**31 - 1, size=num_scenes)
    scenes = [generate_scene(int(c), height, width, blob_sigma, int(s), scene_id=f"{split}_{i:04d}",
                             head_depth=head_depth)
              for i, (c, s) in enumerate(zip(counts, seeds))]
    return Dataset(scenes=tuple(scenes), split=split)


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    split_dir = Path(root) / ds.split
    img_dir = split_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    annotations = {}
    for scene in ds:
        Image.fromarray(to_uint8(scene.image), mode="RGB").save(img_dir / f"{scene.id}.png")
        annotations[scene.id] = scene.annotation.points.tolist()
    _atomic_write_bytes(split_dir / ANNOTATION_FILE,
                        json.dumps(annotations, indent=1, sort_keys=True).encode())
    return split_dir


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if im.mode.startswith("I;16") or arr.max() > 255 else 255.0
            gray = np.clip(arr / scale, 0, 1).astype(np.float32)
            return np.repeat(gray[:, :, None], 3, axis=2)
        return from_uint8(np.asarray(im.convert("RGB")))


def _parse_points(raw, scene_id: str) -> np.ndarray:
    try:
        pts = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"malformed annotation for scene {scene_id!r}: {exc}") from exc
    if pts.size == 0:
        return pts.reshape(0, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError(f"malformed annotation for scene {scene_id!r}: expected a list of [x, y] pairs")
    return pts


def load_dataset(root: str | Path, split: str = "train") -> Dataset:
    """Load one split; a missing or empty split directory yields an empty dataset."""
    split_dir = Path(root) / split
    img_dir = split_dir / "images"
    images = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    ann_path = split_dir / ANNOTATION_FILE
    if not ann_path.exists():
        if images:
            raise DataError(f"missing annotations for scene(s): {', '.join(p.stem for p in images)}")
        return Dataset(scenes=(), split=split)
    try:
        annotations = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{ann_path} is not valid JSON: {exc}") from exc
    if not isinstance(annotations, dict):
        raise DataError(f"{ann_path} must map scene id to a list of points")
    ids = [p.stem for p in images]
    missing = [i for i in ids if i not in annotations]
    if missing:
        raise DataError(f"missing annotations for scene(s): {', '.join(missing)}")
    orphan = sorted(set(annotations) - set(ids))
    if orphan:
        raise DataError(f"annotations without an image: {', '.join(orphan)}")
    scenes = []
    for path in images:
        pts = _parse_points(annotations[path.stem], path.stem)
        scenes.append(Scene(image=_read_image(path), annotation=PointAnnotation(pts), id=path.stem))
    return Dataset(scenes=tuple(scenes), split=split)
