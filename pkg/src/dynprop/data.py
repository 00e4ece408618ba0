"""Synthetic scenes, deterministic rasterization, and dataset files.

A scene is a list of (class_id, box) pairs plus the seed it was grown from.
Object counts are uniform over {0..max_objects} so every proposal budget is
exercised equally.  Rasterization paints each object's pixel rectangle into
channel (class_id mod 3) and adds sigma=0.05 Gaussian noise derived from the
scene seed, so images regenerate identically from the dataset file alone.

File format: JSON lines, one scene per line
    {"seed":<u64>,"objects":[[class,x1,y1,x2,y2],...]}
with coordinates written to 6 fractional digits.  Scenes round their
coordinates to that precision at generation time, so write/read round-trips
are exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, iou
from .rng import LaneXoshiro, Xoshiro256pp, splitmix64_next

NUM_CLASSES = 3
MIN_SIDE = 0.08
MAX_SIDE = 0.35
MAX_PAIR_IOU = 0.3
NOISE_SIGMA = 0.05
FORMAT_VERSION = 1

_NOISE_SALT = 0xD1CE5EED


class DataError(Exception):
    """Raised for malformed or inconsistent dataset files."""


@dataclass
class Scene:
    objects: list[tuple[int, Box]]
    scene_seed: int

    @property
    def count(self) -> int:
        return len(self.objects)


@dataclass
class DatasetManifest:
    seed: int
    train_size: int
    val_size: int
    max_objects: int
    num_classes: int = NUM_CLASSES
    image_size: int = 64
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            raw = json.loads(text)
            return cls(**raw)
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"bad manifest: {e}") from e


def _round6(x: float) -> float:
    return float(f"{x:.6f}")


def generate_scene(rng_seed: int, max_objects: int) -> Scene:
    """Grow one scene from a seed.

    Count is uniform over {0..max_objects}; boxes are rejection-sampled until
    every pair overlaps with IoU <= MAX_PAIR_IOU.  After 1000 failed draws the
    scene is emitted with whatever was placed.
    """
    if max_objects < 1:
        raise ValueError(f"max_objects must be >= 1, got {max_objects}")
    rng = Xoshiro256pp(rng_seed)
    target = rng.randint(max_objects + 1)
    objects: list[tuple[int, Box]] = []
    tries = 0
    # draw sides a hair above the invariant floor so 6-decimal rounding can
    # never push a width/height below MIN_SIDE
    side_lo = MIN_SIDE + 1e-3
    while len(objects) < target and tries < 1000:
        tries += 1
        w = _round6(rng.uniform_range(side_lo, MAX_SIDE))
        h = _round6(rng.uniform_range(side_lo, MAX_SIDE))
        x1 = _round6(rng.uniform_range(0.0, 1.0 - w))
        y1 = _round6(rng.uniform_range(0.0, 1.0 - h))
        box = Box(x1, y1, _round6(x1 + w), _round6(y1 + h))
        if any(iou(box, other) > MAX_PAIR_IOU for _, other in objects):
            continue
        cls = rng.randint(NUM_CLASSES)
        objects.append((cls, box))
    return Scene(objects=objects, scene_seed=rng_seed & ((1 << 64) - 1))


def rasterize(scene: Scene, height: int = 64, width: int = 64) -> np.ndarray:
    """Deterministic [3 x H x W] float64 image for the scene.

    Objects fill channel (class mod 3) with 1.0 in list order (later objects
    overwrite), then scene-seeded Gaussian noise is added everywhere.
    """
    img = np.zeros((3, height, width), dtype=np.float64)
    for cls, box in scene.objects:
        px1 = max(0, int(np.floor(box.x1 * width)))
        px2 = min(width, int(np.ceil(box.x2 * width)))
        py1 = max(0, int(np.floor(box.y1 * height)))
        py2 = min(height, int(np.ceil(box.y2 * height)))
        img[cls % 3, py1:py2, px1:px2] = 1.0
    _, salt = splitmix64_next(scene.scene_seed ^ _NOISE_SALT)
    noise = LaneXoshiro(salt).normals(3 * height * width, scale=NOISE_SIGMA)
    img += noise.reshape(3, height, width)
    return img


def scene_to_line(scene: Scene) -> str:
    objs = ",".join(
        f"[{cls},{b.x1:.6f},{b.y1:.6f},{b.x2:.6f},{b.y2:.6f}]" for cls, b in scene.objects)
    return f'{{"seed":{scene.scene_seed},"objects":[{objs}]}}'


def line_to_scene(line: str, lineno: int) -> Scene:
    try:
        raw = json.loads(line)
        seed = int(raw["seed"])
        objects = []
        for entry in raw["objects"]:
            cls = int(entry[0])
            box = Box(float(entry[1]), float(entry[2]), float(entry[3]), float(entry[4]))
            if not box.is_valid():
                raise ValueError(f"invalid box {box}")
            objects.append((cls, box))
        return Scene(objects=objects, scene_seed=seed)
    except (json.JSONDecodeError, KeyError, ValueError, IndexError, TypeError) as e:
        raise DataError(f"malformed scene at line {lineno}: {e}") from e


def write_split(path: str, scenes: list[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(scene_to_line(scene) + "\n")


def read_split(path: str) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            scenes.append(line_to_scene(line, lineno))
    return scenes


@dataclass
class Dataset:
    """A split plus a rasterization cache keyed by scene seed."""

    scenes: list[Scene]
    image_size: int = 64
    _cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.scenes)

    def image(self, i: int) -> np.ndarray:
        scene = self.scenes[i]
        cached = self._cache.get(scene.scene_seed)
        if cached is None:
            cached = rasterize(scene, self.image_size, self.image_size)
            self._cache[scene.scene_seed] = cached
        return cached


def generate_dataset(out_dir: str, seed: int, train_size: int, val_size: int,
                     max_objects: int, image_size: int = 64, force: bool = False) -> DatasetManifest:
    """Write train/val JSONL splits plus a manifest; fully seed-determined."""
    os.makedirs(out_dir, exist_ok=True)
    existing = [f for f in os.listdir(out_dir) if not f.startswith(".")]
    if existing and not force:
        raise DataError(f"output dir {out_dir} is not empty (use force to overwrite)")
    seeder = Xoshiro256pp(seed)
    train = [generate_scene(seeder.next_u64(), max_objects) for _ in range(train_size)]
    val = [generate_scene(seeder.next_u64(), max_objects) for _ in range(val_size)]
    write_split(os.path.join(out_dir, "train.jsonl"), train)
    write_split(os.path.join(out_dir, "val.jsonl"), val)
    manifest = DatasetManifest(seed=seed, train_size=train_size, val_size=val_size,
                               max_objects=max_objects, image_size=image_size)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest


def load_dataset(data_dir: str, split: str) -> Dataset:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json in {data_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = DatasetManifest.from_json(fh.read())
    split_path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.exists(split_path):
        raise DataError(f"no {split}.jsonl in {data_dir}")
    return Dataset(scenes=read_split(split_path), image_size=manifest.image_size)
