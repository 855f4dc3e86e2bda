"""Deterministic synthetic dual-modality detection scenes.

Each sample is a pair of single-channel 96x96 images of the same scene.
Modality 1 renders objects as filled textured shapes on a flat background;
modality 2 renders soft blurred intensity silhouettes, the kind of signature
a thermal sensor would give.  A quality profile degrades each modality with
additive noise, contrast compression, and per-object dropout, which is what
makes one modality "weak": the same scene, less signal.

Every sample is a pure function of (spec.seed, index), so datasets replay
bit-exactly and generation parallelizes trivially.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import tensorio

DATASET_FORMAT_VERSION = 1

RECTANGLE, DISC, TRIANGLE = 0, 1, 2
CLASS_NAMES = ("rectangle", "disc", "triangle")

# size bands matched to the detector's pyramid strides: an object is tagged
# small/medium/large by max side length at generation time
SIZE_BANDS = ((10.0, 24.0), (25.0, 48.0), (49.0, 80.0))

__all__ = [
    "SceneSpec",
    "ModalityProfile",
    "ModalitySample",
    "DatasetError",
    "generate_sample",
    "write_dataset",
    "read_dataset",
    "DatasetHandle",
]


class DatasetError(IOError):
    """Missing, corrupt, or incompatible dataset directory."""


@dataclass(frozen=True)
class SceneSpec:
    """Geometry of the scene distribution; seed pins the whole dataset."""

    image_size: int = 96
    object_count_range: tuple = (1, 4)
    class_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 32 != 0:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        lo, hi = self.object_count_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad object_count_range {self.object_count_range}")
        if not 1 <= self.class_count <= len(CLASS_NAMES):
            raise ValueError(f"class_count must be in [1, {len(CLASS_NAMES)}]")


@dataclass(frozen=True)
class ModalityProfile:
    """Degradation knobs for one modality.

    quality is the single dial the experiments turn; the derived knobs are a
    fixed linear ramp chosen so quality 1.0 means pristine and quality 0.4
    gives noise 0.25, contrast 0.5, dropout 0.15.
    """

    quality: float
    noise_sigma: float
    contrast: float
    dropout_prob: float

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality must be in [0,1], got {self.quality}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError("contrast must be in (0,1]")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must be in [0,1]")

    @classmethod
    def from_quality(cls, quality: float) -> "ModalityProfile":
        fade = 1.0 - quality
        return cls(
            quality=quality,
            noise_sigma=fade * 0.25 / 0.6,
            contrast=1.0 - fade * 0.5 / 0.6,
            dropout_prob=fade * 0.25,
        )


@dataclass
class ModalitySample:
    """One scene: two aligned images plus shared box annotations.

    Boxes are (cx, cy, w, h) in pixels, centers inside the image; visibility
    flags say which modalities actually rendered each object.
    """

    image_m1: np.ndarray
    image_m2: np.ndarray
    boxes: list
    classes: list
    visibility: list


def _shape_mask(class_id, cx, cy, w, h, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if class_id == RECTANGLE:
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    if class_id == DISC:
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    if class_id == TRIANGLE:
        # isoceles: apex at top-center, base at the bottom edge of the box
        inside_y = (yy >= cy - h / 2) & (yy <= cy + h / 2)
        frac = np.clip((yy - (cy - h / 2)) / h, 0.0, 1.0)
        return inside_y & (np.abs(xx - cx) <= frac * w / 2)
    raise ValueError(f"unknown class id {class_id}")


def _degrade(image, profile: ModalityProfile, rng):
    out = 0.5 + profile.contrast * (image - 0.5)
    if profile.noise_sigma > 0:
        out = out + rng.normal(0.0, profile.noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def generate_sample(spec: SceneSpec, p1: ModalityProfile, p2: ModalityProfile,
                    index: int) -> ModalitySample:
    """Render scene ``index``; bit-identical across calls."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    lo, hi = spec.object_count_range
    count = int(rng.integers(lo, hi + 1))

    boxes, classes, visibility, intensities = [], [], [], []
    for _ in range(count):
        class_id = int(rng.integers(0, spec.class_count))
        band_lo, band_hi = SIZE_BANDS[int(rng.integers(0, len(SIZE_BANDS)))]
        long_side = rng.uniform(band_lo, min(band_hi, size - 8))
        short_side = long_side * rng.uniform(0.55, 1.0)
        if rng.integers(0, 2):
            w, h = long_side, short_side
        else:
            w, h = short_side, long_side
        cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
        cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)

        seen_m1 = bool(rng.uniform() >= p1.dropout_prob)
        seen_m2 = bool(rng.uniform() >= p2.dropout_prob)
        if not (seen_m1 or seen_m2):
            # every object must exist somewhere; give it to one modality
            if rng.integers(0, 2):
                seen_m1 = True
            else:
                seen_m2 = True

        boxes.append((float(cx), float(cy), float(w), float(h)))
        classes.append(class_id)
        visibility.append((seen_m1, seen_m2))
        intensities.append(float(rng.uniform(0.55, 0.95)))

    img1 = np.full((size, size), 0.15)
    img2 = np.full((size, size), 0.15)
    for (cx, cy, w, h), class_id, (seen_m1, seen_m2), level in zip(
            boxes, classes, visibility, intensities):
        mask = _shape_mask(class_id, cx, cy, w, h, size)
        texture = rng.normal(0.0, 0.08, size=(size, size))
        if seen_m1:
            img1[mask] = np.clip(level + texture[mask], 0.0, 1.0)
        if seen_m2:
            blob = np.where(mask, level, 0.0)
            img2 = np.maximum(img2, ndimage.gaussian_filter(blob, sigma=1.5))

    img1 = _degrade(img1, p1, rng)
    img2 = _degrade(img2, p2, rng)
    return ModalitySample(img1, img2, boxes, classes, visibility)


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------


def _sample_basename(index: int) -> str:
    return f"sample_{index:05d}"


def _write_one(args):
    directory, spec, p1, p2, index = args
    sample = generate_sample(spec, p1, p2, index)
    base = os.path.join(directory, _sample_basename(index))
    tensorio.write_tensors(base + ".tensors",
                           {"image_m1": sample.image_m1, "image_m2": sample.image_m2})
    with open(base + ".json", "w") as fh:
        json.dump(
            {
                "boxes": [list(b) for b in sample.boxes],
                "classes": sample.classes,
                "visibility": [list(v) for v in sample.visibility],
            },
            fh,
        )
    return (
        _sample_basename(index),
        tensorio.file_checksum(base + ".tensors"),
        tensorio.file_checksum(base + ".json"),
    )


def write_dataset(directory, spec: SceneSpec, p1: ModalityProfile,
                  p2: ModalityProfile, count: int, workers: int = 1):
    """Generate ``count`` samples into ``directory`` plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    jobs = [(directory, spec, p1, p2, i) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_write_one, jobs))
    else:
        rows = [_write_one(job) for job in jobs]

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": asdict(spec),
        "profiles": {"m1": asdict(p1), "m2": asdict(p2)},
        "count": count,
        "checksums": {
            base: {"tensors": t_sum, "annotations": a_sum}
            for base, t_sum, a_sum in rows
        },
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


class DatasetHandle:
    """Read access to a written dataset directory."""

    def __init__(self, directory, manifest):
        self.directory = directory
        self.manifest = manifest
        self.spec = SceneSpec(
            image_size=manifest["spec"]["image_size"],
            object_count_range=tuple(manifest["spec"]["object_count_range"]),
            class_count=manifest["spec"]["class_count"],
            seed=manifest["spec"]["seed"],
        )
        self.profiles = {
            key: ModalityProfile(**value)
            for key, value in manifest["profiles"].items()
        }

    def __len__(self):
        return self.manifest["count"]

    def load(self, index: int) -> ModalitySample:
        if not 0 <= index < len(self):
            raise DatasetError(f"sample index {index} out of range [0, {len(self)})")
        base = os.path.join(self.directory, _sample_basename(index))
        try:
            tensors = tensorio.read_tensors(base + ".tensors")
            with open(base + ".json") as fh:
                ann = json.load(fh)
        except FileNotFoundError as exc:
            raise DatasetError(f"missing sample file: {exc.filename}") from exc
        except tensorio.TensorFileError as exc:
            raise DatasetError(str(exc)) from exc
        return ModalitySample(
            image_m1=tensors["image_m1"],
            image_m2=tensors["image_m2"],
            boxes=[tuple(b) for b in ann["boxes"]],
            classes=list(ann["classes"]),
            visibility=[tuple(v) for v in ann["visibility"]],
        )

    def load_all(self) -> list:
        return [self.load(i) for i in range(len(self))]

    def verify_checksums(self):
        """Recompute every file checksum against the manifest; raise on drift."""
        for base, sums in self.manifest["checksums"].items():
            t_path = os.path.join(self.directory, base + ".tensors")
            a_path = os.path.join(self.directory, base + ".json")
            if tensorio.file_checksum(t_path) != sums["tensors"]:
                raise DatasetError(f"checksum mismatch: {t_path}")
            if tensorio.file_checksum(a_path) != sums["annotations"]:
                raise DatasetError(f"checksum mismatch: {a_path}")


def read_dataset(directory) -> DatasetHandle:
    """Open a dataset directory, validating its manifest version."""
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"no dataset manifest at {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"{manifest_path}: format version {version}, "
            f"expected {DATASET_FORMAT_VERSION}"
        )
    return DatasetHandle(directory, manifest)
