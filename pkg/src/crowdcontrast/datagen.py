"""Synthetic weather-imbalanced crowd scenes with point annotations.

Scenes are head-like Gaussian blobs on a multi-octave value-noise background.
A weather corruption (haze / rain / snow) is applied on top with a per-image
severity. Everything derives from ``numpy`` Generators seeded per image, so a
dataset is a pure function of its spec.

On-disk layout written by :func:`generate_dataset`::

    <out>/manifest.json          index of {image_index, image, annotation, weather, split}
    <out>/images/000042.png      lossless 8-bit RGB
    <out>/ann/000042.json        {"points": [[x, y], ...]} in pixel coordinates
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import WEATHER_CLASSES, DatasetSpec

MANIFEST_FORMAT = "crowdcontrast-dataset-v1"

BLOB_RADIUS = (3.0, 6.0)
BLOB_MARGIN = 8.0


@dataclass
class CrowdSample:
    """One crowd image with head-point annotations and a weather label."""

    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    points: np.ndarray           # (N, 2) float64 (x, y) pixel coordinates
    weather: int
    image_index: int
    split: str = "train"


def _bilerp(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly upsample a (n+1, n+1) lattice to (size, size)."""
    n = grid.shape[0] - 1
    c = np.linspace(0.0, n, size, endpoint=False)
    i0 = np.floor(c).astype(int)
    f = c - i0
    i1 = np.minimum(i0 + 1, n)
    rows = grid[i0, :] * (1.0 - f)[:, None] + grid[i1, :] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i1] * f[None, :]


def _value_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0, 1], coarse structure dominating."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for octave in range(octaves):
        cells = 4 * 2 ** octave
        lattice = rng.random((cells + 1, cells + 1))
        out += amp * _bilerp(lattice, size)
        total += amp
        amp *= 0.5
    return out / total


def _render_blob(img: np.ndarray, x: float, y: float, radius: float, amp: float) -> None:
    """Subtract a Gaussian-profile dark blob in place (heads read darker)."""
    h, w = img.shape[:2]
    sigma = radius / 2.0
    r = int(np.ceil(3 * sigma))
    y0, y1 = max(0, int(y) - r), min(h, int(y) + r + 1)
    x0, x1 = max(0, int(x) - r), min(w, int(x) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    bump = amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    img[y0:y1, x0:x1] -= bump[..., None]


def _haze(img: np.ndarray, severity: float) -> np.ndarray:
    # blend toward flat gray; variance shrinks by (1 - 0.6 s)^2
    alpha = 0.6 * severity
    return (1.0 - alpha) * img + alpha * 0.7


def _rain(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    n_streaks = int(round(severity * h * w / 160.0))
    angle = np.deg2rad(rng.uniform(68.0, 82.0))
    dx, dy = np.cos(angle), np.sin(angle)
    overlay = np.zeros((h, w))
    if n_streaks > 0:
        starts_x = rng.uniform(0, w, size=n_streaks)
        starts_y = rng.uniform(0, h, size=n_streaks)
        lengths = rng.uniform(6.0, 14.0, size=n_streaks)
        for sx, sy, length in zip(starts_x, starts_y, lengths):
            t = np.arange(0.0, length, 0.5)
            xi = np.round(sx + t * dx).astype(int)
            yi = np.round(sy + t * dy).astype(int)
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            overlay[yi[ok], xi[ok]] = 0.45
    dimmed = img * (1.0 - 0.25 * severity)
    return dimmed * (1.0 - overlay[..., None]) + 0.80 * overlay[..., None]


def _snow(img: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    n_flakes = int(round(severity * h * w / 110.0))
    veiled = (1.0 - 0.2 * severity) * img + 0.2 * severity * 0.85
    overlay = np.zeros((h, w))
    if n_flakes > 0:
        cx = rng.uniform(1.0, w - 1.0, size=n_flakes)
        cy = rng.uniform(1.0, h - 1.0, size=n_flakes)
        radii = rng.uniform(0.6, 1.4, size=n_flakes)
        for x, y, r in zip(cx, cy, radii):
            y0, y1 = max(0, int(y) - 2, ), min(h, int(y) + 3)
            x0, x1 = max(0, int(x) - 2), min(w, int(x) + 3)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            dot = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * (r / 1.5) ** 2))
            np.maximum.at(overlay, (slice(y0, y1), slice(x0, x1)), 0.9 * dot)
    return veiled * (1.0 - overlay[..., None]) + 0.95 * overlay[..., None]


def apply_weather(
    image: np.ndarray,
    weather: int,
    severity: float,
    rng: np.random.Generator | None = None,
    classes: tuple[str, ...] | None = None,
) -> np.ndarray:
    """Corrupt an image in [0, 1] with the given weather class and severity.

    Severity 0 returns the input unchanged for every class; the normal class
    is always the identity. Rain and snow place their overlays with ``rng``
    (a fresh default generator if omitted).
    """
    names = classes if classes is not None else WEATHER_CLASSES
    if not (0 <= weather < len(names)):
        raise ValueError(f"unknown weather class id {weather}")
    name = names[weather]
    if name not in ("normal", "haze", "rain", "snow"):
        raise ValueError(f"no corruption registered for class {name!r}")
    if name == "normal" or severity == 0.0:
        return image.copy()
    if rng is None:
        rng = np.random.default_rng(0)
    if name == "haze":
        out = _haze(image, severity)
    elif name == "rain":
        out = _rain(image, severity, rng)
    else:
        out = _snow(image, severity, rng)
    return np.clip(out, 0.0, 1.0)


def generate_scene(
    rng_seed: int | tuple,
    spec: DatasetSpec,
    weather: int,
    image_index: int = 0,
    split: str = "train",
) -> CrowdSample:
    """Render one synthetic crowd scene, deterministic in ``rng_seed``."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    size = spec.image_size

    base = _value_noise(rng, size)
    img = np.empty((size, size, 3))
    # slight warm tint so channels are not identical
    for ch, gain in enumerate((1.0, 0.97, 0.93)):
        img[..., ch] = 0.35 + 0.38 * base * gain

    lo, hi = spec.count_range
    n_heads = int(rng.integers(lo, hi + 1))
    xs = rng.uniform(BLOB_MARGIN, size - BLOB_MARGIN, size=n_heads)
    ys = rng.uniform(BLOB_MARGIN, size - BLOB_MARGIN, size=n_heads)
    radii = rng.uniform(*BLOB_RADIUS, size=n_heads)
    amps = rng.uniform(0.25, 0.45, size=n_heads)
    for x, y, r, a in zip(xs, ys, radii, amps):
        _render_blob(img, x, y, r, a)
    img = np.clip(img, 0.0, 1.0)

    severity = float(rng.uniform(*spec.severity_range_for(weather)))
    img = apply_weather(img, weather, severity, rng=rng, classes=spec.classes)

    points = np.stack([xs, ys], axis=1) if n_heads else np.zeros((0, 2))
    return CrowdSample(
        image=img.astype(np.float32),
        points=points,
        weather=weather,
        image_index=image_index,
        split=split,
    )


def _split_plan(spec: DatasetSpec) -> list[tuple[str, int]]:
    plan = [("train", w) for w, n in enumerate(spec.counts) for _ in range(n)]
    if spec.test_counts is not None:
        plan += [("test", w) for w, n in enumerate(spec.test_counts) for _ in range(n)]
    return plan


def generate_dataset(spec: DatasetSpec, out_path: str | Path) -> dict:
    """Write a full dataset to ``out_path`` and return its manifest dict."""
    spec.validate()
    root = Path(out_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "ann").mkdir(parents=True, exist_ok=True)

    entries = []
    for image_index, (split, weather) in enumerate(_split_plan(spec)):
        sample = generate_scene((spec.seed, image_index), spec, weather,
                                image_index=image_index, split=split)
        img_rel = f"images/{image_index:06d}.png"
        ann_rel = f"ann/{image_index:06d}.json"
        img_u8 = np.round(sample.image * 255.0).astype(np.uint8)
        Image.fromarray(img_u8, mode="RGB").save(root / img_rel)
        with open(root / ann_rel, "w", encoding="utf-8") as fh:
            json.dump({"points": [[float(x), float(y)] for x, y in sample.points]}, fh)
        entries.append({
            "image_index": image_index,
            "image": img_rel,
            "annotation": ann_rel,
            "weather": weather,
            "split": split,
        })

    manifest = {
        "format": MANIFEST_FORMAT,
        "classes": list(spec.classes),
        "image_size": spec.image_size,
        "seed": spec.seed,
        "entries": entries,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class DiskDataset:
    """Dataset loaded back from the on-disk layout, images decoded eagerly."""

    root: Path
    classes: tuple[str, ...]
    image_size: int
    samples: list[CrowdSample] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[CrowdSample]:
        return [s for s in self.samples if s.split == name]


def load_dataset(root: str | Path) -> DiskDataset:
    root = Path(root)
    with open(root / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unrecognized manifest format in {root / 'manifest.json'}")

    samples = []
    for entry in manifest["entries"]:
        img = np.asarray(Image.open(root / entry["image"]).convert("RGB"))
        with open(root / entry["annotation"], "r", encoding="utf-8") as fh:
            points = np.asarray(json.load(fh)["points"], dtype=np.float64).reshape(-1, 2)
        samples.append(CrowdSample(
            image=img.astype(np.float32) / 255.0,
            points=points,
            weather=int(entry["weather"]),
            image_index=int(entry["image_index"]),
            split=entry["split"],
        ))
    return DiskDataset(
        root=root,
        classes=tuple(manifest["classes"]),
        image_size=int(manifest["image_size"]),
        samples=samples,
    )
