"""Synthetic crowd scenes, density ground truth, augmentation, and dataset
I/O.

A scene is a gradient background with soft clutter blobs plus dark head
discs whose radius grows toward the bottom rows, mimicking perspective.
Ground-truth density is a sum of per-head Gaussian kernels, each renormalised
after border clipping so every head contributes exactly unit mass and the
map integrates to the head count.

On disk a dataset is a manifest plus one binary portable-pixmap image and
one plain-text annotation sidecar per sample ("x y" per line, origin
top-left, x rightward). Background-only samples have an empty sidecar.

Everything here is pure given a seed or a path; generation and I/O can run
concurrently across samples.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .supervision import CrowdLabel

DEFAULT_SIGMA = 4.0
KERNEL_TRUNCATION = 4.0  # kernel window half-width in sigmas


class DatasetError(Exception):
    """Malformed manifest, missing file, or out-of-bounds annotation."""


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene."""

    width: int = 96
    height: int = 96
    count_range: Tuple[int, int] = (0, 20)
    head_radius_range: Tuple[float, float] = (2.0, 5.0)
    clutter_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad count range {self.count_range}")
        r_lo, r_hi = self.head_radius_range
        if r_lo < 1.0 or r_lo > r_hi:
            raise ValueError(f"head radii must be >= 1 and ordered, got {self.head_radius_range}")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ValueError(f"clutter_level must lie in [0, 1], got {self.clutter_level}")
        # crude packing bound: a head occupies at least a 2x2 cell
        if hi > (self.width * self.height) // 4:
            raise ValueError(
                f"count range {self.count_range} infeasible for a "
                f"{self.width}x{self.height} scene"
            )


@dataclass
class CrowdSample:
    """Image, head points, rendered density, and the background flag."""

    image: np.ndarray                      # (C, H, W) floats in [0, 1]
    points: List[Tuple[float, float]]      # (x, y) head centres
    density_gt: Optional[np.ndarray]       # (H, W), sums to len(points)
    is_background: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] not in (1, 3):
            raise ValueError(f"image must be (1|3, H, W), got {self.image.shape}")
        if self.is_background:
            if self.points or self.density_gt is not None:
                raise ValueError("background samples carry no points or density")
        else:
            if self.density_gt is None:
                raise ValueError("crowd samples need a density ground truth")
            if abs(self.density_gt.sum() - len(self.points)) >= 1e-6:
                raise ValueError(
                    f"density mass {self.density_gt.sum():.9f} does not match "
                    f"{len(self.points)} points"
                )

    @property
    def count(self) -> int:
        return len(self.points)

    @classmethod
    def cropped(cls, image, points, density_gt) -> "CrowdSample":
        """Crowd sample whose density mass may legitimately differ from the
        point count (heads cut by a crop keep only their in-crop mass)."""
        obj = cls.__new__(cls)
        obj.image = np.asarray(image, dtype=np.float64)
        obj.points = list(points)
        obj.density_gt = density_gt
        obj.is_background = False
        return obj


def render_density_gt(points: Sequence[Tuple[float, float]], height: int,
                      width: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of unit-mass Gaussian kernels, one per head point.

    Each kernel is evaluated on a window truncated at 4 sigma, clipped to the
    image, and renormalised so its in-image mass is exactly one; the total
    therefore equals the point count even for border heads.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    density = np.zeros((height, width))
    half = int(np.ceil(KERNEL_TRUNCATION * sigma))
    for x, y in points:
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"point ({x}, {y}) lies outside {width}x{height}")
        x0 = max(0, int(np.floor(x)) - half)
        x1 = min(width, int(np.floor(x)) + half + 1)
        y0 = max(0, int(np.floor(y)) - half)
        y1 = min(height, int(np.floor(y)) + half + 1)
        ys = np.arange(y0, y1).reshape(-1, 1)
        xs = np.arange(x0, x1).reshape(1, -1)
        kernel = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma * sigma))
        density[y0:y1, x0:x1] += kernel / kernel.sum()
    return density


def generate_scene(spec: SceneSpec, sigma: float = DEFAULT_SIGMA) -> CrowdSample:
    """Render one deterministic synthetic scene from the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width

    # brightness ramp plus soft clutter bumps
    top, bottom = rng.uniform(0.55, 0.9, size=2)
    rows = np.linspace(top, bottom, h).reshape(-1, 1)
    img = np.tile(rows, (1, w))
    yy = np.arange(h).reshape(-1, 1)
    xx = np.arange(w).reshape(1, -1)
    for _ in range(int(rng.integers(3, 9))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        radius = rng.uniform(0.08, 0.25) * min(h, w)
        amp = spec.clutter_level * rng.uniform(-0.3, 0.3)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * radius ** 2))

    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    r_lo, r_hi = spec.head_radius_range
    points = []
    for _ in range(count):
        margin = r_hi + 1.0
        y = rng.uniform(margin, h - margin)
        x = rng.uniform(margin, w - margin)
        # smaller heads near the top rows, as perspective would produce
        radius = r_lo + (r_hi - r_lo) * (y / h) + rng.uniform(-0.3, 0.3)
        radius = float(np.clip(radius, 1.0, r_hi))
        shade = rng.uniform(0.05, 0.3)
        mask = (xx - x) ** 2 + (yy - y) ** 2 <= radius ** 2
        img[mask] = shade
        points.append((float(x), float(y)))

    img = np.clip(img, 0.0, 1.0).reshape(1, h, w)
    if count == 0:
        return CrowdSample(image=img, points=[], density_gt=None, is_background=True)
    density = render_density_gt(points, h, w, sigma)
    return CrowdSample(image=img, points=points, density_gt=density)


def generate_background_pool(count: int, spec: SceneSpec) -> List[CrowdSample]:
    """Clutter-only scenes; the unlabeled pool for semi-supervision."""
    out = []
    for i in range(count):
        sub = SceneSpec(
            width=spec.width, height=spec.height, count_range=(0, 0),
            head_radius_range=spec.head_radius_range,
            clutter_level=spec.clutter_level, seed=spec.seed + i,
        )
        out.append(generate_scene(sub))
    return out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(sample: CrowdSample, crop: int, rng: np.random.Generator,
            flip_prob: float = 0.5, jitter: float = 0.2) -> CrowdSample:
    """Random crop, independent horizontal/vertical flips, and brightness/
    contrast jitter (image only). Density and points move with the image;
    heads whose kernel is cut keep whatever mass remains in the crop."""
    c, h, w = sample.image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image {h}x{w}")
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    img = sample.image[:, y0 : y0 + crop, x0 : x0 + crop].copy()
    density = None
    if sample.density_gt is not None:
        density = sample.density_gt[y0 : y0 + crop, x0 : x0 + crop].copy()
    points = [
        (x - x0, y - y0)
        for x, y in sample.points
        if x0 <= x < x0 + crop and y0 <= y < y0 + crop
    ]

    if rng.uniform() < flip_prob:  # horizontal
        img = img[:, :, ::-1].copy()
        if density is not None:
            density = density[:, ::-1].copy()
        points = [((crop - 1) - x, y) for x, y in points]
    if rng.uniform() < flip_prob:  # vertical
        img = img[:, ::-1, :].copy()
        if density is not None:
            density = density[::-1, :].copy()
        points = [(x, (crop - 1) - y) for x, y in points]

    if jitter > 0:
        gain = 1.0 + rng.uniform(-jitter, jitter)
        shift = rng.uniform(-jitter, jitter)
        img = np.clip(gain * (img - 0.5) + 0.5 + shift, 0.0, 1.0)

    if sample.is_background:
        return CrowdSample(image=img, points=[], density_gt=None, is_background=True)
    return CrowdSample.cropped(img, points, density)


def downsample_density(density: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping sum pooling; total mass is preserved."""
    if factor < 1:
        raise ValueError(f"factor must be positive, got {factor}")
    if factor == 1:
        return density.copy()
    h, w = density.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} map not divisible by factor {factor}")
    lead = density.shape[:-2]
    blocks = density.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(-3, -1))


def imbalance_stats(labels: List[CrowdLabel]) -> Tuple[float, float]:
    """Fractions of background and crowd pixels across all labels."""
    if not labels:
        raise ValueError("imbalance_stats needs at least one label")
    total = sum(l.map.size for l in labels)
    crowd = sum(float(l.map.sum()) for l in labels)
    crowd_fraction = crowd / total
    return 1.0 - crowd_fraction, crowd_fraction


# ---------------------------------------------------------------------------
# Portable pixmap I/O
# ---------------------------------------------------------------------------

def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary 8-bit P6 pixmap from a (1|3, H, W) float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    quantised = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = quantised.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantised.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 pixmap to a (1|3, H, W) float image in [0, 1];
    collapses to one channel when all three agree."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise DatasetError(f"{path} is not a binary P6 pixmap (got {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    expected = w * h * 3
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DatasetError(
            f"{path}: truncated pixel payload, expected {expected} bytes, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    img = arr.astype(np.float64).transpose(2, 0, 1) / 255.0
    if np.array_equal(img[0], img[1]) and np.array_equal(img[1], img[2]):
        img = img[:1]
    return img


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def save_dataset(path: str, samples: Sequence[CrowdSample]) -> None:
    """Write images, annotation sidecars, and the manifest."""
    os.makedirs(path, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name = f"img_{i:05d}.ppm"
        ann_name = f"ann_{i:05d}.txt"
        write_ppm(os.path.join(path, img_name), s.image)
        with open(os.path.join(path, ann_name), "w") as f:
            for x, y in s.points:
                f.write(f"{x!r} {y!r}\n")
        lines.append(f"{img_name} {ann_name} {1 if s.is_background else 0}")
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(path: str, sigma: float = DEFAULT_SIGMA) -> List[CrowdSample]:
    """Read a dataset back; density maps are re-rendered from the points."""
    manifest = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest) as f:
            lines = [l.strip() for l in f if l.strip()]
    except OSError as e:
        raise DatasetError(f"cannot read manifest {manifest}: {e}") from e
    samples = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise DatasetError(
                f"{manifest}:{lineno}: malformed entry {line!r} "
                "(want 'image annotation background_flag')"
            )
        img_name, ann_name, bg_flag = parts
        img_path = os.path.join(path, img_name)
        ann_path = os.path.join(path, ann_name)
        if not os.path.exists(img_path):
            raise DatasetError(f"{manifest}:{lineno}: missing image file {img_path}")
        if not os.path.exists(ann_path):
            raise DatasetError(f"{manifest}:{lineno}: missing annotation file {ann_path}")
        image = read_ppm(img_path)
        points = []
        with open(ann_path) as f:
            for ann_line in f:
                ann_line = ann_line.strip()
                if not ann_line:
                    continue
                try:
                    xs, ys = ann_line.split()
                    x, y = float(xs), float(ys)
                except ValueError as e:
                    raise DatasetError(
                        f"{ann_path}: malformed annotation line {ann_line!r}"
                    ) from e
                h, w = image.shape[1:]
                if not (0 <= x < w and 0 <= y < h):
                    raise DatasetError(
                        f"{ann_path}: point ({x}, {y}) outside the {w}x{h} image"
                    )
                points.append((x, y))
        if bg_flag == "1" or not points:
            samples.append(
                CrowdSample(image=image, points=[], density_gt=None, is_background=True)
            )
        else:
            density = render_density_gt(points, image.shape[1], image.shape[2], sigma)
            samples.append(CrowdSample(image=image, points=points, density_gt=density))
    return samples
