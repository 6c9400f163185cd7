"""Dataset ingestion, preprocessing and the synthetic echo-like generator.

The synthetic generator draws a bright vessel-like ring on a dim speckled
background.  KD images get a ring whose wall is ``dilation`` times thicker
than the non-KD baseline, so the classes are separable by construction and
the ring annulus doubles as a ground-truth localisation mask.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .tensor_core import bilinear_resize

MANIFEST_HEADER = ["path", "label", "subject"]
KD, NON_KD = 1, 0


# --------------------------------------------------------------------------
# netpbm I/O
# --------------------------------------------------------------------------

def write_pgm(path, grid: np.ndarray) -> None:
    """Write an 8-bit binary PGM (P5)."""
    g = np.asarray(grid)
    if g.ndim != 2 or g.dtype != np.uint8:
        raise ValidationError(f"PGM needs a 2-D uint8 grid, got {g.dtype} {g.shape}")
    h, w = g.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + g.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an 8-bit binary PPM (P6)."""
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValidationError(f"PPM needs an (h, w, 3) uint8 array, got {a.dtype} {a.shape}")
    h, w, _ = a.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes())


def read_gray(path) -> np.ndarray:
    """Decode an 8-bit grayscale PGM or PNG into a uint8 grid."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ValidationError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValidationError(f"{path}: unreadable image ({exc})") from None


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    subject: str


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)

    @property
    def counts(self) -> dict[int, int]:
        labels = self.labels
        return {NON_KD: int(np.sum(labels == NON_KD)), KD: int(np.sum(labels == KD))}

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.rows:
                w.writerow([r.path, r.label, r.subject])


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: list[np.ndarray]

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels


def read_manifest(path) -> DatasetManifest:
    """Parse and validate a ``path,label,subject`` CSV manifest."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValidationError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        seen = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 3:
                raise ValidationError(f"{path}: row {lineno} has {len(rec)} fields, expected 3")
            img, label, subject = (f.strip() for f in rec)
            if label not in ("0", "1"):
                raise ValidationError(f"{path}: row {lineno} has label {label!r}; labels must be 0 or 1")
            if img in seen:
                raise ValidationError(f"{path}: row {lineno} duplicates path {img!r}")
            seen.add(img)
            rows.append(ManifestRow(img, int(label), subject))
    if not rows:
        raise ValidationError(f"{path}: manifest has no rows")
    return DatasetManifest(rows, path.parent)


def load_dataset(path) -> Dataset:
    """Read a manifest and decode every image it references."""
    manifest = read_manifest(path)
    images = []
    for r in manifest.rows:
        img_path = Path(r.path) if Path(r.path).is_absolute() else manifest.root / r.path
        if not img_path.is_file():
            raise ValidationError(f"{path}: missing image file {img_path}")
        images.append(read_gray(img_path))
    return Dataset(manifest, images)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def center_crop(image: np.ndarray, size: int = 512) -> np.ndarray:
    """Centered ``size`` x ``size`` window, offsets floor((dim - size) / 2)."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValidationError(f"image of shape {img.shape} is smaller than crop size {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top : top + size, left : left + size].copy()


def resize_to_input(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to ``target`` x ``target`` and scale 8-bit values to [0, 1]."""
    if target < 8:
        raise ValidationError(f"target size must be >= 8, got {target}")
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (target, target):
        img = bilinear_resize(img, target, target)
    return img / 255.0


def prepare_image(image: np.ndarray, input_size: int, crop_size: int = 512) -> np.ndarray:
    """Crop to at most ``crop_size`` (square, centered), then resize to the model input."""
    h, w = image.shape[:2]
    side = min(crop_size, h, w)
    if (h, w) != (side, side):
        image = center_crop(image, side)
    return resize_to_input(image, input_size)


def to_batch(images, input_size: int, crop_size: int = 512, dtype=np.float64) -> np.ndarray:
    """Stack prepared images into an (n, 1, size, size) array."""
    arr = np.stack([prepare_image(im, input_size, crop_size) for im in images])
    return arr[:, None].astype(dtype)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 100
    size: int = 64
    radius_range: tuple[float, float] = (12.0, 20.0)
    base_thickness: float = 5.0
    dilation: float = 1.8
    noise: float = 0.15
    seed: int = 7
    background: float = 0.15
    ring_level: float = 0.8

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValidationError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.size < 32:
            raise ValidationError(f"size must be >= 32, got {self.size}")
        if not self.dilation > 1:
            raise ValidationError(f"dilation must be > 1 so classes are separable, got {self.dilation}")
        if not 0 <= self.noise <= 1:
            raise ValidationError(f"noise must lie in [0, 1], got {self.noise}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValidationError(f"invalid radius range {self.radius_range}")
        if self.base_thickness <= 0:
            raise ValidationError(f"base_thickness must be positive, got {self.base_thickness}")


@dataclass
class SyntheticSet:
    manifest: DatasetManifest
    images: list[np.ndarray]  # uint8
    masks: list[np.ndarray]  # bool
    geometry: list[dict]

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels


def ring_mask(size: int, cy: float, cx: float, radius: float, thickness: float) -> np.ndarray:
    """Pixels whose centre lies within ``thickness / 2`` of the circle."""
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
    return np.abs(dist - radius) <= thickness / 2


def render_ring(size, geometry: dict, cfg: SynthConfig, speckle: np.ndarray | None = None):
    """Render one image as uint8 plus its annulus mask."""
    mask = ring_mask(size, geometry["cy"], geometry["cx"], geometry["radius"], geometry["thickness"])
    clean = np.where(mask, cfg.ring_level, cfg.background)
    if speckle is not None:
        clean = clean * speckle
    img = np.clip(np.rint(clean * 255.0), 0, 255).astype(np.uint8)
    return img, mask


def generate_synthetic(cfg: SynthConfig) -> SyntheticSet:
    """Generate ``2 * n_per_class`` images in a seeded, shuffled class order."""
    rng = np.random.default_rng(cfg.seed)
    n = 2 * cfg.n_per_class
    labels = rng.permutation(np.repeat([KD, NON_KD], cfg.n_per_class))
    lo, hi = cfg.radius_range
    jitter = cfg.size / 10
    images, masks, geometry, rows = [], [], [], []
    for i in range(n):
        label = int(labels[i])
        geo = {
            "cy": cfg.size / 2 + rng.uniform(-jitter, jitter),
            "cx": cfg.size / 2 + rng.uniform(-jitter, jitter),
            "radius": rng.uniform(lo, hi),
            "thickness": cfg.base_thickness * (cfg.dilation if label == KD else 1.0),
            "label": label,
        }
        speckle = rng.uniform(1 - cfg.noise, 1 + cfg.noise, size=(cfg.size, cfg.size))
        img, mask = render_ring(cfg.size, geo, cfg, speckle)
        images.append(img)
        masks.append(mask)
        geometry.append(geo)
        rows.append(ManifestRow(f"img_{i:04d}.pgm", label, f"s{i:04d}"))
    return SyntheticSet(DatasetManifest(rows), images, masks, geometry)


def write_synthetic(synth: SyntheticSet, out_dir) -> Path:
    """Write images, masks (``masks/``, values 0/255) and ``manifest.csv``."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for row, img, mask in zip(synth.manifest.rows, synth.images, synth.masks):
        write_pgm(out / row.path, img)
        write_pgm(out / "masks" / row.path, mask.astype(np.uint8) * 255)
    synth.manifest.root = out
    synth.manifest.write(out / "manifest.csv")
    return out / "manifest.csv"


def directory_digest(path) -> str:
    """SHA-256 over relative file names and contents, in sorted order."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()

