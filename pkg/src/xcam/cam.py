"""Class activation maps and their rendering.

For a GAP + linear head the class-``c`` map is the head-weighted sum of the
final feature maps, ``M_c(x, y) = sum_k w[c, k] * f_k(x, y)``.  Because GAP is
a spatial mean, ``mean(M_c) + bias_c`` reproduces the class logit exactly.

Colormap breakpoints (value -> RGB), linear in between::

    0.0 -> (0, 0, 0)   black
    0.5 -> (1, 0, 0)   red
    1.0 -> (1, 1, 0)   yellow
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import Model, class_weights, forward
from .errors import ConfigError, ShapeError
from .tensor_core import bilinear_resize

COLORMAP_BREAKPOINTS = (
    (0.0, (0.0, 0.0, 0.0)),
    (0.5, (1.0, 0.0, 0.0)),
    (1.0, (1.0, 1.0, 0.0)),
)


@dataclass(frozen=True)
class CamMap:
    class_index: int
    raw: np.ndarray
    source: str = "final_block"


@dataclass(frozen=True)
class CamRendering:
    cam: CamMap
    normalized: np.ndarray
    upsampled: np.ndarray
    overlay: np.ndarray  # (h, w, 3) in [0, 1]


def compute_cam(last_feature_maps: np.ndarray, class_weights, class_index: int, source: str = "final_block") -> CamMap:
    """Weighted channel sum of one sample's feature maps."""
    f = np.asarray(last_feature_maps)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise ShapeError(f"compute_cam takes a single sample, got batch shape {f.shape}")
        f = f[0]
    if f.ndim != 3:
        raise ShapeError(f"expected (K, h, w) feature maps, got shape {f.shape}")
    w = np.asarray(class_weights, dtype=f.dtype)
    if w.shape != (f.shape[0],):
        raise ShapeError(f"weight length {w.shape} does not match {f.shape[0]} feature channels")
    raw = np.tensordot(w, f, axes=(0, 0))
    return CamMap(int(class_index), raw, source)


def normalize_cam(m: CamMap | np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(m.raw if isinstance(m, CamMap) else m, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB via the black-red-yellow breakpoints."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    xs = [b[0] for b in COLORMAP_BREAKPOINTS]
    channels = [np.interp(v, xs, [b[1][i] for b in COLORMAP_BREAKPOINTS]) for i in range(3)]
    return np.stack(channels, axis=-1)


def _as_unit_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def render_overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a grayscale image with the colormapped CAM; returns (h, w, 3) in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    gray = _as_unit_gray(image)
    cam = np.asarray(cam)
    if gray.shape != cam.shape:
        raise ShapeError(f"image shape {gray.shape} != CAM shape {cam.shape}")
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    return (1.0 - alpha) * rgb + alpha * colormap(cam)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def cam_for_model(model: Model, image: np.ndarray, class_index: int, alpha: float = 0.5) -> CamRendering:
    """Forward one preprocessed image, build its CAM and render the overlay.

    ``image`` is an (h, w) grid in [0, 1] at the model's input size.
    """
    img = np.asarray(image, dtype=np.float64)
    size = model.spec.input_size
    if img.shape != (size, size):
        raise ShapeError(f"image shape {img.shape} does not match model input {(size, size)}")
    _, feats = forward(model, img[None, None], training=False)
    w, _ = class_weights(model, class_index)
    cam = compute_cam(feats, w, class_index, source=f"blocks.{len(model.spec.stages) - 1}")
    normalized = normalize_cam(cam)
    upsampled = bilinear_resize(normalized, size, size)
    return CamRendering(cam, normalized, upsampled, render_overlay(img, upsampled, alpha))


def top_fraction_inside(cam_grid: np.ndarray, mask: np.ndarray, fraction: float = 0.1) -> float:
    """Share of the top ``fraction`` CAM pixels that fall inside ``mask``.

    Pixels are ranked by value with ties broken by flat index, so exactly
    ``ceil(fraction * size)`` pixels are selected.
    """
    cam_grid = np.asarray(cam_grid)
    mask = np.asarray(mask, dtype=bool)
    if cam_grid.shape != mask.shape:
        raise ShapeError(f"CAM shape {cam_grid.shape} != mask shape {mask.shape}")
    k = int(np.ceil(fraction * cam_grid.size))
    order = np.argsort(-cam_grid.ravel(), kind="stable")[:k]
    return float(mask.ravel()[order].mean())
