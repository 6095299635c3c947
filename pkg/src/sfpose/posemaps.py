"""Heatmap geometry: encoding keypoints, decoding peaks, projections.

Coordinate conventions, used consistently by every consumer:

* Keypoints live on the continuous image plane, ``0 <= x < W`` and
  ``0 <= y < H`` for visible joints.
* Heatmap cells use the pixel-center convention: cell ``(r, c)``
  corresponds to image point ``((c + 0.5) * W/W', (r + 0.5) * H/H')``.
* ``encode`` snaps each keypoint to the nearest cell center and renders
  an unnormalized Gaussian around that cell, so every visible joint has
  peak value exactly 1.0 at its quantized location.
* ``decode`` inverts that map: the argmax cell ``(r, c)`` decodes to
  the cell's image-plane center, which bounds the round-trip error by
  half a heatmap cell in image units, uniformly across the image.
* Invisible joints encode to all-zero maps; decode flags a joint
  invisible exactly when its map maximum is 0.
* Argmax ties always resolve to the lowest flat row-major index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import ContractViolation, Tensor

DEFAULT_SIGMA = 2.0


@dataclass
class Keypoints:
    """Joint coordinates (K, 2) as (x, y) image pixels plus visibility flags."""

    coords: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.visibility is None:
            self.visibility = np.ones(self.coords.shape[0], dtype=bool)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ContractViolation(f"Keypoints: coords must be (K, 2), got {self.coords.shape}")
        if self.visibility.shape != (self.coords.shape[0],):
            raise ContractViolation(
                f"Keypoints: visibility must be ({self.coords.shape[0]},), got {self.visibility.shape}"
            )

    @property
    def count(self) -> int:
        return self.coords.shape[0]


@dataclass
class HeatmapSet:
    """A stack of per-joint heatmaps (K, H', W') tied to an image size."""

    maps: np.ndarray
    image_size: tuple
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ContractViolation(f"HeatmapSet: maps must be (K, H', W'), got {self.maps.shape}")
        if not np.isfinite(self.maps).all():
            raise ContractViolation("HeatmapSet: maps contain non-finite values")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))


@dataclass
class ProjectionPair:
    """Row/column marginals of one heatmap: vx over columns, vy over rows."""

    vx: np.ndarray
    vy: np.ndarray


@dataclass
class ResidualPair:
    """Temperature-softmaxed distributions over the unmasked support of two
    heatmaps, with the removed flat indices."""

    p_src: Tensor
    p_in: Tensor
    mask: tuple = field(default_factory=tuple)


def encode(kps: Keypoints, heatmap_h: int, heatmap_w: int, sigma: float = DEFAULT_SIGMA,
           image_size=(64, 64)) -> HeatmapSet:
    """Render unnormalized Gaussian ground-truth heatmaps for each joint."""
    if sigma <= 0:
        raise ContractViolation(f"encode: sigma must be positive, got {sigma}")
    if heatmap_h < 1 or heatmap_w < 1:
        raise ContractViolation(f"encode: bad heatmap size {(heatmap_h, heatmap_w)}")
    img_h, img_w = int(image_size[0]), int(image_size[1])
    vis = kps.visibility
    xs, ys = kps.coords[:, 0], kps.coords[:, 1]
    inside = (xs >= 0) & (xs < img_w) & (ys >= 0) & (ys < img_h)
    if np.any(vis & ~inside):
        raise ContractViolation("encode: visible keypoint outside the image")
    # snap to the nearest cell center so the peak is exactly 1.0 there
    cx = np.clip(np.rint(xs * heatmap_w / img_w - 0.5), 0, heatmap_w - 1)[:, None, None]
    cy = np.clip(np.rint(ys * heatmap_h / img_h - 0.5), 0, heatmap_h - 1)[:, None, None]
    u = np.arange(heatmap_w, dtype=np.float64)[None, None, :]
    v = np.arange(heatmap_h, dtype=np.float64)[None, :, None]
    maps = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2.0 * sigma * sigma))
    maps *= vis[:, None, None]
    return HeatmapSet(maps=maps, image_size=(img_h, img_w), sigma=sigma)


def decode(h: HeatmapSet) -> Keypoints:
    """Argmax-decode a heatmap stack back to image-plane keypoints."""
    k, hh, ww = h.maps.shape
    img_h, img_w = h.image_size
    flat = h.maps.reshape(k, hh * ww)
    idx = np.argmax(flat, axis=1)
    rows, cols = idx // ww, idx % ww
    coords = np.stack([(cols + 0.5) * img_w / ww, (rows + 0.5) * img_h / hh], axis=1)
    visibility = flat[np.arange(k), idx] != 0.0
    return Keypoints(coords=coords, visibility=visibility)


def project(h) -> ProjectionPair:
    """Marginalize one 2-D heatmap onto its x and y axes by summation."""
    maps = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    if maps.ndim != 2:
        raise ContractViolation(f"project: expected a single (H', W') map, got {maps.shape}")
    return ProjectionPair(vx=maps.sum(axis=0), vy=maps.sum(axis=1))


def residual_support(h_src, h_in):
    """Remove both argmax cells from two flattened heatmaps.

    The argmax of each map is found independently; the union of the two
    flat indices is excluded (not zeroed) from both maps' support. Returns
    the two surviving value vectors, still on the tape, plus the sorted
    tuple of removed indices. The support may shrink by one or two cells.
    """
    src = h_src if isinstance(h_src, Tensor) else Tensor(h_src)
    hin = h_in if isinstance(h_in, Tensor) else Tensor(h_in)
    if src.shape != hin.shape:
        raise ContractViolation(f"residual_support: shape mismatch {src.shape} vs {hin.shape}")
    n = src.size
    if n < 3:
        raise ContractViolation("residual_support: need at least 3 cells")
    removed = sorted({int(np.argmax(src.data)), int(np.argmax(hin.data))})
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    s_src = tg.masked_select(tg.reshape(src, (n,)), keep)
    s_in = tg.masked_select(tg.reshape(hin, (n,)), keep)
    return s_src, s_in, tuple(removed)


def residual_pair(h_src, h_in, tau: float) -> ResidualPair:
    """Build the masked, temperature-softmaxed residual distributions."""
    if tau <= 0:
        raise ContractViolation(f"residual_pair: tau must be positive, got {tau}")
    s_src, s_in, removed = residual_support(h_src, h_in)
    return ResidualPair(
        p_src=tg.softmax(s_src / tau, axis=0),
        p_in=tg.softmax(s_in / tau, axis=0),
        mask=removed,
    )
