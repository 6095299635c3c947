"""Synthetic two-domain pose dataset: rendered articulated stick figures.

A chain skeleton is posed by forward kinematics from per-sample random
angles, rendered as anti-aliased line segments with a filled disc
marking the root joint, and styled per domain (line width, background
texture, gain, additive noise, occlusion). The source style is clean;
the shifted target style is the domain gap the adaptation loop has to
close.

Every sample draws from its own RNG stream derived from (seed, index),
so generation order never matters. On disk a dataset is a directory with
``meta.json`` (skeleton, style, count, seed, image size, domain tag),
``images.bin`` (row-major little-endian float64 frames) and
``annotations.json`` (per-sample keypoints and visibility).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .posemaps import Keypoints
from .tensorgrad import ContractViolation

FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    """Pose sampling kept leaving the image after the retry budget."""


class DatasetFormatError(ValueError):
    """An on-disk dataset's binary payload does not match its metadata."""


class DatasetSchemaError(ValueError):
    """An on-disk dataset's metadata or annotations are malformed."""


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint tree with bone lengths (image pixels), PCK groups and pose prior.

    ``parents[j]`` is the parent joint, -1 for the root;
    ``bone_lengths[j]`` is the bone from parent to joint j (0 at the
    root); ``groups[j]`` names the evaluation group of joint j.

    The pose prior bounds the per-sample random pose: the root bone
    direction is drawn uniformly from ``base_angle_range`` and every
    child bone bends at most ``max_bend`` radians relative to its
    parent. A bounded fan rather than full rotation keeps joint
    identity well defined for a chain skeleton (a fully rotated chain
    is indistinguishable from its own reflection).
    """

    parents: tuple = (-1, 0, 1, 2, 3)
    bone_lengths: tuple = (0.0, 13.0, 11.0, 9.0, 7.0)
    groups: tuple = ("root", "proximal", "mid", "distal", "tip")
    base_angle_range: tuple = (-np.pi / 3, np.pi / 3)
    max_bend: float = 0.9

    def __post_init__(self):
        k = len(self.parents)
        if len(self.bone_lengths) != k or len(self.groups) != k:
            raise ContractViolation("SkeletonSpec: parents, bone_lengths and groups must have equal length")
        roots = [j for j, p in enumerate(self.parents) if p == -1]
        if len(roots) != 1:
            raise ContractViolation("SkeletonSpec: exactly one root joint required")
        for j, p in enumerate(self.parents):
            if p != -1 and not (0 <= p < j):
                raise ContractViolation("SkeletonSpec: parents must come before children")
            if p != -1 and self.bone_lengths[j] <= 0:
                raise ContractViolation("SkeletonSpec: non-root bones need positive length")
        if len(self.base_angle_range) != 2 or not self.base_angle_range[0] <= self.base_angle_range[1]:
            raise ContractViolation("SkeletonSpec: base_angle_range must be (low, high) with low <= high")
        if not 0.0 < self.max_bend <= np.pi:
            raise ContractViolation("SkeletonSpec: max_bend must be in (0, pi]")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def to_dict(self) -> dict:
        return {"parents": list(self.parents), "bone_lengths": list(self.bone_lengths),
                "groups": list(self.groups), "base_angle_range": list(self.base_angle_range),
                "max_bend": self.max_bend}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(parents=tuple(d["parents"]), bone_lengths=tuple(d["bone_lengths"]),
                   groups=tuple(d["groups"]),
                   base_angle_range=tuple(d.get("base_angle_range", cls.base_angle_range)),
                   max_bend=float(d.get("max_bend", cls.max_bend)))


@dataclass(frozen=True)
class DomainStyle:
    """Rendering style of one domain."""

    line_width: float = 1.0
    noise: float = 0.0
    texture: float = 0.0
    gain: float = 1.0
    occlusion: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.line_width <= 8.0:
            raise ContractViolation("DomainStyle: line_width must be in (0, 8]")
        if not 0.0 < self.gain <= 2.0:
            raise ContractViolation("DomainStyle: gain must be in (0, 2]")
        for name in ("noise", "texture", "occlusion"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"DomainStyle: {name} must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"line_width": self.line_width, "noise": self.noise, "texture": self.texture,
                "gain": self.gain, "occlusion": self.occlusion}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainStyle":
        return cls(**d)


SOURCE_STYLE = DomainStyle()
TARGET_STYLE = DomainStyle(line_width=2.0, noise=0.1, texture=0.2, gain=0.8)


@dataclass
class PoseSample:
    image: np.ndarray
    keypoints: Keypoints
    domain: str


@dataclass
class ToyDataset:
    """Samples plus everything needed to regenerate or evaluate them."""

    skeleton: SkeletonSpec
    style: DomainStyle
    seed: int
    image_size: int
    domain: str
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def _forward_kinematics(spec: SkeletonSpec, root_xy, base_angle, bend_angles) -> np.ndarray:
    k = spec.joint_count
    coords = np.zeros((k, 2))
    angles = np.zeros(k)
    coords[0] = root_xy
    angles[0] = base_angle
    for j in range(1, k):
        p = spec.parents[j]
        angles[j] = angles[p] + bend_angles[j]
        coords[j] = coords[p] + spec.bone_lengths[j] * np.array([np.cos(angles[j]), np.sin(angles[j])])
    return coords


def _segment_distance(px, py, a, b) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _bilinear_upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    ch, cw = coarse.shape
    yi = np.clip((np.arange(h) + 0.5) * ch / h - 0.5, 0.0, ch - 1.0)
    xi = np.clip((np.arange(w) + 0.5) * cw / w - 0.5, 0.0, cw - 1.0)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    top = coarse[np.ix_(y0, x0)] * (1 - fx) + coarse[np.ix_(y0, x1)] * fx
    bot = coarse[np.ix_(y1, x0)] * (1 - fx) + coarse[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


ROOT_MARKER_RADIUS = 2.5


def _render(spec: SkeletonSpec, style: DomainStyle, coords: np.ndarray, size: int, rng) -> np.ndarray:
    py, px = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.zeros((size, size))
    for j in range(1, spec.joint_count):
        d = _segment_distance(px, py, coords[spec.parents[j]], coords[j])
        # full intensity inside the stroke radius, half-pixel anti-alias skirt;
        # the saturated core guarantees a max of exactly 1.0 on limb centers
        img = np.maximum(img, np.clip(style.line_width + 1.0 - 2.0 * d, 0.0, 1.0))
    # filled disc at the root so the chain's origin end is unambiguous
    d = np.hypot(px - coords[0, 0], py - coords[0, 1])
    img = np.maximum(img, np.clip(ROOT_MARKER_RADIUS + 0.5 - d, 0.0, 1.0))
    if style.texture > 0:
        # background texture sits under the figure: composite by max so it
        # fills empty regions without brightening strokes
        field = _bilinear_upsample(rng.uniform(0.0, 1.0, (8, 8)), size, size)
        img = np.maximum(img, style.texture * field)
    img *= style.gain
    if style.noise > 0:
        img += rng.normal(0.0, style.noise, img.shape)
    if style.occlusion > 0 and rng.random() < style.occlusion:
        bh, bw = rng.integers(6, 16, size=2)
        r0 = int(rng.integers(0, size - bh))
        c0 = int(rng.integers(0, size - bw))
        img[r0 : r0 + bh, c0 : c0 + bw] = 0.0
    return np.clip(img, 0.0, 1.0)


def _sample_pose(spec: SkeletonSpec, rng, size: int, margin: float = 1.5, attempts: int = 100) -> np.ndarray:
    reach = float(np.sum(spec.bone_lengths))
    lo = min(max(margin + 2.0, size / 2.0 - reach), size / 2.0)
    hi = max(min(size - margin - 2.0, size / 2.0 + reach), size / 2.0)
    for _ in range(attempts):
        root = rng.uniform(lo, hi, size=2)
        base = rng.uniform(spec.base_angle_range[0], spec.base_angle_range[1])
        bends = rng.uniform(-spec.max_bend, spec.max_bend, size=spec.joint_count)
        coords = _forward_kinematics(spec, root, base, bends)
        if np.all((coords >= margin) & (coords < size - margin)):
            return coords
    raise GenerationError(f"no in-image pose found in {attempts} attempts; skeleton too large for image {size}")


def generate(spec: SkeletonSpec, style: DomainStyle, n: int, seed: int,
             image_size: int = 64, domain: str = "source") -> ToyDataset:
    """Render ``n`` samples; sample i depends only on (seed, i)."""
    if n < 0:
        raise ContractViolation("generate: n must be non-negative")
    samples = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        coords = _sample_pose(spec, rng, image_size)
        img = _render(spec, style, coords, image_size, rng)
        kps = Keypoints(coords=coords, visibility=np.ones(spec.joint_count, dtype=bool))
        samples.append(PoseSample(image=img[None, :, :], keypoints=kps, domain=domain))
    return ToyDataset(skeleton=spec, style=style, seed=seed, image_size=image_size,
                      domain=domain, samples=samples)


def save_dataset(dataset: ToyDataset, out_dir) -> None:
    """Write meta.json, images.bin and annotations.json into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "count": len(dataset),
        "seed": dataset.seed,
        "image_size": dataset.image_size,
        "domain": dataset.domain,
        "skeleton": dataset.skeleton.to_dict(),
        "style": dataset.style.to_dict(),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    with open(os.path.join(out_dir, "images.bin"), "wb") as fh:
        for s in dataset.samples:
            fh.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
    annotations = [
        {"keypoints": s.keypoints.coords.tolist(), "visibility": s.keypoints.visibility.tolist()}
        for s in dataset.samples
    ]
    with open(os.path.join(out_dir, "annotations.json"), "w") as fh:
        json.dump(annotations, fh)


def load_dataset(in_dir) -> ToyDataset:
    """Inverse of ``save_dataset``; the round trip is bit-identical."""
    try:
        with open(os.path.join(in_dir, "meta.json")) as fh:
            meta = json.load(fh)
        with open(os.path.join(in_dir, "annotations.json")) as fh:
            annotations = json.load(fh)
        raw = open(os.path.join(in_dir, "images.bin"), "rb").read()
    except FileNotFoundError as e:
        raise DatasetFormatError(f"{in_dir}: missing dataset file ({e.filename})") from None
    except json.JSONDecodeError as e:
        raise DatasetSchemaError(f"{in_dir}: invalid JSON ({e})") from None
    try:
        spec = SkeletonSpec.from_dict(meta["skeleton"])
        style = DomainStyle.from_dict(meta["style"])
        count = int(meta["count"])
        size = int(meta["image_size"])
        seed = int(meta["seed"])
        domain = str(meta["domain"])
    except (KeyError, TypeError) as e:
        raise DatasetSchemaError(f"{in_dir}: meta.json missing or malformed field ({e})") from None
    frame = size * size * 8
    if len(raw) != count * frame:
        raise DatasetFormatError(
            f"{in_dir}: images.bin holds {len(raw)} bytes, expected {count * frame} for {count} frames"
        )
    if len(annotations) != count:
        raise DatasetSchemaError(f"{in_dir}: {len(annotations)} annotations for {count} frames")
    samples = []
    for i, ann in enumerate(annotations):
        coords = np.asarray(ann["keypoints"], dtype=np.float64)
        if coords.shape != (spec.joint_count, 2):
            raise DatasetSchemaError(f"{in_dir}: sample {i} has keypoint shape {coords.shape}")
        vis = np.asarray(ann["visibility"], dtype=bool)
        img = np.frombuffer(raw, dtype="<f8", count=size * size, offset=i * frame).reshape(1, size, size)
        samples.append(PoseSample(image=img.copy(), keypoints=Keypoints(coords, vis), domain=domain))
    return ToyDataset(skeleton=spec, style=style, seed=seed, image_size=size, domain=domain, samples=samples)
