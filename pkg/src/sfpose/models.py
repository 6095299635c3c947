"""Desk-scale heatmap pose network, model triplet, EMA and checkpoints.

The network applies a fixed difference-of-Gaussians band-pass to its
input and then splits into a feature extractor (stride-2 conv blocks)
and a heatmap regressor (transposed-conv blocks plus a 1x1 head). Both halves
expose their parameters as ordered name -> Tensor maps so the adaptation
loop can route updates per group, and the whole parameter set
round-trips through a small binary checkpoint format.

Checkpoint format (little-endian): magic ``SFPA1``, u32 parameter count,
then per parameter: u32 name length, UTF-8 name, u32 rank, u32 dims,
raw float64 payload in row-major order.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import ContractViolation, Tensor

CHECKPOINT_MAGIC = b"SFPA1"


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before the declared payload."""


class ParameterMismatchError(CheckpointError):
    """Stored parameters do not match the requested architecture."""


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the pose network.

    The extractor applies one stride-2 conv block per entry of
    ``extractor_channels``; the regressor upsamples the bottleneck back
    to ``heatmap_size`` with stride-2 transposed convs, refines with one
    stride-1 block and maps to ``keypoints`` channels with a 1x1 conv.
    """

    in_channels: int = 1
    image_size: int = 64
    heatmap_size: int = 16
    keypoints: int = 5
    extractor_channels: tuple = (16, 32, 64)
    extractor_kernel: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.keypoints < 1:
            raise ContractViolation("ArchConfig: channel and keypoint counts must be positive")
        if not self.extractor_channels or any(c < 1 for c in self.extractor_channels):
            raise ContractViolation("ArchConfig: extractor_channels must be positive")
        if self.extractor_kernel < 3 or self.extractor_kernel % 2 == 0:
            raise ContractViolation("ArchConfig: extractor_kernel must be odd and >= 3")
        bottleneck = self.image_size
        for _ in self.extractor_channels:
            if bottleneck % 2:
                raise ContractViolation(f"ArchConfig: image_size {self.image_size} not divisible by strides")
            bottleneck //= 2
        if bottleneck < 1:
            raise ContractViolation(f"ArchConfig: image_size {self.image_size} too small for the extractor")
        if self.heatmap_size % bottleneck:
            raise ContractViolation(
                f"ArchConfig: heatmap_size {self.heatmap_size} unreachable from bottleneck {bottleneck}"
            )
        factor = self.heatmap_size // bottleneck
        if factor & (factor - 1):
            raise ContractViolation(f"ArchConfig: heatmap/bottleneck ratio {factor} must be a power of two")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size >> len(self.extractor_channels)

    @property
    def up_strides(self) -> tuple:
        """Strides of the regressor's transposed-conv blocks."""
        factor = self.heatmap_size // self.bottleneck_size
        n2 = factor.bit_length() - 1
        return (2,) * n2 + (1,)


def _regressor_channels(cfg: ArchConfig):
    chans = []
    c = cfg.extractor_channels[-1]
    for _ in cfg.up_strides:
        c = max(c // 2, 8)
        chans.append(c)
    return tuple(chans)


def _gauss1d(sigma: float, taps: int = 9) -> np.ndarray:
    ax = np.arange(taps) - taps // 2
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    return g / g.sum()


_BANDPASS_FINE = _gauss1d(1.25)
_BANDPASS_COARSE = _gauss1d(3.0)
_BANDPASS_GAIN = 2.0


def _blur_sep(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable zero-padded Gaussian blur over the last two axes of (N, H, W)."""
    pad = len(g) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    x = np.einsum("nhwk,k->nhw", np.lib.stride_tricks.sliding_window_view(xp, len(g), axis=1), g)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return np.einsum("nhwk,k->nhw", np.lib.stride_tricks.sliding_window_view(xp, len(g), axis=2), g)


def _bandpass(x: np.ndarray) -> np.ndarray:
    """Fixed difference-of-Gaussians filter applied per channel.

    Keeps stroke-scale structure while attenuating flat background,
    low-frequency texture and pixel noise. It carries no parameters and
    runs identically at train and eval time, so it narrows the domain
    gap without ever seeing target labels.
    """
    b, c, h, w = x.shape
    flat = x.reshape(b * c, h, w)
    out = (_blur_sep(flat, _BANDPASS_FINE) - _blur_sep(flat, _BANDPASS_COARSE)) * _BANDPASS_GAIN
    return out.reshape(b, c, h, w)


class PoseNet:
    """Heatmap regression network over named float64 parameters."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        self.cfg = cfg
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        c_in = cfg.in_channels
        ek = cfg.extractor_kernel
        for i, c_out in enumerate(cfg.extractor_channels):
            self._init_conv(rng, f"extractor.block{i}", (c_out, c_in, ek, ek), fan_in=c_in * ek * ek)
            c_in = c_out
        up_channels = _regressor_channels(cfg)
        for i, (stride, c_out) in enumerate(zip(cfg.up_strides, up_channels)):
            k = 4 if stride == 2 else 3
            self._init_conv(rng, f"regressor.up{i}", (c_in, c_out, k, k), fan_in=c_in * k * k)
            c_in = c_out
        self._init_conv(rng, "regressor.head", (cfg.keypoints, c_in, 1, 1), fan_in=c_in)

    def _init_conv(self, rng, name, shape, fan_in):
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        bias_dim = shape[1] if name.startswith("regressor.up") else shape[0]
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(bias_dim), requires_grad=True)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim == 3:
            x = tg.reshape(x, (1,) + x.shape)
        expected = (self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ContractViolation(f"forward: expected (B,{expected[0]},{expected[1]},{expected[2]}), got {x.shape}")
        p = self.params
        h = Tensor(_bandpass(np.asarray(x.data, dtype=np.float64)))
        pad = self.cfg.extractor_kernel // 2
        for i in range(len(self.cfg.extractor_channels)):
            h = tg.relu(tg.conv2d(h, p[f"extractor.block{i}.weight"], p[f"extractor.block{i}.bias"],
                                  stride=2, padding=pad))
        for i, stride in enumerate(self.cfg.up_strides):
            h = tg.relu(tg.transposed_conv2d(h, p[f"regressor.up{i}.weight"], p[f"regressor.up{i}.bias"],
                                             stride=stride, padding=1))
        return tg.conv2d(h, p["regressor.head.weight"], p["regressor.head.bias"])

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def named_parameters(self):
        return self.params.items()

    def _group(self, prefix: str):
        return OrderedDict((n, p) for n, p in self.params.items() if n.startswith(prefix))

    @property
    def extractor_params(self):
        return self._group("extractor.")

    @property
    def regressor_params(self):
        return self._group("regressor.")

    def set_trainable(self, extractor=None, regressor=None):
        if extractor is not None:
            for p in self.extractor_params.values():
                p.requires_grad = bool(extractor)
        if regressor is not None:
            for p in self.regressor_params.values():
                p.requires_grad = bool(regressor)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "PoseNet":
        other = PoseNet(self.cfg)
        for name, p in self.params.items():
            other.params[name].data[...] = p.data
            other.params[name].requires_grad = p.requires_grad
        return other

    def param_fingerprint(self, prefix: str = "") -> str:
        """SHA-256 over parameter names and exact bytes, optionally filtered."""
        digest = hashlib.sha256()
        for name, p in self.params.items():
            if name.startswith(prefix):
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return digest.hexdigest()


def build_posenet(cfg: ArchConfig, seed: int = 0) -> PoseNet:
    """He-initialized network; same cfg and seed give identical weights."""
    return PoseNet(cfg, seed=seed)


@dataclass(frozen=True)
class EmaConfig:
    eta: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ContractViolation(f"EmaConfig: eta must be in [0, 1], got {self.eta}")


@dataclass
class ModelTriplet:
    """The three cooperating models of the adaptation loop."""

    source: PoseNet
    intermediate: PoseNet
    target: PoseNet

    @classmethod
    def from_source(cls, source: PoseNet) -> "ModelTriplet":
        """Clone a pretrained source model into all three roles."""
        return cls(source=source, intermediate=source.clone(), target=source.clone())

    def nets(self):
        return {"source": self.source, "intermediate": self.intermediate, "target": self.target}


def ema_update(intermediate: PoseNet, target: PoseNet, eta: float) -> None:
    """In-place exponential moving average: p_in <- eta*p_in + (1-eta)*p_tg."""
    if not 0.0 <= eta <= 1.0:
        raise ContractViolation(f"ema_update: eta must be in [0, 1], got {eta}")
    in_params, tg_params = intermediate.params, target.params
    if list(in_params.keys()) != list(tg_params.keys()):
        raise ContractViolation("ema_update: parameter sets differ")
    for name, p in in_params.items():
        q = tg_params[name]
        if p.shape != q.shape:
            raise ContractViolation(f"ema_update: shape mismatch for {name}")
        p.data *= eta
        p.data += (1.0 - eta) * q.data


def save_checkpoint(net: PoseNet, path) -> None:
    """Write all parameters in declaration order to the binary format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(net.params)))
        for name, p in net.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.ndim))
            for dim in p.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
    return chunk


def load_checkpoint(path, cfg: ArchConfig) -> PoseNet:
    """Rebuild a network for ``cfg`` and fill it from a checkpoint file.

    Raises ``BadMagicError``, ``TruncatedCheckpointError`` or
    ``ParameterMismatchError`` for the three failure classes.
    """
    net = build_posenet(cfg)
    seen = set()
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(rank))
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(fh, 8 * n_items, f"payload of {name}")
            if name not in net.params:
                raise ParameterMismatchError(f"unexpected parameter {name!r} for this architecture")
            param = net.params[name]
            if shape != param.shape:
                raise ParameterMismatchError(f"parameter {name!r} has shape {shape}, expected {param.shape}")
            param.data[...] = np.frombuffer(payload, dtype="<f8").reshape(shape)
            seen.add(name)
    missing = [n for n in net.params if n not in seen]
    if missing:
        raise ParameterMismatchError(f"missing parameter {missing[0]!r} in checkpoint")
    return net
