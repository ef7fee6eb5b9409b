"""Dense tensor kernels and the convolutional feature extractor.

Tensors are numpy float32 arrays laid out (height, width, channels). The
extractor is a truncated ResNet-34 (stem + conv2_x + conv3_x) without batch
normalization, evaluated with im2col + BLAS matmul.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RangeError, StructuralError

DTYPE = np.float32

# ---------------------------------------------------------------- kernels


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, pad: int | tuple = 0) -> np.ndarray:
    """Cross-correlation of x (H, W, Cin) with kernel (Cout, Cin, k, k), zero padding.

    `pad` is symmetric or a (before, after) pair applied to both spatial axes.
    """
    cout, cin, kh, kw = kernel.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise StructuralError(f"conv expects {cin} input channels, got shape {x.shape}")
    lo, hi = (pad, pad) if isinstance(pad, int) else pad
    if lo or hi:
        x = np.pad(x, ((lo, hi), (lo, hi), (0, 0)))
    h, w = x.shape[:2]
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise StructuralError(f"input {x.shape} too small for {kh}x{kw} kernel")
    if kh == 1 and kw == 1:
        cols = x[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride].reshape(ho * wo, cin)
    else:
        win = sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
        cols = win.reshape(ho * wo, cin * kh * kw)  # (Cin, k, k) order matches kernel
    out = cols @ kernel.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return out.reshape(ho, wo, cout)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, out=x)


def maxpool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    return x[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, c).max(axis=(1, 3))


def _quarter_turns(angle: float) -> int | None:
    q = angle / (math.pi / 2)
    k = round(q)
    return k % 4 if abs(q - k) < 1e-9 else None


def rotate_tensor(t: np.ndarray, angle: float, interp: str = "bilinear") -> np.ndarray:
    """Rotate the spatial dims counter-clockwise (as displayed) about the centre.

    Rows grow downward, so with the BEV convention this is a counter-clockwise
    rotation of the ground plane. Quarter turns are exact index permutations;
    other angles use inverse mapping with zero fill.
    """
    if t.shape[0] != t.shape[1]:
        raise StructuralError(f"rotation needs square spatial dims, got {t.shape[:2]}")
    k = _quarter_turns(angle)
    if k is not None:
        return t.copy() if k == 0 else np.ascontiguousarray(np.rot90(t, k, axes=(0, 1)))
    squeeze = t.ndim == 2
    src = t[:, :, None] if squeeze else t
    n = src.shape[0]
    c0 = (n - 1) / 2.0
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    x, y = cols - c0, c0 - rows
    ca, sa = math.cos(angle), math.sin(angle)
    xs, ys = ca * x + sa * y, -sa * x + ca * y  # R(-angle) applied to dest
    u, v = xs + c0, c0 - ys
    out = sample_zero_fill(src, u.ravel(), v.ravel(), interp).reshape(n, n, -1)
    return out[:, :, 0] if squeeze else out


def sample_zero_fill(t: np.ndarray, u: np.ndarray, v: np.ndarray, interp: str = "bilinear") -> np.ndarray:
    """Sample (H, W, C) at column u / row v; texels outside the grid read as zero."""
    h, w, c = t.shape
    out = np.zeros((len(u), c), dtype=t.dtype)
    if interp == "nearest":
        ui, vi = np.rint(u).astype(np.int64), np.rint(v).astype(np.int64)
        ok = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        out[ok] = t[vi[ok], ui[ok]]
        return out
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    u0, v0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = (u - u0).astype(t.dtype), (v - v0).astype(t.dtype)
    for du, dv, wt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        out[ok] += wt[ok, None] * t[vv[ok], uu[ok]]
    return out


def bilinear_sample_many(t: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear samples at (N, 2) column/row coordinates inside the grid."""
    h, w = t.shape[:2]
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    if np.any((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)):
        raise RangeError(f"sample coordinate outside [0, {w - 1}] x [0, {h - 1}]")
    u0 = np.minimum(np.floor(u).astype(np.int64), w - 1)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 1)
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    fu, fv = (u - u0)[:, None], (v - v0)[:, None]
    t64 = t.astype(np.float64) if t.dtype != np.float64 else t
    top = t64[v0, u0] * (1 - fu) + t64[v0, u1] * fu
    bot = t64[v1, u0] * (1 - fu) + t64[v1, u1] * fu
    return (top * (1 - fv) + bot * fv).astype(t.dtype)


def bilinear_sample(t: np.ndarray, u: float, v: float) -> np.ndarray:
    """C-vector at column u, row v; exact at integer coordinates."""
    return bilinear_sample_many(t, np.array([[u, v]]))[0]


# ---------------------------------------------------------------- layer spec


@dataclass(frozen=True)
class Conv:
    k: int
    in_c: int
    out_c: int
    stride: int = 1
    pad: int | tuple | None = None  # int, (before, after), or None for k // 2

    @property
    def padding(self) -> tuple[int, int]:
        if self.pad is None:
            return (self.k // 2, self.k // 2)
        if isinstance(self.pad, int):
            return (self.pad, self.pad)
        return (int(self.pad[0]), int(self.pad[1]))


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    """2x2 window, stride 2."""


@dataclass(frozen=True)
class Residual:
    """Two 3x3 convs with identity skip; 1x1 projection when shape changes."""

    in_c: int
    out_c: int
    stride: int = 1

    @property
    def projects(self) -> bool:
        return self.in_c != self.out_c or self.stride != 1


@dataclass(frozen=True)
class Affine:
    """Per-channel scale and shift (slot for folded batch-norm of trained weights)."""

    channels: int


Layer = Union[Conv, ReLU, MaxPool, Residual, Affine]


@dataclass(frozen=True)
class BackboneSpec:
    layers: tuple

    def __post_init__(self):
        c = self.input_channels
        for layer in self.layers:
            if isinstance(layer, (Conv, Residual)):
                if layer.in_c != c:
                    raise StructuralError(f"layer {layer} expects {layer.in_c} channels, chain has {c}")
                c = layer.out_c
            elif isinstance(layer, Affine) and layer.channels != c:
                raise StructuralError(f"affine over {layer.channels} channels, chain has {c}")

    @property
    def input_channels(self) -> int:
        for layer in self.layers:
            if isinstance(layer, (Conv, Residual)):
                return layer.in_c
        raise StructuralError("backbone has no convolution")

    @property
    def output_channels(self) -> int:
        c = self.input_channels
        for layer in self.layers:
            if isinstance(layer, (Conv, Residual)):
                c = layer.out_c
        return c

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            if isinstance(layer, (Conv, Residual)):
                s *= layer.stride
            elif isinstance(layer, MaxPool):
                s *= 2
        return s

    def param_shapes(self) -> list[tuple[int, tuple[int, ...]]]:
        """(kind tag, shape) of every parameter block, in storage order."""
        shapes: list[tuple[int, tuple[int, ...]]] = []

        def conv(k, i, o):
            shapes.append((KIND_KERNEL, (o, i, k, k)))
            shapes.append((KIND_BIAS, (o,)))

        for layer in self.layers:
            if isinstance(layer, Conv):
                conv(layer.k, layer.in_c, layer.out_c)
            elif isinstance(layer, Residual):
                conv(3, layer.in_c, layer.out_c)
                conv(3, layer.out_c, layer.out_c)
                if layer.projects:
                    conv(1, layer.in_c, layer.out_c)
            elif isinstance(layer, Affine):
                shapes.append((KIND_SCALE, (layer.channels,)))
                shapes.append((KIND_SHIFT, (layer.channels,)))
        return shapes


KIND_KERNEL, KIND_BIAS, KIND_SCALE, KIND_SHIFT = 1, 2, 3, 4


# The stem is padded (1, 4) instead of (3, 3) so feature cell j is centred on
# input pixel 8j + 3, within half a pixel of the centre-symmetric 8j + 3.5.
# Rotations of the image and of the feature map then share a centre.
STEM_PAD = (1, 4)


def default_spec() -> BackboneSpec:
    """ResNet-34 truncated after conv3_x: C = 128, total stride 8."""
    layers: list = [Conv(7, 1, 64, stride=2, pad=STEM_PAD), ReLU(), MaxPool()]
    layers += [Residual(64, 64) for _ in range(3)]
    layers += [Residual(64, 128, stride=2)] + [Residual(128, 128) for _ in range(3)]
    return BackboneSpec(tuple(layers))


def small_spec(width: int = 16) -> BackboneSpec:
    """A cheap two-stage net with the same stride 8, for tests and sweeps."""
    return BackboneSpec((Conv(7, 1, width, stride=2, pad=STEM_PAD), ReLU(), MaxPool(), Residual(width, width), Residual(width, 2 * width, stride=2)))


# ---------------------------------------------------------------- weights


@dataclass
class WeightSet:
    blocks: list  # list of (kind, float32 array) matching spec.param_shapes()
    provenance: str = "seeded_random(0)"
    vlad: object | None = None  # VladParams
    pca: object | None = None  # PcaProjection
    extra: dict = field(default_factory=dict)

    def check(self, spec: BackboneSpec) -> None:
        want = spec.param_shapes()
        got = [(k, tuple(a.shape)) for k, a in self.blocks]
        if want != got:
            raise StructuralError(f"weight blocks do not match backbone spec ({len(got)} vs {len(want)} blocks)")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for kind, arr in self.blocks:
            h.update(bytes([kind]))
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def init_weights(spec: BackboneSpec, seed: int) -> WeightSet:
    """He-normal kernels (std sqrt(2 / fan_in)), zero biases, unit affine."""
    rng = np.random.default_rng(seed)
    blocks = []
    for kind, shape in spec.param_shapes():
        if kind == KIND_KERNEL:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif kind == KIND_SCALE:
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        blocks.append((kind, arr.astype(DTYPE)))
    return WeightSet(blocks, provenance=f"seeded_random({seed})")


# ---------------------------------------------------------------- forward


def _run(x: np.ndarray, layers, params: Iterator[np.ndarray]) -> np.ndarray:
    for layer in layers:
        if isinstance(layer, Conv):
            x = conv2d(x, next(params), next(params), layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            x = relu(x)
        elif isinstance(layer, MaxPool):
            x = maxpool2(x)
        elif isinstance(layer, Affine):
            x = x * next(params) + next(params)
        elif isinstance(layer, Residual):
            y = relu(conv2d(x, next(params), next(params), layer.stride, 1))
            y = conv2d(y, next(params), next(params), 1, 1)
            if layer.projects:
                x = conv2d(x, next(params), next(params), layer.stride, 0)
            x = relu(y + x)
        else:
            raise StructuralError(f"unknown layer {layer!r}")
    return x


def forward(img, spec: BackboneSpec, w: WeightSet) -> np.ndarray:
    """Feature map (S/s, S/s, C) of a BEV image or (S, S[, 1]) array."""
    pixels = getattr(img, "pixels", img)
    x = np.asarray(pixels, dtype=DTYPE)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[0] != x.shape[1]:
        raise StructuralError(f"backbone input must be square, got {x.shape[:2]}")
    if x.shape[2] != spec.input_channels:
        raise StructuralError(f"backbone expects {spec.input_channels} channels, got {x.shape[2]}")
    w.check(spec)
    out = _run(np.ascontiguousarray(x), spec.layers, (a for _, a in w.blocks))
    if not np.isfinite(out).all():
        raise StructuralError("non-finite activations in feature map")
    return out
