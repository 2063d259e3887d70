"""Image batches and the fixed image operators.

Batches are [N, C, H, W] float64 with values in [-1, 1] and C in {1, 3}.
Downscaling comes in two flavours (exact block mean, and separable
Catmull-Rom with reflect padding sampled at block centres); both exist as
plain numpy transforms and as graph builders so the conditioning path stays
differentiable.  Color quantization snaps to the r-grid (ties away from
zero) and rides a straight-through estimator inside graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor, round_half_away

COLOR_RES = 2.0 / 255.0  # one 8-bit color step on [-1, 1] images

DOWNSCALE_METHODS = ("average-pool", "bicubic")

# Catmull-Rom (a = -0.5) taps for 2x reduction at block centres, i.e. the
# kernel evaluated at offsets +-0.5 and +-1.5.
_CR_TAPS = (-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0)


class FormatError(ValueError):
    """Raised for malformed image files."""


@dataclass(frozen=True)
class ImageBatch:
    """Validated [N, C, H, W] float64 image stack on [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        # force canonical C layout: reduction order (and thus the last ulp
        # of block means) depends on strides, and byte-grid images put
        # those means exactly on quantizer tie points
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"image batch must be 4-D, got shape {arr.shape}")
        if arr.shape[1] not in (1, 3):
            raise ValueError(f"image batch needs 1 or 3 channels, got {arr.shape[1]}")
        if not np.isfinite(arr).all():
            raise ValueError("image batch contains non-finite values")
        if arr.size and (arr.min() < -1.0 - 1e-9 or arr.max() > 1.0 + 1e-9):
            raise ValueError("image batch values must lie in [-1, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]


def _as_batch(x) -> ImageBatch:
    # batch-level ops take either the wrapper or a raw array; coercion keeps
    # the validation either way
    return x if isinstance(x, ImageBatch) else ImageBatch(np.asarray(x, dtype=np.float64))


def _check_factor(factor, h, w):
    f = int(factor)
    if f < 1 or f & (f - 1):
        raise ValueError(f"downscale factor must be a power of two, got {factor}")
    if h % f or w % f:
        raise ValueError(f"factor {f} does not divide {h}x{w}")
    return f


def _bicubic_halve(arr):
    """One separable 2x Catmull-Rom reduction with reflect padding."""
    for axis in (2, 3):
        pads = [(0, 0)] * 4
        pads[axis] = (1, 2)
        p = np.pad(arr, pads, mode="reflect")
        n = arr.shape[axis]
        pieces = []
        for d, w in enumerate(_CR_TAPS):
            sl = [slice(None)] * 4
            sl[axis] = slice(d, d + n - 1, 2)
            pieces.append(w * p[tuple(sl)])
        arr = pieces[0] + pieces[1] + pieces[2] + pieces[3]
    return arr


def downscale(x: ImageBatch, factor, method="average-pool") -> ImageBatch:
    """Reduce both spatial extents by `factor` (a power of two).

    average-pool takes exact block means; bicubic applies successive 2x
    Catmull-Rom halvings (block-centre sampling, reflect borders).  The
    result is clamped to [-1, 1]; bicubic can overshoot before the clamp.
    """
    x = _as_batch(x)
    n, c, h, w = x.shape
    f = _check_factor(factor, h, w)
    if method not in DOWNSCALE_METHODS:
        raise ValueError(f"unknown downscale method {method!r}")
    if f == 1:
        return x
    if method == "average-pool":
        out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    else:
        out = x.data
        for _ in range(f.bit_length() - 1):
            out = _bicubic_halve(out)
        out = np.clip(out, -1.0, 1.0)
    return ImageBatch(out)


def _bicubic_kernel_const(graph, channels):
    k2 = np.outer(np.array(_CR_TAPS + (0.0,)), np.array(_CR_TAPS + (0.0,)))
    k = np.zeros((channels, channels, 5, 5))
    for ci in range(channels):
        k[ci, ci] = k2
    return graph.const(k)


def _reflect_pad_graph(t: Tensor, axis) -> Tensor:
    # rows (-1, H, H+1) map to (1, H-2, H-3); the extra tail row feeds the
    # zero tap of the widened odd kernel
    n = t.shape[axis]
    full_starts = [0] * 4
    full_stops = list(t.shape)

    def row(i):
        starts = list(full_starts)
        stops = list(full_stops)
        starts[axis] = i
        stops[axis] = i + 1
        return engine.crop(t, starts, stops)

    return engine.concat([row(1), t, row(n - 2), row(n - 3)], axis=axis)


def downscale_graph(t: Tensor, factor, method="average-pool") -> Tensor:
    """Graph twin of `downscale` (no clamp; feed into quantize_graph)."""
    n, c, h, w = t.shape
    f = _check_factor(factor, h, w)
    if method not in DOWNSCALE_METHODS:
        raise ValueError(f"unknown downscale method {method!r}")
    if f == 1:
        return t
    if method == "average-pool":
        return engine.avg_pool(t, f)
    kernel = _bicubic_kernel_const(t.graph, c)
    for _ in range(f.bit_length() - 1):
        t = _reflect_pad_graph(_reflect_pad_graph(t, 2), 3)
        t = engine.conv2d(t, kernel, stride=2, pad=0)
    return t


def _grid_limit(r):
    # largest k with |k * r| <= 1, so quantized output stays on the grid
    return int(math.floor((1.0 + 1e-9) / r))


def quantize_colors(x: ImageBatch, r=COLOR_RES) -> ImageBatch:
    """Snap every value to the nearest multiple of r, ties away from zero.

    The rounded step index is clamped to the last grid point inside [-1, 1]
    (for r = 2/255 that is +-127r), which keeps outputs simultaneously
    on-grid, in-range, and idempotent.
    """
    if r <= 0:
        raise ValueError("color resolution must be positive")
    x = _as_batch(x)
    kmax = _grid_limit(r)
    k = np.clip(round_half_away(x.data / r), -kmax, kmax)
    return ImageBatch(k * r)


def quantize_graph(t: Tensor, r=COLOR_RES) -> Tensor:
    """Straight-through quantization: forward snaps to the r-grid, the
    backward pass is the identity."""
    if r <= 0:
        raise ValueError("color resolution must be positive")
    hi = _grid_limit(r) * r
    g = t.graph
    q = engine.scale(engine.round_nearest(engine.scale(t, 1.0 / r)), r)
    hi_c = g.const(np.full(t.shape, hi))
    lo_c = g.const(np.full(t.shape, -hi))
    q = engine.sub(q, engine.leaky_relu(engine.sub(q, hi_c), slope=0.0))
    q = engine.add(q, engine.leaky_relu(engine.sub(lo_c, q), slope=0.0))
    return engine.add(engine.stop_gradient(engine.sub(q, t)), t)


def mirror_h(x: ImageBatch) -> ImageBatch:
    """Flip horizontally (reverse the W axis)."""
    return ImageBatch(_as_batch(x).data[:, :, :, ::-1].copy())


def add_uniform_noise(x: ImageBatch, amplitude, rng) -> ImageBatch:
    """Add U(-amplitude, amplitude) noise per value, clamped to [-1, 1].

    amplitude 0 returns `x` unchanged without consuming randomness.
    """
    if amplitude < 0:
        raise ValueError("noise amplitude must be >= 0")
    x = _as_batch(x)
    if amplitude == 0:
        return x
    noisy = x.data + rng.uniform(-amplitude, amplitude, size=x.shape)
    return ImageBatch(np.clip(noisy, -1.0, 1.0))


def upsample_nearest(arr: np.ndarray, factor) -> np.ndarray:
    """Nearest-neighbour spatial upsampling of a raw [..., H, W] array."""
    f = int(factor)
    if f < 1:
        raise ValueError("upsample factor must be >= 1")
    if f == 1:
        return arr
    return np.repeat(np.repeat(arr, f, axis=-2), f, axis=-1)


# ---------------------------------------------------------------------------
# binary PPM (P6) / PGM (P5) at maxval 255

def _tokenize_header(blob, count):
    """Yield `count` whitespace-separated tokens, honoring '#' comments;
    returns (tokens, payload_offset)."""
    tokens = []
    i = 0
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < n and not blob[i:i + 1].isspace() and blob[i:i + 1] != b"#":
            i += 1
        if i == start:
            raise FormatError("truncated image header")
        tokens.append(blob[start:i])
    if i >= n or not blob[i:i + 1].isspace():
        raise FormatError("missing whitespace after image header")
    return tokens, i + 1


def read_image(path) -> ImageBatch:
    """Read one binary PPM/PGM file as a [1, C, H, W] batch on [-1, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _tokenize_header(blob, 4)
    magic = tokens[0]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported image magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric image header field") from exc
    if w < 1 or h < 1:
        raise FormatError(f"bad image dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (need 255)")
    channels = 3 if magic == b"P6" else 1
    payload = blob[offset:]
    need = w * h * channels
    if len(payload) != need:
        raise FormatError(f"payload is {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    arr = arr.reshape(h, w, channels).transpose(2, 0, 1)[None]
    return ImageBatch(arr * (2.0 / 255.0) - 1.0)


def write_image(path, image) -> None:
    """Write a [C, H, W] array (or a single-image batch) as binary PPM/PGM.

    Values are clamped to [-1, 1] here and nowhere upstream, then mapped to
    bytes via round((v + 1) / 2 * 255).
    """
    if isinstance(image, ImageBatch):
        if len(image) != 1:
            raise ValueError("write_image takes exactly one image")
        arr = image.data[0]
    else:
        arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected [C, H, W] with C in {{1, 3}}, got {arr.shape}")
    c, h, w = arr.shape
    v = np.clip(arr, -1.0, 1.0)
    b = np.clip(round_half_away((v + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(b.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# procedural toy faces

def make_toy_dataset(count, size, seed=0) -> ImageBatch:
    """Deterministic toy face images: tinted background, elliptical head,
    two (unequal) eyes, a mouth arc.  Image i depends only on (seed, i)."""
    if size < 16 or size & (size - 1):
        raise ValueError(f"toy image size must be a power of two >= 16, got {size}")
    out = np.empty((count, 3, size, size))
    for i in range(count):
        out[i] = _toy_face(seed, i, size)
    return ImageBatch(out)


def _toy_face(seed, index, s):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(index,))))
    yy, xx = np.mgrid[0:s, 0:s] + 0.5

    bg = rng.uniform(-0.95, -0.4) + rng.uniform(-0.08, 0.08, size=3)
    cx = s * (0.5 + rng.uniform(-0.06, 0.06))
    cy = s * (0.5 + rng.uniform(-0.05, 0.05))
    ax = s * rng.uniform(0.26, 0.40)
    ay = s * rng.uniform(0.30, 0.44)
    head = rng.uniform(0.05, 0.75) + rng.uniform(-0.15, 0.15, size=3)
    eye_y = cy - ay * rng.uniform(0.25, 0.45)
    eye_dx = ax * rng.uniform(0.35, 0.55)
    r_left = s * rng.uniform(0.035, 0.07)
    r_right = r_left * rng.uniform(0.7, 1.3)  # left/right asymmetry
    eye_shade = rng.uniform(-1.0, -0.55)
    mouth_y = cy + ay * rng.uniform(0.35, 0.55)
    mouth_w = ax * rng.uniform(0.45, 0.75)
    mouth_h = ay * rng.uniform(0.10, 0.22)
    mouth_shade = rng.uniform(-0.85, -0.25)

    img = np.empty((3, s, s))
    img[:] = bg[:, None, None]
    head_mask = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    for ch in range(3):
        img[ch][head_mask] = head[ch]
    for ex, er in ((cx - eye_dx, r_left), (cx + eye_dx, r_right)):
        eye = (xx - ex) ** 2 + (yy - eye_y) ** 2 <= er ** 2
        img[:, eye] = eye_shade
    d = np.sqrt(((xx - cx) / mouth_w) ** 2 + ((yy - mouth_y) / mouth_h) ** 2)
    mouth = (np.abs(d - 1.0) <= 0.25) & (yy >= mouth_y)
    img[:, mouth] = mouth_shade
    return np.clip(img, -1.0, 1.0)
