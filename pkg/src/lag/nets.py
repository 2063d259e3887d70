"""Generator and critic networks plus the progressive-growing schedule.

The generator is a residual trunk at input resolution followed by one
upsample stage per factor-of-two, each with its own to-image head; during a
fade the previous head's (nearest-upsampled) output is blended in.  The
critic mirrors this shape in reverse and factors into a projection P into a
latent space and a final affine score F, so the projection can also serve
as a perceptual distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor


@dataclass(frozen=True)
class ModelSpec:
    """Static architecture description shared by generator and critic."""

    channels: int = 3
    y_size: int = 4
    x_size: int = 32
    width: int = 32
    blocks: int = 4
    latent_n: int = 16
    latent_p: int = 64
    slope: float = 0.2

    def __post_init__(self):
        for name in ("y_size", "x_size"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.x_size <= self.y_size:
            raise ValueError("x_size must exceed y_size")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def stages(self):
        return (self.x_size // self.y_size).bit_length() - 1

    def stage_resolution(self, stage):
        return self.y_size << (stage + 1)


@dataclass(frozen=True)
class StageState:
    """Active progressive stage and its fade-in weight."""

    stage: int
    alpha: float


def progressive_schedule(step, stages, fade, hold, progressive=True) -> StageState:
    """Stage/alpha for a global step: each stage fades in over `fade` steps
    then holds for `hold`; stage 0 starts fully faded in; the final stage
    persists once reached.  With `progressive` off the final stage is always
    active at alpha 1."""
    if step < 0:
        raise ValueError("step must be >= 0")
    last = stages - 1
    if not progressive:
        return StageState(last, 1.0)
    span = fade + hold
    if span <= 0:
        return StageState(last, 1.0)
    s = step // span
    if s >= stages:
        return StageState(last, 1.0)
    if s == 0 or fade == 0:
        return StageState(int(s), 1.0)
    t = step - s * span
    return StageState(int(s), min(1.0, t / fade))


# ---------------------------------------------------------------------------
# parameters

def _he_conv(rng, k_out, k_in, kh, kw):
    fan_in = k_in * kh * kw
    return rng.standard_normal((k_out, k_in, kh, kw)) * np.sqrt(2.0 / fan_in)


def _he_linear(rng, n_in, n_out):
    return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)


def init_generator(spec: ModelSpec, rng) -> dict[str, np.ndarray]:
    """He fan-in initialised generator parameters, in a fixed draw order."""
    w, c, n = spec.width, spec.channels, spec.latent_n
    p = {}
    p["in.w"] = _he_conv(rng, w, c + n, 3, 3)
    p["in.b"] = np.zeros(w)
    for i in range(spec.blocks):
        p[f"block{i}.c1.w"] = _he_conv(rng, w, w, 3, 3)
        p[f"block{i}.c1.b"] = np.zeros(w)
        p[f"block{i}.c2.w"] = _he_conv(rng, w, w, 3, 3)
        p[f"block{i}.c2.b"] = np.zeros(w)
    for s in range(spec.stages):
        p[f"up{s}.w"] = _he_conv(rng, w, w, 3, 3)
        p[f"up{s}.b"] = np.zeros(w)
    for s in range(spec.stages):
        p[f"img{s}.w"] = _he_conv(rng, c, w, 3, 3)
        p[f"img{s}.b"] = np.zeros(c)
    return p


def init_critic(spec: ModelSpec, rng) -> dict[str, np.ndarray]:
    """He fan-in initialised critic parameters.

    Everything except `score.*` is the projection P; `score.*` is the final
    affine map F, so the two update groups stay disjoint.
    """
    w, c = spec.width, spec.channels
    p = {}
    for s in range(spec.stages):
        p[f"from{s}.w"] = _he_conv(rng, w, 2 * c, 3, 3)
        p[f"from{s}.b"] = np.zeros(w)
    for s in range(spec.stages):
        p[f"down{s}.w"] = _he_conv(rng, w, w, 3, 3)
        p[f"down{s}.b"] = np.zeros(w)
    for i in range(spec.blocks):
        p[f"block{i}.c1.w"] = _he_conv(rng, w, w, 3, 3)
        p[f"block{i}.c1.b"] = np.zeros(w)
        p[f"block{i}.c2.w"] = _he_conv(rng, w, w, 3, 3)
        p[f"block{i}.c2.b"] = np.zeros(w)
    p["proj.w"] = _he_linear(rng, w, spec.latent_p)
    p["proj.b"] = np.zeros(spec.latent_p)
    p["score.w"] = _he_linear(rng, spec.latent_p, 1)
    p["score.b"] = np.zeros(1)
    return p


def lift_params(graph, params, trainable):
    """Insert numpy parameters into a graph as var (trainable) or const."""
    enter = graph.var if trainable else graph.const
    return {name: enter(arr) for name, arr in params.items()}


# ---------------------------------------------------------------------------
# forward passes (graph builders)

def _conv(x, w, b, pad=1):
    h = engine.conv2d(x, w, stride=1, pad=pad)
    return engine.add(h, engine.broadcast(b, h.shape, (1,)))


def _residual_trunk(h, p, blocks, slope, prefix=""):
    for i in range(blocks):
        t = engine.leaky_relu(_conv(h, p[f"{prefix}block{i}.c1.w"],
                                    p[f"{prefix}block{i}.c1.b"]), slope)
        t = _conv(t, p[f"{prefix}block{i}.c2.w"], p[f"{prefix}block{i}.c2.b"])
        h = engine.add(h, t)
    return h


def generator_forward(spec: ModelSpec, p: dict[str, Tensor], y: Tensor,
                      z: Tensor, stage: StageState) -> Tensor:
    """G(y, z) at the given progressive stage.

    y: [N, C, y_size, y_size], z: [N, latent_n].  Output is linear (no tanh,
    no clamp) at resolution y_size * 2**(stage+1).
    """
    n = y.shape[0]
    if z.shape != (n, spec.latent_n):
        raise engine.ShapeError(f"z must be [{n}, {spec.latent_n}], got {z.shape}")
    if y.shape[2] != spec.y_size or y.shape[3] != spec.y_size:
        raise engine.ShapeError(f"y must be {spec.y_size}x{spec.y_size}, got {y.shape}")
    zmap = engine.broadcast(z, (n, spec.latent_n, spec.y_size, spec.y_size), (0, 1))
    h = engine.leaky_relu(_conv(engine.concat([y, zmap], axis=1),
                                p["in.w"], p["in.b"]), spec.slope)
    h = _residual_trunk(h, p, spec.blocks, spec.slope)

    fading = stage.stage > 0 and stage.alpha < 1.0
    prev_img = None
    out = None
    for s in range(stage.stage + 1):
        h = engine.leaky_relu(_conv(engine.upsample2x(h),
                                    p[f"up{s}.w"], p[f"up{s}.b"]), spec.slope)
        if fading and s == stage.stage - 1:
            prev_img = _conv(h, p[f"img{s}.w"], p[f"img{s}.b"])
        if s == stage.stage:
            out = _conv(h, p[f"img{s}.w"], p[f"img{s}.b"])
    if fading:
        out = engine.add(engine.scale(out, stage.alpha),
                         engine.scale(engine.upsample2x(prev_img), 1.0 - stage.alpha))
    return out


def critic_project(spec: ModelSpec, p: dict[str, Tensor], x: Tensor,
                   cond: Tensor, stage: StageState) -> Tensor:
    """P(x, cond) -> [N, latent_p] perceptual latents.

    x and cond share the stage resolution; cond carries the low-resolution
    consistency map (all zeros for real samples).
    """
    s = stage.stage
    res = spec.stage_resolution(s)
    if x.shape[2] != res or x.shape[3] != res:
        raise engine.ShapeError(f"critic stage {s} expects {res}x{res}, got {x.shape}")
    if cond.shape != x.shape:
        raise engine.ShapeError(f"cond shape {cond.shape} must match x {x.shape}")

    h = engine.leaky_relu(_conv(engine.concat([x, cond], axis=1),
                                p[f"from{s}.w"], p[f"from{s}.b"]), spec.slope)
    h = engine.avg_pool(engine.leaky_relu(
        _conv(h, p[f"down{s}.w"], p[f"down{s}.b"]), spec.slope), 2)
    if s > 0 and stage.alpha < 1.0:
        skip_in = engine.concat([engine.avg_pool(x, 2), engine.avg_pool(cond, 2)], axis=1)
        skip = engine.leaky_relu(_conv(skip_in, p[f"from{s - 1}.w"],
                                       p[f"from{s - 1}.b"]), spec.slope)
        h = engine.add(engine.scale(h, stage.alpha),
                       engine.scale(skip, 1.0 - stage.alpha))
    for t in range(s - 1, -1, -1):
        h = engine.avg_pool(engine.leaky_relu(
            _conv(h, p[f"down{t}.w"], p[f"down{t}.b"]), spec.slope), 2)
    h = _residual_trunk(h, p, spec.blocks, spec.slope)
    pooled = engine.reduce_mean(h, axes=(2, 3))
    lat = engine.matmul(pooled, p["proj.w"])
    return engine.add(lat, engine.broadcast(p["proj.b"], lat.shape, (1,)))


def critic_score(p: dict[str, Tensor], latent: Tensor) -> Tensor:
    """F(latent) -> [N, 1] affine critic scores."""
    s = engine.matmul(latent, p["score.w"])
    return engine.add(s, engine.broadcast(p["score.b"], s.shape, (1,)))
