"""Adversarial objectives: the low-resolution consistency map fed to the
critic, the unit-gradient penalty, the latent center loss, and the assembled
generator/critic totals.

Everything here builds graph nodes; numbers come out only when the caller
evaluates them.  The critic is conditioned not on the low-resolution image
itself but on a map of how far a candidate's quantized downscale strays from
it, so a perfectly consistent fake is conditioned exactly like a real sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import NumericsError, ShapeError, Tensor
from .imaging import COLOR_RES, downscale_graph, quantize_graph
from .nets import critic_project


@dataclass(frozen=True)
class LossTerms:
    """Scalar pieces of one update, plus the weighted totals."""

    wass_real: object
    wass_fake: object
    grad_penalty: object
    center: object
    gen_total: object
    critic_total: object


@dataclass(frozen=True)
class InterpolationDraw:
    """Per-sample mixing weights and the blended points they produce."""

    rho: np.ndarray
    x_hat: Tensor


def zero_map(like: Tensor) -> Tensor:
    """The conditioning used for real samples: an all-zeros constant."""
    return like.graph.zeros(like.shape)


def cond_map(y: Tensor, x_cand: Tensor, factor, method="average-pool",
             r=COLOR_RES) -> Tensor:
    """Consistency conditioning for a generated candidate.

    Returns |y - quantize(downscale(x_cand))| / r at y's resolution, built
    in-graph so gradients flow back into x_cand through the quantizer's
    straight-through path.  One quantization step of disagreement scores 1.
    """
    h = quantize_graph(downscale_graph(x_cand, factor, method), r)
    if h.shape != y.shape:
        raise ShapeError(f"downscaled candidate {h.shape} does not match y {y.shape}")
    return engine.scale(engine.absolute(engine.sub(y, h)), 1.0 / r)


def upsample_map(m: Tensor, factor) -> Tensor:
    """Nearest-upsample a conditioning map so the critic can take it
    alongside a full-resolution image."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    while factor > 1:
        m = engine.upsample2x(m)
        factor //= 2
    return m


def interpolate(x: Tensor, x_fake: Tensor, rho) -> InterpolationDraw:
    """x_hat = rho*x + (1-rho)*x_fake with one rho per sample."""
    if x.shape != x_fake.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_fake.shape}")
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (x.shape[0],):
        raise ShapeError(f"rho must have shape ({x.shape[0]},), got {rho.shape}")
    if rho.min() < 0.0 or rho.max() > 1.0:
        raise ValueError("rho values must lie in [0, 1]")
    g = x.graph
    rho_b = engine.broadcast(g.const(rho), x.shape, (0,))
    ones = g.const(np.ones(x.shape))
    x_hat = engine.add(engine.mul(rho_b, x),
                       engine.mul(engine.sub(ones, rho_b), x_fake))
    return InterpolationDraw(rho=rho, x_hat=x_hat)


def gradient_penalty(critic, x: Tensor, x_fake: Tensor, cond: Tensor,
                     rho) -> Tensor:
    """Mean over the batch of (||d critic / d input||_2 - 1)^2 at interpolates.

    The norm runs over the critic's whole input point: the interpolated
    image x_hat and the conditioning slot together.  The conditioning map
    counts color steps, so a critic left unconstrained there can score
    arbitrarily large multiples of any residual and its output scale runs
    away; including the slot keeps the critic 1-Lipschitz over everything
    it sees.

    `critic` maps (x_hat, cond) to per-sample scores of shape [N] or [N, 1]
    and must not couple samples, so the gradient of the summed score stacks
    the per-sample gradients.  The result stays differentiable with respect
    to anything the critic closed over, which is what the critic update
    needs.

    `cond` is either a ready tensor or a callable taking x_hat, for
    conditioning derived from the interpolate itself.  Either way it is
    gradient-blocked here: the image partial must be the direct slot
    derivative, not composed through the conditioning computation.
    """
    draw = interpolate(x, x_fake, rho)
    cond_t = cond(draw.x_hat) if callable(cond) else cond
    cond_t = engine.stop_gradient(cond_t)
    score = critic(draw.x_hat, cond_t)
    n = x.shape[0]
    if score.shape not in ((n,), (n, 1)):
        raise ShapeError(f"critic scores must be [{n}] or [{n}, 1], got {score.shape}")
    gx, gc = engine.grad(engine.reduce_sum(score), [draw.x_hat, cond_t])

    def sumsq(t):
        return engine.reduce_sum(engine.square(t),
                                 axes=tuple(range(1, len(t.shape))))

    norm = engine.sqrt(engine.add(sumsq(gx), sumsq(gc)))
    ones = x.graph.const(np.ones(norm.shape))
    return engine.reduce_mean(engine.square(engine.sub(norm, ones)))


def center_loss(spec, critic_params, x: Tensor, g_center: Tensor,
                cond_real: Tensor, cond_center: Tensor, stage) -> Tensor:
    """Mean squared distance between the critic projections of the real
    sample and the zero-latent prediction.

    This is a generator-side loss: the caller lifts critic_params as
    constants so the critic cannot zero the term by collapsing the
    projection.
    """
    p_real = critic_project(spec, critic_params, x, cond_real, stage)
    p_center = critic_project(spec, critic_params, g_center, cond_center, stage)
    return engine.reduce_mean(engine.square(engine.sub(p_real, p_center)))


def assemble_losses(wass_real, wass_fake, grad_penalty, center,
                    gp_weight=10.0, center_weight=1.0) -> LossTerms:
    """Combine scalar terms into the two update totals.

    critic_total = wass_fake - wass_real + gp_weight * grad_penalty
    gen_total    = -wass_fake + center_weight * center

    Works on plain floats or on scalar graph tensors, but all four terms
    must be of the same flavor.
    """
    for v in (wass_real, wass_fake, grad_penalty, center):
        if isinstance(v, (int, float)) and not math.isfinite(v):
            raise NumericsError(f"non-finite loss term {v!r}")
    critic_total = wass_fake - wass_real + gp_weight * grad_penalty
    gen_total = -wass_fake + center_weight * center
    return LossTerms(wass_real=wass_real, wass_fake=wass_fake,
                     grad_penalty=grad_penalty, center=center,
                     gen_total=gen_total, critic_total=critic_total)
