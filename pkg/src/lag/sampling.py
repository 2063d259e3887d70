"""Inference-side helpers: running the generator from a checkpointed state,
assembling comparison grids, and the diversity score.

Generator outputs are linear; `render` clips them to the displayable range
before they are treated as images.  All routines draw from a fresh seeded
stream, never from the training RNG.
"""

from __future__ import annotations

import numpy as np

from .engine import Graph
from .imaging import add_uniform_noise, mirror_h, upsample_nearest
from .nets import StageState, generator_forward, lift_params, progressive_schedule
from .trainer import TrainState, derive_y


def render(arr: np.ndarray) -> np.ndarray:
    """Clip raw generator output into valid image range."""
    return np.clip(arr, -1.0, 1.0)


def current_stage(state: TrainState) -> StageState:
    cfg = state.cfg
    return progressive_schedule(state.step, cfg.model_spec().stages,
                                cfg.fade_steps, cfg.hold_steps,
                                cfg.progressive)


def generate(state: TrainState, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Raw generator output for a batch of low-res inputs and latents."""
    spec = state.cfg.model_spec()
    g = Graph()
    params = lift_params(g, state.gen, trainable=False)
    out = generator_forward(spec, params, g.const(y), g.const(z),
                            current_stage(state))
    return out.value()


def predict(state: TrainState, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Rendered prediction at full output resolution."""
    out = render(generate(state, y, z))
    return upsample_nearest(out, state.cfg.x_size // out.shape[-1])


def predict_center(state: TrainState, y: np.ndarray) -> np.ndarray:
    """The canonical z = 0 prediction."""
    n = state.cfg.model_spec().latent_n
    return predict(state, y, np.zeros((y.shape[0], n)))


def assemble_grid(rows) -> np.ndarray:
    """Stack equally sized [C, H, W] tiles into one image."""
    return np.concatenate(
        [np.concatenate(list(row), axis=2) for row in rows], axis=1)


def sample_grid(state: TrainState, x: np.ndarray, k, seed) -> np.ndarray:
    """One row per input: [x, nearest-upsampled y, center, k z-samples]."""
    cfg = state.cfg
    n_in = x.shape[0]
    spec = cfg.model_spec()
    y = derive_y(x, cfg)
    rng = np.random.default_rng(seed)
    zs = rng.standard_normal((n_in, k, spec.latent_n))
    cols = [x, upsample_nearest(y, cfg.factor), predict_center(state, y)]
    for j in range(k):
        cols.append(predict(state, y, zs[:, j]))
    rows = [[col[i] for col in cols] for i in range(n_in)]
    return assemble_grid(rows)


def mirror_tiles(state: TrainState, x: np.ndarray, steps):
    """Predictions along the interpolation from x to its mirror image.

    Returns (inputs_row, outputs_row): at t = i/(steps-1) the low-res input
    is the quantized downscale of (1-t)x + t*mirror(x).
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    cfg = state.cfg
    xm = mirror_h(x).data
    ins, outs = [], []
    for i in range(steps):
        t = i / (steps - 1)
        y = derive_y((1.0 - t) * x + t * xm, cfg)
        ins.append(upsample_nearest(y, cfg.factor)[0])
        outs.append(predict_center(state, y)[0])
    return ins, outs


def noise_tiles(state: TrainState, x: np.ndarray, amplitudes, seed):
    """Center predictions as increasing uniform noise corrupts the input.

    Returns (inputs_row, outputs_row) for a single image x.
    """
    amps = list(amplitudes)
    if any(a < 0 for a in amps) or any(b < a for a, b in zip(amps, amps[1:])):
        raise ValueError("amplitudes must be non-decreasing and >= 0")
    cfg = state.cfg
    y = derive_y(x, cfg)
    rng = np.random.default_rng(seed)
    ins, outs = [], []
    for a in amps:
        y_a = add_uniform_noise(y, a, rng).data
        ins.append(upsample_nearest(y_a, cfg.factor)[0])
        outs.append(predict_center(state, y_a)[0])
    return ins, outs


def diversity_scores(state: TrainState, x: np.ndarray, k, seed) -> np.ndarray:
    """Per input: mean over pixels of the variance across k z-samples.

    Computed on rendered outputs at the model's native output resolution;
    nearest upsampling would not change the score.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = state.cfg
    spec = cfg.model_spec()
    y = derive_y(x, cfg)
    rng = np.random.default_rng(seed)
    zs = rng.standard_normal((x.shape[0], k, spec.latent_n))
    samples = np.stack([render(generate(state, y, zs[:, j]))
                        for j in range(k)], axis=1)
    return samples.var(axis=1).mean(axis=(1, 2, 3))
