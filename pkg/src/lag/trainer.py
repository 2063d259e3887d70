"""Adversarial training loop: alternating critic/generator Adam updates on
freshly built graphs, a serialized RNG stream for exact resume, and a binary
checkpoint format.

Randomness order within one step is part of the determinism contract:
batch indices, then (z, rho) per critic sub-step, then the generator's z.
All draws come from the single state.rng stream.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .config import TrainConfig, config_from_items, format_config, parse_items
from .engine import Graph, NumericsError
from .imaging import FormatError, downscale, make_toy_dataset, quantize_colors, read_image
from .losses import assemble_losses, center_loss, cond_map, gradient_penalty, upsample_map, zero_map
from .nets import (
    StageState,
    critic_project,
    critic_score,
    generator_forward,
    init_critic,
    init_generator,
    lift_params,
    progressive_schedule,
)

CHECKPOINT_MAGIC = b"LAGC"
CHECKPOINT_VERSION = 1
METRICS_NAME = "metrics.tsv"


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int


def init_adam(params) -> AdamState:
    return AdamState(m={k: np.zeros_like(a) for k, a in params.items()},
                     v={k: np.zeros_like(a) for k, a in params.items()},
                     t=0)


def adam_step(params, grads, state: AdamState, lr, beta1, beta2, eps):
    """Bias-corrected Adam; returns new param and state dicts."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise engine.ShapeError(f"gradient shape {g.shape} != param {p.shape} for {k}")
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for {k}")
        with np.errstate(over="ignore"):
            # extreme-but-finite gradients may overflow the second moment;
            # the update then divides by inf and degrades to a no-op
            m = beta1 * state.m[k] + (1.0 - beta1) * g
            v = beta2 * state.v[k] + (1.0 - beta2) * g * g
            mhat = m / (1.0 - beta1 ** t)
            vhat = v / (1.0 - beta2 ** t)
            new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        if not np.isfinite(new_p[k]).all():
            raise NumericsError(f"non-finite update for {k}")
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    cfg: TrainConfig
    gen: dict[str, np.ndarray]
    critic: dict[str, np.ndarray]
    opt_g: AdamState
    opt_c: AdamState
    step: int
    rng: np.random.Generator


def init_state(cfg: TrainConfig) -> TrainState:
    """Fresh parameters and optimizer state; one stream seeds everything."""
    spec = cfg.model_spec()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    gen = init_generator(spec, rng)
    critic = init_critic(spec, rng)
    return TrainState(cfg=cfg, gen=gen, critic=critic,
                      opt_g=init_adam(gen), opt_c=init_adam(critic),
                      step=0, rng=rng)


def load_dataset(cfg: TrainConfig) -> np.ndarray:
    """Full-resolution training images as a raw [N, C, x, x] array."""
    if cfg.toy:
        return make_toy_dataset(cfg.toy_count, cfg.x_size, seed=cfg.seed).data
    names = sorted(n for n in os.listdir(cfg.dataset)
                   if n.endswith((".ppm", ".pgm")))
    if not names:
        raise FormatError(f"no .ppm/.pgm images in {cfg.dataset!r}")
    imgs = [read_image(os.path.join(cfg.dataset, n)).data for n in names]
    stack = np.concatenate(imgs, axis=0)
    n, c, h, w = stack.shape
    if c != cfg.channels or h != cfg.x_size or w != cfg.x_size:
        raise FormatError(
            f"dataset images are {c}x{h}x{w}, config wants "
            f"{cfg.channels}x{cfg.x_size}x{cfg.x_size}")
    return stack


def derive_y(x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Low-resolution input: quantized downscale of the full-res batch."""
    return quantize_colors(downscale(x, cfg.factor, cfg.downscale_method)).data


# ---------------------------------------------------------------------------
# loss graphs (seams for wiring probes; each call builds a fresh graph)

def _stage_inputs(cfg: TrainConfig, x: np.ndarray, stage: StageState):
    spec = cfg.model_spec()
    res = spec.stage_resolution(stage.stage)
    x_s = downscale(x, cfg.x_size // res, cfg.downscale_method).data
    return spec, res, x_s


def build_critic_loss(cfg: TrainConfig, gen_np, critic_np, x, y, z, rho,
                      stage: StageState):
    """Graph for one critic update; generator parameters enter as constants.

    Returns (loss_terms, critic_vars).
    """
    spec, res, x_s = _stage_inputs(cfg, x, stage)
    factor = res // cfg.y_size
    g = Graph()
    gp = lift_params(g, gen_np, trainable=False)
    cp = lift_params(g, critic_np, trainable=True)
    y_t = g.const(y)
    fake = generator_forward(spec, gp, y_t, g.const(z), stage)
    x_t = g.const(x_s)

    def critic(img, cond):
        return critic_score(cp, critic_project(spec, cp, img, cond, stage))

    def fake_cond(img):
        return upsample_map(cond_map(y_t, img, factor, cfg.downscale_method), factor)

    wass_real = engine.reduce_mean(critic(x_t, zero_map(x_t)))
    wass_fake = engine.reduce_mean(critic(fake, fake_cond(fake)))
    # the interpolate carries its own residual map, so the penalty probes
    # the critic at self-consistent input points: real samples pair with
    # the zero map at one end, candidates with their residuals at the other
    penalty = gradient_penalty(critic, x_t, fake, fake_cond, rho)
    terms = assemble_losses(wass_real, wass_fake, penalty, g.zeros(()),
                            gp_weight=cfg.gp_weight,
                            center_weight=cfg.center_weight)
    return terms, cp


def build_generator_loss(cfg: TrainConfig, gen_np, critic_np, x, y, z,
                         stage: StageState):
    """Graph for one generator update; critic parameters enter as constants.

    Returns (loss_terms, generator_vars).
    """
    spec, res, x_s = _stage_inputs(cfg, x, stage)
    factor = res // cfg.y_size
    g = Graph()
    gp = lift_params(g, gen_np, trainable=True)
    cp = lift_params(g, critic_np, trainable=False)
    y_t = g.const(y)
    x_t = g.const(x_s)

    def fake_cond(img):
        return upsample_map(cond_map(y_t, img, factor, cfg.downscale_method), factor)

    fake = generator_forward(spec, gp, y_t, g.const(z), stage)
    wass_fake = engine.reduce_mean(
        critic_score(cp, critic_project(spec, cp, fake, fake_cond(fake), stage)))
    g_center = generator_forward(spec, gp, y_t,
                                 g.zeros((x.shape[0], spec.latent_n)), stage)
    center = center_loss(spec, cp, x_t, g_center, zero_map(x_t),
                         fake_cond(g_center), stage)
    terms = assemble_losses(g.zeros(()), wass_fake, g.zeros(()), center,
                            gp_weight=cfg.gp_weight,
                            center_weight=cfg.center_weight)
    return terms, gp


def _apply_update(total, var_tensors, params, opt, cfg, extra=()):
    """Evaluate gradients plus any extra scalars, then take one Adam step."""
    names = list(var_tensors)
    grads_t = engine.grad(total, [var_tensors[k] for k in names])
    values = engine.evaluate(list(grads_t) + list(extra))
    grads = dict(zip(names, values[:len(names)]))
    new_params, new_opt = adam_step(params, grads, opt, cfg.lr, cfg.beta1,
                                    cfg.beta2, cfg.eps)
    return new_params, new_opt, values[len(names):]


def train_step(state: TrainState, dataset: np.ndarray) -> dict:
    """One full update: critic_steps critic updates, then one generator
    update.  Returns the scalar metrics of the step."""
    cfg = state.cfg
    spec = cfg.model_spec()
    stage = progressive_schedule(state.step, spec.stages, cfg.fade_steps,
                                 cfg.hold_steps, cfg.progressive)
    idx = state.rng.integers(0, dataset.shape[0], size=cfg.batch)
    x = dataset[idx]
    y = derive_y(x, cfg)

    try:
        wr = wf = pen = 0.0
        for _ in range(cfg.critic_steps):
            z = state.rng.standard_normal((cfg.batch, spec.latent_n))
            rho = state.rng.uniform(0.0, 1.0, cfg.batch)
            terms, cvars = build_critic_loss(cfg, state.gen, state.critic,
                                             x, y, z, rho, stage)
            state.critic, state.opt_c, scalars = _apply_update(
                terms.critic_total, cvars, state.critic, state.opt_c, cfg,
                extra=(terms.wass_real, terms.wass_fake, terms.grad_penalty))
            wr, wf, pen = (float(s) for s in scalars)

        z = state.rng.standard_normal((cfg.batch, spec.latent_n))
        terms, gvars = build_generator_loss(cfg, state.gen, state.critic,
                                            x, y, z, stage)
        state.gen, state.opt_g, scalars = _apply_update(
            terms.gen_total, gvars, state.gen, state.opt_g, cfg,
            extra=(terms.center,))
        cen = float(scalars[0])
    except NumericsError as e:
        raise NumericsError(f"step {state.step}: {e}") from e

    state.step += 1
    return {"step": state.step, "wass_real": wr, "wass_fake": wf,
            "penalty": pen, "center": cen, "stage": stage.stage,
            "alpha": stage.alpha}


def format_metrics(m: dict) -> str:
    return (f"{m['step']}\t{m['wass_real']!r}\t{m['wass_fake']!r}\t"
            f"{m['penalty']!r}\t{m['center']!r}\t{m['stage']}\t{m['alpha']!r}\n")


# ---------------------------------------------------------------------------
# checkpoints

def _named_tensors(state: TrainState):
    out = []
    for k in state.gen:
        out.append((f"g/{k}", state.gen[k]))
    for k in state.critic:
        out.append((f"c/{k}", state.critic[k]))
    for tag, opt in (("og", state.opt_g), ("oc", state.opt_c)):
        for k in opt.m:
            out.append((f"{tag}/m/{k}", opt.m[k]))
        for k in opt.v:
            out.append((f"{tag}/v/{k}", opt.v[k]))
        out.append((f"{tag}/t", np.array(float(opt.t))))
    return out


def _write_block(fh, data: bytes):
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def save_checkpoint(state: TrainState, path) -> None:
    """Binary snapshot; all integers little-endian, payloads float64."""
    tensors = _named_tensors(state)
    rng_state = json.dumps(state.rng.bit_generator.state).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(fh, format_config(state.cfg).encode("utf-8"))
        fh.write(struct.pack("<Q", state.step))
        _write_block(fh, rng_state)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def block(self):
        return self.take(self.u32())


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState; the embedded config echo is authoritative."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = config_from_items(parse_items(rd.block().decode("utf-8")))
    step = rd.u64()
    rng_state = json.loads(rd.block().decode("utf-8"))
    tensors = {}
    for _ in range(rd.u32()):
        name = rd.block().decode("utf-8")
        ndim = rd.u32()
        shape = tuple(rd.u64() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(rd.take(count * 8), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if rd.off != len(rd.blob):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")

    spec = cfg.model_spec()
    fresh_g = init_generator(spec, np.random.default_rng(0))
    fresh_c = init_critic(spec, np.random.default_rng(0))

    def pull(prefix, reference):
        out = {}
        for k, ref in reference.items():
            name = f"{prefix}/{k}"
            if name not in tensors:
                raise FormatError(f"{path}: missing tensor {name}")
            if tensors[name].shape != ref.shape:
                raise FormatError(
                    f"{path}: tensor {name} has shape {tensors[name].shape}, "
                    f"config implies {ref.shape}")
            out[k] = tensors[name]
        return out

    def pull_opt(tag, reference):
        return AdamState(m=pull(f"{tag}/m", reference),
                         v=pull(f"{tag}/v", reference),
                         t=int(tensors[f"{tag}/t"]))

    gen = pull("g", fresh_g)
    critic = pull("c", fresh_c)
    opt_g = pull_opt("og", fresh_g)
    opt_c = pull_opt("oc", fresh_c)
    bg = np.random.PCG64(0)
    bg.state = rng_state
    return TrainState(cfg=cfg, gen=gen, critic=critic, opt_g=opt_g,
                      opt_c=opt_c, step=step,
                      rng=np.random.Generator(bg))


# ---------------------------------------------------------------------------
# the loop

def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, f"checkpoint_{step:07d}.lagc")


def run_training(cfg: TrainConfig, state: TrainState | None = None,
                 dataset: np.ndarray | None = None, on_metrics=None,
                 sample_writer=None) -> TrainState:
    """Train from state.step (0 for a fresh state) to cfg.total_steps.

    Appends one metrics line per step to out/metrics.tsv, checkpoints every
    cfg.checkpoint_every steps and at the end.  `sample_writer(state)` is
    called every cfg.sample_every steps when set.
    """
    if state is None:
        state = init_state(cfg)
    else:
        state = replace(state, cfg=cfg)
    if dataset is None:
        dataset = load_dataset(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    metrics_path = os.path.join(cfg.out, METRICS_NAME)
    mode = "a" if state.step else "w"
    with open(metrics_path, mode, encoding="utf-8") as mf:
        while state.step < cfg.total_steps:
            metrics = train_step(state, dataset)
            mf.write(format_metrics(metrics))
            if on_metrics is not None:
                on_metrics(metrics)
            done = state.step == cfg.total_steps
            if cfg.checkpoint_every and (state.step % cfg.checkpoint_every == 0
                                         or done):
                save_checkpoint(state, checkpoint_path(cfg.out, state.step))
            if sample_writer and cfg.sample_every and \
                    state.step % cfg.sample_every == 0:
                sample_writer(state)
        if cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path(cfg.out, state.step))
    return state
