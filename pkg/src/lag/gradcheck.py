"""Finite-difference verification of the engine's gradients.

Central differences with per-element step 1e-5 * (1 + |v|) are the reference;
analytic gradients must agree within a relative error of 1e-4 (1e-3 for
second-order checks).  The same harness backs the `gradcheck` CLI command and
the test suite, and exposes a deliberate-corruption hook so its own
sensitivity can be verified.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import engine
from .engine import Graph, apply, evaluate, grad

FIRST_ORDER_TOL = 1e-4
SECOND_ORDER_TOL = 1e-3
COMPOSITE_GRAPHS = 100


def numeric_grad(f, arrays, index):
    """Central-difference gradient of scalar f(arrays) wrt arrays[index]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = np.zeros_like(base[index])
    flat = base[index].reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        h = 1e-5 * (1.0 + abs(v))
        flat[i] = v + h
        fp = f(base)
        flat[i] = v - h
        fm = f(base)
        flat[i] = v
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic, numeric):
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_build(build, arrays, blocked=()):
    """Compare analytic and numeric gradients for build(leaf_tensors) -> scalar.

    Returns the max relative error over all leaves.  Leaves listed in
    `blocked` sit behind stop-gradient/round, where finite differences see
    the identity forward pass; for those the contract is an exactly-zero
    analytic gradient, so the reported error is max |analytic|.
    """
    def f(vals):
        g = Graph()
        ts = [g.var(v) for v in vals]
        return float(evaluate([build(ts)])[0])

    g = Graph()
    ts = [g.var(a) for a in arrays]
    out = build(ts)
    analytic = evaluate(grad(out, ts))
    worst = 0.0
    for i in range(len(arrays)):
        if i in blocked:
            worst = max(worst, float(np.max(np.abs(analytic[i]))))
            continue
        numeric = numeric_grad(f, arrays, i)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst


@contextmanager
def corrupted_adjoint(kind):
    """Scale one kind's adjoint outputs by 1.01 (test hook for the harness)."""
    original = engine._ADJOINTS[kind]

    def bad(ins, out, up, attrs):
        return [None if t is None else engine.scale(t, 1.01)
                for t in original(ins, out, up, attrs)]

    engine._ADJOINTS[kind] = bad
    try:
        yield
    finally:
        engine._ADJOINTS[kind] = original


# ---------------------------------------------------------------------------
# per-primitive cases

def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _kind_cases(rng):
    """One (build, arrays) pair per primitive kind, exercising its gradient."""
    sl = 0.2
    return {
        "add": (lambda t: engine.reduce_sum(engine.mul(engine.add(t[0], t[1]), t[2])),
                [_rand(rng, 3, 4), _rand(rng, 3, 4), _rand(rng, 3, 4)]),
        "sub": (lambda t: engine.reduce_sum(engine.mul(engine.sub(t[0], t[1]), t[2])),
                [_rand(rng, 3, 4), _rand(rng, 3, 4), _rand(rng, 3, 4)]),
        "mul": (lambda t: engine.reduce_sum(engine.mul(t[0], t[1])),
                [_rand(rng, 2, 5), _rand(rng, 2, 5)]),
        "scale": (lambda t: engine.reduce_sum(engine.square(engine.scale(t[0], -1.7))),
                  [_rand(rng, 4)]),
        "sum": (lambda t: engine.reduce_sum(engine.square(
            engine.reduce_sum(t[0], axes=(1,)))), [_rand(rng, 3, 4)]),
        "mean": (lambda t: engine.reduce_sum(engine.square(
            engine.reduce_mean(t[0], axes=(0, 2)))), [_rand(rng, 2, 3, 4)]),
        "abs": (lambda t: engine.reduce_sum(engine.mul(engine.absolute(t[0]), t[1])),
                [_rand(rng, 3, 3) + np.sign(_rand(rng, 3, 3)) * 0.3, _rand(rng, 3, 3)]),
        "square": (lambda t: engine.reduce_sum(engine.square(t[0])), [_rand(rng, 5)]),
        "sqrt": (lambda t: engine.reduce_sum(engine.mul(engine.sqrt(t[0]), t[1])),
                 [_pos(rng, 4), _rand(rng, 4)]),
        "reciprocal": (lambda t: engine.reduce_sum(engine.reciprocal(t[0])),
                       [_pos(rng, 4)]),
        "l2norm": (lambda t: engine.reduce_sum(engine.mul(
            engine.l2_norm(t[0], axes=(1,)), t[1])),
            [_rand(rng, 3, 5) + 0.1, _rand(rng, 3)]),
        "leaky_relu": (lambda t: engine.reduce_sum(engine.square(
            engine.leaky_relu(t[0], slope=sl))),
            [_rand(rng, 4, 4) + np.sign(_rand(rng, 4, 4)) * 0.2]),
        "matmul": (lambda t: engine.reduce_sum(engine.square(
            engine.matmul(t[0], t[1]))), [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
        "conv2d": (lambda t: engine.reduce_sum(engine.square(
            engine.conv2d(t[0], t[1], stride=2, pad=1))),
            [_rand(rng, 2, 2, 5, 5), _rand(rng, 3, 2, 3, 3)]),
        "upsample2x": (lambda t: engine.reduce_sum(engine.mul(
            engine.upsample2x(t[0]), t[1])),
            [_rand(rng, 1, 2, 3, 3), _rand(rng, 1, 2, 6, 6)]),
        "avgpool": (lambda t: engine.reduce_sum(engine.square(
            engine.avg_pool(t[0], 2))), [_rand(rng, 1, 2, 4, 6)]),
        "concat": (lambda t: engine.reduce_sum(engine.square(
            engine.concat([t[0], t[1]], axis=1))),
            [_rand(rng, 2, 3), _rand(rng, 2, 2)]),
        "slice": (lambda t: engine.reduce_sum(engine.square(
            engine.crop(t[0], (1, 0), (3, 2)))), [_rand(rng, 4, 3)]),
        "broadcast": (lambda t: engine.reduce_sum(engine.mul(
            engine.broadcast(t[0], (2, 3, 4), (1,)), t[1])),
            [_rand(rng, 3), _rand(rng, 2, 3, 4)]),
        "round": (lambda t: engine.reduce_sum(engine.add(
            engine.round_nearest(engine.mul(t[0], t[0])), engine.square(t[0]))),
            [_pos(rng, 4) + 0.13]),
        # forward identity FD-checked through t[1]'s gradient (= sg(t[0]));
        # the blocked slot asserts zero flow into t[0].
        "stop_gradient": ((lambda t: engine.reduce_sum(engine.mul(
            engine.stop_gradient(t[0]), t[1]))),
            [_rand(rng, 4), _rand(rng, 4)], (0,)),
    }


def check_primitives(seed=0):
    """Max relative error per primitive kind, as a dict preserving kind order."""
    rng = np.random.default_rng(seed)
    cases = _kind_cases(rng)
    report = {}
    for kind in engine.PRIMITIVE_KINDS:
        build, arrays, *rest = cases[kind]
        report[kind] = check_build(build, arrays, blocked=rest[0] if rest else ())
    return report


# ---------------------------------------------------------------------------
# random composite graphs
#
# Each op maps a (2,2,4,4) tensor back to (2,2,4,4), some via auxiliary var
# leaves (conv kernels, matmul factors) that join the FD check.  round and
# stop_gradient are excluded here (their defined gradients differ from the
# true forward derivative, so plain FD cannot confirm them in composition);
# both get dedicated per-kind lines above.

_COMPOSITE_OPS = (
    "add", "sub", "mul", "scale", "square", "leaky_relu", "abs_shift",
    "sqrt_pos", "recip_pos", "conv", "pool_up", "up_pool", "concat_slice",
    "mean_broadcast", "norm_broadcast", "matmul_mix",
)

_CSHAPE = (2, 2, 4, 4)


def _random_scalar_graph(rng):
    """Build a random composition over fresh leaves; returns (build, arrays)."""
    n_leaves = int(rng.integers(2, 4))
    arrays = [rng.standard_normal(_CSHAPE) for _ in range(n_leaves)]
    ops = [str(rng.choice(_COMPOSITE_OPS)) for _ in range(int(rng.integers(3, 8)))]
    for op in ops:
        if op == "conv":
            arrays.append(rng.standard_normal((2, 2, 3, 3)) * 0.5)
        elif op == "matmul_mix":
            arrays.append(rng.standard_normal((2, 2)))
    reducer = str(rng.choice(("sum", "mean", "l2norm")))
    c = float(rng.uniform(-2, 2))

    def build(ts, kinks=None):
        pool = list(ts[:n_leaves])
        aux = list(ts[n_leaves:])
        i = 0
        for op in ops:
            pick = pool[i % len(pool)]
            other = pool[(i + 1) % len(pool)]
            i += 1
            if op == "add":
                t = engine.add(pick, other)
            elif op == "sub":
                t = engine.sub(pick, other)
            elif op == "mul":
                t = engine.mul(pick, other)
            elif op == "scale":
                t = engine.scale(pick, c)
            elif op == "square":
                t = engine.square(pick)
            elif op == "leaky_relu":
                if kinks is not None:
                    kinks.append(pick)
                t = engine.leaky_relu(pick, slope=0.2)
            elif op == "abs_shift":
                shifted = engine.add(pick, engine.scale(other, 0.25))
                if kinks is not None:
                    kinks.append(shifted)
                t = engine.absolute(shifted)
            elif op == "sqrt_pos":
                t = engine.sqrt(engine.add(engine.square(pick), _one_like(pick)))
            elif op == "recip_pos":
                t = engine.reciprocal(engine.add(engine.square(pick), _one_like(pick)))
            elif op == "conv":
                t = engine.conv2d(pick, aux.pop(0), stride=1, pad=1)
            elif op == "pool_up":
                t = engine.upsample2x(engine.avg_pool(pick, 2))
            elif op == "up_pool":
                t = engine.avg_pool(engine.upsample2x(pick), 2)
            elif op == "concat_slice":
                t = engine.crop(engine.concat([pick, other], axis=1),
                                (0, 1, 0, 0), (2, 3, 4, 4))
            elif op == "mean_broadcast":
                t = engine.broadcast(engine.reduce_mean(pick, axes=(2, 3)),
                                     _CSHAPE, (0, 1))
            elif op == "norm_broadcast":
                t = engine.broadcast(engine.l2_norm(
                    engine.add(engine.square(pick), _one_like(pick)), axes=(2, 3)),
                    _CSHAPE, (0, 1))
            else:  # matmul_mix
                m = engine.matmul(engine.reduce_mean(pick, axes=(2, 3)), aux.pop(0))
                t = engine.add(pick, engine.broadcast(m, _CSHAPE, (0, 1)))
            pool.append(t)
        tail = pool[-1]
        if reducer == "sum":
            return engine.reduce_sum(tail)
        if reducer == "mean":
            return engine.reduce_mean(tail)
        return engine.l2_norm(engine.add(engine.square(tail), _one_like(tail)))

    return build, arrays


def _one_like(t):
    return t.graph.const(np.ones(t.shape))


def _fd_margins(build, arrays):
    """(kink margin, |f|) for a candidate graph.

    Both bound the validity of the central-difference oracle: a kinked
    activation (leaky_relu, abs) within the probe step of zero flips its
    derivative mask mid-probe, and roundoff in f(x+h) - f(x-h) costs about
    eps * |f| / (2h) ~ 1e-11 * |f| in absolute terms, which swamps
    small-gradient elements once |f| gets large.
    """
    g = Graph()
    kinks = []
    out = build([g.var(a) for a in arrays], kinks)
    values = evaluate([out] + kinks)
    scale = abs(float(values[0]))
    if not kinks:
        return np.inf, scale
    return min(float(np.abs(v).min()) for v in values[1:]), scale


def check_composites(seed=0, count=COMPOSITE_GRAPHS):
    """Max relative error over `count` random composite graphs."""
    worst = 0.0
    for i in range(count):
        rng = np.random.default_rng(seed * 7919 + i)
        while True:
            build, arrays = _random_scalar_graph(rng)
            # resample graphs on which FD is not a valid oracle: an
            # activation within the probe step of its kink, or an output
            # so large that central-difference roundoff (~1e-11 * |f|)
            # eats into the 1e-4 tolerance
            margin, scale = _fd_margins(build, arrays)
            if margin > 1e-3 and scale < 1e6:
                break
        worst = max(worst, check_build(build, arrays))
    return worst


# ---------------------------------------------------------------------------
# second-order: gradient of a gradient-norm penalty

def _penalty_value(x, w1, b1, w2):
    """(||d score/d x||_2 - 1)^2 for a tiny conv critic, via nested grad."""
    g = Graph()
    xt = g.var(x)
    w1t, b1t, w2t = g.var(w1), g.var(b1), g.var(w2)
    h = engine.leaky_relu(engine.add(
        engine.conv2d(xt, w1t, stride=1, pad=1),
        engine.broadcast(b1t, (x.shape[0], w1.shape[0], x.shape[2], x.shape[3]), (1,))))
    pooled = engine.reduce_mean(h, axes=(2, 3))
    score = engine.reduce_sum(engine.matmul(pooled, w2t))
    (gx,) = grad(score, [xt])
    norm = engine.l2_norm(gx)
    pen = engine.square(engine.sub(norm, _one_like(norm)))
    return pen, (w1t, b1t, w2t)


def _preact_margin(x, w1, b1):
    g = Graph()
    h = engine.add(
        engine.conv2d(g.const(x), g.const(w1), stride=1, pad=1),
        engine.broadcast(g.const(b1),
                         (x.shape[0], w1.shape[0], x.shape[2], x.shape[3]), (1,)))
    return float(np.abs(evaluate([h])[0]).min())


def check_second_order(seed=0):
    """FD-verify d penalty / d params for a few random tiny critics."""
    worst = 0.0
    for trial in range(3):
        rng = np.random.default_rng(seed * 104729 + trial)
        while True:
            x = rng.standard_normal((1, 2, 4, 4))
            w1 = rng.standard_normal((3, 2, 3, 3)) * 0.5
            b1 = rng.standard_normal(3) * 0.1
            w2 = rng.standard_normal((3, 1)) * 0.5
            # the penalty contains the activation's derivative mask, a step
            # function; FD is only a valid oracle if no pre-activation sits
            # within the probe step of the kink, so resample until all clear
            if _preact_margin(x, w1, b1) > 1e-3:
                break
        params = [w1, b1, w2]

        pen, wrt = _penalty_value(x, *params)
        analytic = evaluate(grad(pen, list(wrt)))

        def f(vals, x=x):
            p, _ = _penalty_value(x, *vals)
            return float(evaluate([p])[0])

        for i in range(len(params)):
            numeric = numeric_grad(f, params, i)
            worst = max(worst, relative_error(analytic[i], numeric))
    return worst


def run_suite(seed=0, corrupt=None, out=print):
    """Full harness: every primitive once, composites, second-order.

    Returns True when every check is within tolerance.
    """
    ctx = corrupted_adjoint(corrupt) if corrupt else None
    ok = True
    if ctx:
        ctx.__enter__()
    try:
        report = check_primitives(seed)
        for kind, err in report.items():
            good = err <= FIRST_ORDER_TOL
            ok = ok and good
            out(f"{kind:<14s} max_rel_err={err:.3e} {'ok' if good else 'FAIL'}")
        comp = check_composites(seed)
        good = comp <= FIRST_ORDER_TOL
        ok = ok and good
        out(f"{'composite':<14s} max_rel_err={comp:.3e} {'ok' if good else 'FAIL'} "
            f"({COMPOSITE_GRAPHS} random graphs)")
        second = check_second_order(seed)
        good = second <= SECOND_ORDER_TOL
        ok = ok and good
        out(f"{'second_order':<14s} max_rel_err={second:.3e} {'ok' if good else 'FAIL'}")
    finally:
        if ctx:
            ctx.__exit__(None, None, None)
    return ok
