"""Central finite-difference verification of the analytic gradients.

Every registered case builds random float64 inputs from a seed, reduces the
operation's output to a scalar with a fixed random projection, and compares
the taped backward pass against ``(f(x + h) - f(x - h)) / 2h`` entry by entry.

Relative error of an entry is ``|a - n| / max(|a|, |n|, floor)`` where
``floor = 1e-3 * max|n|`` over all checked entries of the case. The floor keeps
entries whose true gradient is orders of magnitude below the case's gradient
scale (for example conv biases feeding a batch norm, which are exactly zero)
from turning round-off into spurious failures.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .layers import ParamStore
from .tensor import GradTape, Tensor, backward

STEP = 1e-4
OP_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4
FLOOR_FRACTION = 1e-3
# relative disagreement of one-sided slopes that marks a kink inside the step
KINK_THRESHOLD = 1e-5


@dataclass
class GradcheckReport:
    name: str
    seed: int
    max_abs_err: float
    max_rel_err: float
    tolerance: float
    n_checked: int
    n_kinks: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)


@dataclass
class Case:
    """A function of leaf tensors plus the arrays to differentiate against.

    ``fn`` maps a list of Tensors (same order as ``inputs``) to an output
    Tensor. ``sample`` caps the number of entries checked per input
    (``None`` checks all of them).
    """
    fn: Callable[[list[Tensor]], Tensor]
    inputs: list[np.ndarray]
    sample: int | None = None


def _as_tuple(out) -> tuple[Tensor, ...]:
    return tuple(out) if isinstance(out, (tuple, list)) else (out,)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, index, h: float = STEP) -> float:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def _one_sided(f, f0: float, x: np.ndarray, index, h: float) -> tuple[float, float]:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - f0) / h, (f0 - fm) / h


def _is_kinked(fwd: float, bwd: float, floor: float) -> bool:
    scale = max(abs(fwd), abs(bwd), floor)
    return abs(fwd - bwd) > KINK_THRESHOLD * scale


def _mismatch(a: float, n: float, floor: float, tolerance: float) -> bool:
    return abs(a - n) > tolerance * max(abs(a), abs(n), floor)


def check_case(case: Case, name: str = "case", seed: int = 0,
               tolerance: float = OP_TOLERANCE, h: float = STEP) -> GradcheckReport:
    rng = np.random.default_rng(seed + 7919)
    arrays = [np.array(a, dtype=np.float64) for a in case.inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    # leaves share memory with ``arrays`` so perturbing arrays perturbs the inputs
    for leaf, a in zip(leaves, arrays):
        leaf.data = a
    outs = _as_tuple(case.fn(leaves))
    projs = [rng.standard_normal(o.shape) for o in outs]

    def scalar() -> float:
        return float(sum(np.sum(o.data * p) for o, p in zip(_as_tuple(case.fn(leaves)), projs)))

    with GradTape() as tape:
        outs = _as_tuple(case.fn(leaves))
        loss = ops.sum_all(ops.mul(outs[0], Tensor(projs[0])))
        for o, p in zip(outs[1:], projs[1:]):
            loss = ops.add(loss, ops.sum_all(ops.mul(o, Tensor(p))))
    backward(tape, loss)

    f0 = scalar()
    grad_scale = max(float(np.max(np.abs(leaf.grad), initial=0.0)) for leaf in leaves)
    kink_floor = max(FLOOR_FRACTION * grad_scale, 1e-12)
    analytic, numeric = [], []
    kinks = 0
    for leaf, a in zip(leaves, arrays):
        flat = np.arange(a.size)
        if case.sample is not None and a.size > case.sample:
            flat = rng.choice(a.size, size=case.sample, replace=False)
        for k in flat:
            idx = np.unravel_index(k, a.shape)
            a_k = float(leaf.grad[idx])
            fwd, bwd = _one_sided(scalar, f0, a, idx, h)
            if (_is_kinked(fwd, bwd, kink_floor)
                    or _mismatch(a_k, 0.5 * (fwd + bwd), kink_floor, tolerance)):
                gap = abs(fwd - bwd)
                fwd, bwd = _one_sided(scalar, f0, a, idx, h / 100.0)
                # smooth curvature shrinks the gap with the step, a kink does not
                if _is_kinked(fwd, bwd, kink_floor) and abs(fwd - bwd) > 0.1 * gap:
                    kinks += 1
                    continue
            analytic.append(leaf.grad[idx])
            numeric.append(0.5 * (fwd + bwd))
    an = np.array(analytic)
    nu = np.array(numeric)
    abs_err = np.abs(an - nu)
    floor = max(FLOOR_FRACTION * float(np.max(np.abs(nu), initial=0.0)), 1e-12)
    rel = abs_err / np.maximum(np.maximum(np.abs(an), np.abs(nu)), floor)
    return GradcheckReport(name, seed, float(abs_err.max(initial=0.0)),
                           float(rel.max(initial=0.0)), tolerance, int(an.size), kinks)


# ---------------------------------------------------------------------------
# registry

def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _small_shape(rng, c=None):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5)) if c is None else c
    h = int(rng.integers(2, 7))
    w = int(rng.integers(2, 7))
    return n, c, h, w


def _case_add(rng):
    s = _small_shape(rng)
    return Case(lambda t: ops.add(t[0], t[1]), [rng.standard_normal(s), rng.standard_normal(s)])


def _case_sub(rng):
    s = _small_shape(rng)
    return Case(lambda t: ops.sub(t[0], t[1]), [rng.standard_normal(s), rng.standard_normal(s)])


def _case_mul(rng):
    s = _small_shape(rng)
    return Case(lambda t: ops.mul(t[0], t[1]), [rng.standard_normal(s), rng.standard_normal(s)])


def _case_mul_broadcast(rng):
    n, c, h, w = _small_shape(rng)
    c = max(c, 2)
    return Case(lambda t: ops.mul(t[0], t[1]),
                [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, 1, h, w))])


def _case_mul_channel_gate(rng):
    n, c, h, w = _small_shape(rng)
    return Case(lambda t: ops.mul(t[0], t[1]),
                [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, 1, 1))])


def _case_sigmoid(rng):
    return Case(lambda t: ops.sigmoid(t[0]), [rng.standard_normal(_small_shape(rng)) * 2])


def _case_relu(rng):
    return Case(lambda t: ops.relu(t[0]), [_away_from_zero(rng, _small_shape(rng))])


def _case_channel_max(rng):
    n, c, h, w = _small_shape(rng)
    c = max(c, 2)
    # channel values spaced 0.1 apart so the argmax cannot flip under +-h
    vals = np.stack([rng.permutation(c) * 0.1 for _ in range(n * h * w)])
    x = vals.reshape(n, h, w, c).transpose(0, 3, 1, 2) + rng.uniform(0, 0.02, (n, c, h, w))
    return Case(lambda t: ops.channel_max(t[0]), [x])


def _case_global_avg_pool(rng):
    return Case(lambda t: ops.global_avg_pool(t[0]), [rng.standard_normal(_small_shape(rng))])


def _case_concat(rng):
    n, c, h, w = _small_shape(rng)
    return Case(lambda t: ops.concat_channels([t[0], t[1]]),
                [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, 2, h, w))])


def _case_flatten(rng):
    return Case(lambda t: ops.flatten_spatial(t[0]), [rng.standard_normal(_small_shape(rng))])


def _case_unflatten(rng):
    n, c, h, w = _small_shape(rng)
    return Case(lambda t: ops.unflatten_spatial(t[0], h, w), [rng.standard_normal((n, c, h * w))])


def _case_transpose(rng):
    n, r, c = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
    return Case(lambda t: ops.transpose(t[0]), [rng.standard_normal((n, r, c))])


def _case_bmm(rng):
    n, r, k, c = (int(v) for v in rng.integers(1, 5, size=4))
    return Case(lambda t: ops.bmm(t[0], t[1]),
                [rng.standard_normal((n, r, k)), rng.standard_normal((n, k, c))])


def _case_softmax(rng):
    n, r, c = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 8))
    return Case(lambda t: ops.softmax_lastdim(t[0]), [rng.standard_normal((n, r, c)) * 2])


def _case_fc(rng):
    n, c, co = int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    return Case(lambda t: ops.fully_connected(t[0], t[1], t[2]),
                [rng.standard_normal((n, c, 1, 1)), rng.standard_normal((co, c)), rng.standard_normal(co)])


def _conv_case(rng, stride, pad, k=None):
    n, ci, h, w = _small_shape(rng)
    co = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5])) if k is None else k
    return Case(lambda t: ops.conv2d(t[0], t[1], t[2], stride=stride, pad=pad),
                [rng.standard_normal((n, ci, h, w)), rng.standard_normal((co, ci, k, k)),
                 rng.standard_normal(co)])


def _case_conv2d(rng):
    return _conv_case(rng, 1, "zero")


def _case_conv2d_stride2(rng):
    return _conv_case(rng, 2, "zero", k=3)


def _case_conv2d_replicate(rng):
    return _conv_case(rng, 1, "replicate", k=3)


def _case_conv2d_7x7(rng):
    return _conv_case(rng, 1, "zero", k=7)


def _case_conv_transpose2d(rng):
    n, ci, h, w = _small_shape(rng)
    co = int(rng.integers(1, 5))
    return Case(lambda t: ops.conv_transpose2d(t[0], t[1], t[2], stride=2),
                [rng.standard_normal((n, ci, h, w)), rng.standard_normal((ci, co, 2, 2)),
                 rng.standard_normal(co)])


def _case_sobel(rng):
    # scaled up so the magnitude stays well away from the sqrt kink relative to the step
    return Case(lambda t: ops.sobel_magnitude(t[0]), [3 * rng.standard_normal(_small_shape(rng))])


def _case_resize(rng):
    n, c, h, w = _small_shape(rng)
    oh, ow = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    return Case(lambda t: ops.resize_bilinear(t[0], oh, ow), [rng.standard_normal((n, c, h, w))])


def _case_upsample(rng):
    n, c, h, w = _small_shape(rng)
    return Case(lambda t: ops.upsample_bilinear(t[0], 2 * h, 2 * w + 1),
                [rng.standard_normal((n, c, h, w))])


def _case_batchnorm(rng):
    n, c, h, w = _small_shape(rng)
    return Case(lambda t: ops.batchnorm(t[0], t[1], t[2]),
                [rng.standard_normal((n, c, h, w)) * 2 + 1, rng.standard_normal(c),
                 rng.standard_normal(c)])


def _case_bce(rng):
    s = _small_shape(rng, c=1)
    target = (rng.random(s) > 0.5).astype(float)
    return Case(lambda t: ops.bce(t[0], target), [rng.uniform(0.05, 0.95, size=s)])


def _case_sum(rng):
    return Case(lambda t: ops.sum_all(t[0]), [rng.standard_normal(_small_shape(rng))])


def _case_mean(rng):
    return Case(lambda t: ops.mean_all(t[0]), [rng.standard_normal(_small_shape(rng))])


def _module_params_case(build, sample):
    """Case over (module inputs + every parameter tensor), sampled entries each."""
    def make(rng):
        P, arrays, run = build(rng)
        names = P.names()
        n_in = len(arrays)

        def fn(t):
            return run(t[:n_in], ParamStore.wrap(dict(zip(names, t[n_in:]))))

        return Case(fn, arrays + [P[n].data.copy() for n in names], sample=sample)
    return make


def _efaba_build(rng):
    from .efaba import efaba_forward, init_efaba
    from .layers import Initializer, ParamStore
    chans = (4, 8, 8)
    P = ParamStore()
    init_efaba(Initializer(P, rng), chans)
    for name, t in P.items():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    n = 2
    arrays = [rng.standard_normal((n, chans[0], 8, 8)), rng.standard_normal((n, chans[1], 4, 4)),
              rng.standard_normal((n, chans[2], 2, 2))]

    def run(t, P):
        out = efaba_forward(t[0], t[1], t[2], P)
        return out.features + (out.edge,)

    return P, arrays, run


def _gdal_build(rng):
    from .gdal import gdal_forward, init_gdal
    from .layers import Initializer, ParamStore
    chans = (4, 8, 8, 8)
    P = ParamStore()
    init_gdal(Initializer(P, rng), chans)
    for name, t in P.items():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    n = 2
    arrays = [rng.standard_normal((n, chans[0], 16, 16)), rng.standard_normal((n, chans[1], 8, 8)),
              rng.standard_normal((n, chans[2], 4, 4)), rng.standard_normal((n, chans[3], 2, 2))]

    def run(t, P):
        return gdal_forward(t[0], t[1], t[2], t[3], P)

    return P, arrays, run


def _network_build(rng):
    from .network import forward, init_params, toy_config
    cfg = toy_config("full", input_size=32, seed=int(rng.integers(1 << 30)))
    P = init_params(cfg)
    for name, t in P.items():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    arrays = [rng.random((2, 3, 32, 32))]

    def run(t, P):
        out = forward(t[0], cfg, P)
        return out.side + (out.edge,)

    return P, arrays, run


@dataclass(frozen=True)
class Entry:
    make: Callable[[np.random.Generator], Case]
    tolerance: float = OP_TOLERANCE


REGISTRY: dict[str, Entry] = {
    "add": Entry(_case_add),
    "sub": Entry(_case_sub),
    "mul": Entry(_case_mul),
    "mul_broadcast": Entry(_case_mul_broadcast),
    "mul_channel_gate": Entry(_case_mul_channel_gate),
    "sigmoid": Entry(_case_sigmoid),
    "relu": Entry(_case_relu),
    "channel_max": Entry(_case_channel_max),
    "global_avg_pool": Entry(_case_global_avg_pool),
    "concat": Entry(_case_concat),
    "flatten_spatial": Entry(_case_flatten),
    "unflatten_spatial": Entry(_case_unflatten),
    "transpose": Entry(_case_transpose),
    "bmm": Entry(_case_bmm),
    "softmax_lastdim": Entry(_case_softmax),
    "fully_connected": Entry(_case_fc),
    "conv2d": Entry(_case_conv2d),
    "conv2d_stride2": Entry(_case_conv2d_stride2),
    "conv2d_replicate": Entry(_case_conv2d_replicate),
    "conv2d_7x7": Entry(_case_conv2d_7x7),
    "conv_transpose2d": Entry(_case_conv_transpose2d),
    "sobel_magnitude": Entry(_case_sobel),
    "resize_bilinear": Entry(_case_resize),
    "upsample_bilinear": Entry(_case_upsample),
    "batchnorm": Entry(_case_batchnorm),
    "bce": Entry(_case_bce),
    "sum": Entry(_case_sum),
    "mean": Entry(_case_mean),
    "efaba": Entry(_module_params_case(_efaba_build, sample=3)),
    "gdal": Entry(_module_params_case(_gdal_build, sample=3)),
    "network": Entry(_module_params_case(_network_build, sample=1), NETWORK_TOLERANCE),
}

# registered names that cover whole modules rather than single operations
MODULE_CASES = ("efaba", "gdal", "network")


def gradcheck(op_name: str, seed: int = 0) -> GradcheckReport:
    """Run the registered case ``op_name`` with inputs drawn from ``seed``."""
    if op_name not in REGISTRY:
        raise KeyError(f"unknown op {op_name!r}")
    entry = REGISTRY[op_name]
    case = entry.make(np.random.default_rng(seed))
    return check_case(case, op_name, seed, entry.tolerance)
