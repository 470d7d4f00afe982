"""Central finite differences and per-op gradient checks.

Each check builds random float64 inputs, reduces the op's output to a
scalar through a fixed random projection, and compares autodiff gradients
of every input against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cmunet.engine import ops
from cmunet.engine.tensor import Tensor, no_grad

KINK_MARGIN = 1e-3


def finite_diff_gradient(fn: Callable[[Tensor], float | Tensor], x: Tensor, eps: float = 1e-3,
                         indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference estimate of d fn / d x.

    When ``indices`` (flat positions) is given, only those entries are
    estimated and the rest of the result is left at zero.
    """
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            out = fn(Tensor(values.reshape(base.shape), dtype=np.float64))
        return float(out.data) if isinstance(out, Tensor) else float(out)

    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(flat)
        flat[i] = orig - eps
        lo = evaluate(flat)
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute discrepancy scaled by the gradient's magnitude.

    Elementwise ratios blow up at entries whose true gradient is near zero,
    so the discrepancy is measured against the max-norm of the gradient.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def uniform(rng: np.random.Generator, shape: tuple[int, ...], low: float = -1.0, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape)


def away_from_zero(rng: np.random.Generator, shape: tuple[int, ...], margin: float = KINK_MARGIN) -> np.ndarray:
    x = uniform(rng, shape)
    bad = np.abs(x) <= margin
    while bad.any():
        x[bad] = rng.uniform(-1.0, 1.0, size=int(bad.sum()))
        bad = np.abs(x) <= margin
    return x


def distinct_windows(rng: np.random.Generator, shape: tuple[int, ...], margin: float = KINK_MARGIN) -> np.ndarray:
    """Random N x C x H x W input whose 2x2 windows have a unique max with a
    gap above ``2 * margin`` over the runner-up."""
    n, c, h, w = shape
    x = uniform(rng, shape)
    while True:
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        top2 = np.sort(win, axis=-1)[..., -2:]
        bad = (top2[..., 1] - top2[..., 0]) <= 2 * margin
        if not bad.any():
            return x
        fresh = rng.uniform(-1.0, 1.0, size=win.shape)
        win = np.where(bad[..., None], fresh, win)
        x = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


@dataclass
class OpCheck:
    """``make(rng)`` returns the input arrays; ``fn(*tensors)`` runs the op."""

    name: str
    make: Callable[[np.random.Generator], list[np.ndarray]]
    fn: Callable[..., Tensor]


def check_once(check: OpCheck, seed: int, eps: float = 1e-3) -> float:
    rng = np.random.default_rng(seed)
    arrays = check.make(rng)
    probe = check.fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    proj = rng.uniform(-1.0, 1.0, size=probe.shape)

    def objective(*tensors: Tensor) -> Tensor:
        return ops.total(ops.mul(check.fn(*tensors), Tensor(proj, dtype=np.float64)))

    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    objective(*leaves).backward()

    worst = 0.0
    for k, leaf in enumerate(leaves):
        def partial(t: Tensor, k: int = k) -> Tensor:
            args = [Tensor(a, dtype=np.float64) for a in arrays]
            args[k] = t
            return objective(*args)

        numeric = finite_diff_gradient(partial, Tensor(arrays[k], dtype=np.float64), eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_check(check: OpCheck, seeds: Sequence[int] = range(10), eps: float = 1e-3) -> float:
    """Max relative error of ``check`` across ``seeds``."""
    return max(check_once(check, s, eps) for s in seeds)


def _conv(stride=1, padding=0, dilation=1, groups=1):
    def fn(x, w, b):
        return ops.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation, groups=groups)
    return fn


def _bn_train(x, g, b):
    return ops.batchnorm2d(x, g, b, None, None, training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    mean = Tensor(np.linspace(-0.5, 0.5, c), dtype=np.float64)
    var = Tensor(np.linspace(0.5, 1.5, c), dtype=np.float64)
    return ops.batchnorm2d(x, g, b, mean, var, training=False)


ENGINE_CHECKS: dict[str, OpCheck] = {
    c.name: c
    for c in [
        OpCheck("conv2d", lambda r: [uniform(r, (1, 2, 5, 5)), uniform(r, (3, 2, 3, 3)), uniform(r, (3,))],
                _conv(padding=1)),
        OpCheck("conv2d_strided", lambda r: [uniform(r, (2, 2, 6, 6)), uniform(r, (2, 2, 3, 3)), uniform(r, (2,))],
                _conv(stride=2, padding=1)),
        OpCheck("conv2d_pointwise", lambda r: [uniform(r, (2, 3, 4, 4)), uniform(r, (2, 3, 1, 1)), uniform(r, (2,))],
                _conv()),
        OpCheck("conv2d_dilated", lambda r: [uniform(r, (1, 2, 6, 6)), uniform(r, (2, 2, 3, 3)), uniform(r, (2,))],
                _conv(padding=2, dilation=2)),
        OpCheck("conv2d_depthwise", lambda r: [uniform(r, (2, 3, 7, 7)), uniform(r, (3, 1, 7, 7)), uniform(r, (3,))],
                _conv(padding=3, groups=3)),
        OpCheck("conv2d_grouped", lambda r: [uniform(r, (1, 4, 5, 5)), uniform(r, (6, 2, 3, 3)), uniform(r, (6,))],
                _conv(padding=1, groups=2)),
        OpCheck("batchnorm2d", lambda r: [uniform(r, (2, 3, 4, 4)), uniform(r, (3,)), uniform(r, (3,))], _bn_train),
        OpCheck("batchnorm2d_eval", lambda r: [uniform(r, (2, 3, 4, 4)), uniform(r, (3,)), uniform(r, (3,))],
                _bn_eval),
        OpCheck("relu", lambda r: [away_from_zero(r, (2, 3, 4, 4))], lambda x: ops.relu(x)),
        OpCheck("gelu", lambda r: [uniform(r, (2, 3, 4, 4), -3, 3)], lambda x: ops.gelu(x)),
        OpCheck("sigmoid", lambda r: [uniform(r, (2, 3, 4, 4), -4, 4)], lambda x: ops.sigmoid(x)),
        OpCheck("maxpool2x2", lambda r: [distinct_windows(r, (2, 2, 4, 6))], lambda x: ops.maxpool2x2(x)),
        OpCheck("bilinear_upsample2x", lambda r: [uniform(r, (1, 2, 3, 4))], lambda x: ops.bilinear_upsample2x(x)),
        OpCheck("concat_channels", lambda r: [uniform(r, (2, 2, 3, 3)), uniform(r, (2, 3, 3, 3))],
                lambda a, b: ops.concat_channels(a, b)),
        OpCheck("add", lambda r: [uniform(r, (2, 3, 4, 4)), uniform(r, (2, 3, 4, 4))], lambda a, b: ops.add(a, b)),
        OpCheck("mul", lambda r: [uniform(r, (2, 3, 4, 4)), uniform(r, (2, 3, 4, 4))], lambda a, b: ops.mul(a, b)),
    ]
}
