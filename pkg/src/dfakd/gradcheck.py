"""Central finite-difference checks of the tape's analytic gradients.

Errors are relative with an absolute floor: an element passes when
``|analytic - numeric| <= REL_TOL * max(|analytic|, |numeric|)`` or the
difference is below ``ABS_FLOOR``.  :func:`relative_error` reports the
largest ratio ``|a - n| / max(|a|, |n|, ABS_FLOOR / REL_TOL)``, so a case
passes iff its error is at most ``REL_TOL``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

REL_TOL = 1e-4
ABS_FLOOR = 1e-7
STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR / REL_TOL)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(fn: Callable[..., float], arrays: Sequence[np.ndarray], index: int, step: float = STEP) -> np.ndarray:
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = fn(*arrays)
        flat[k] = orig - step
        down = fn(*arrays)
        flat[k] = orig
        g[k] = (up - down) / (2 * step)
    return grad


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0, step: float = STEP) -> float:
    """Max relative error over all inputs of ``fn`` (projected to a scalar with fixed random weights)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.precision("fp64"):
        probe = fn(*[Tensor(a) for a in arrays])
        proj = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(*arrs) -> float:
            with T.no_grad():
                return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * proj))

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        T.backward(T.sum(out * proj))
        worst = 0.0
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, relative_error(analytic, numeric_gradient(scalar, arrays, i, step)))
    return worst


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    arrays: list[np.ndarray]


def _away(rng, shape, threshold: float = 0.0, gap: float = 0.05) -> np.ndarray:
    z = rng.standard_normal(shape)
    return threshold + np.sign(z) * (np.abs(z) + gap)


def _bn_buffers(c: int, rng):
    return rng.standard_normal(c) * 0.3, rng.uniform(0.5, 1.5, c)


def build_cases(seeds: Sequence[int] = (0, 1, 2, 3)) -> list[GradCase]:
    """Randomized cases covering every differentiable op plus composite graphs."""
    cases: list[GradCase] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(1, 5, size=3)
        cases.append(GradCase(f"matmul[{seed}]", T.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))]))

        b, c, s = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(3, 6))
        o = int(rng.integers(1, 4))
        ksize = (1, 3)[seed % 2]
        stride = 1 + (seed // 2) % 2
        padding = ("same", "valid")[(seed // 2) % 2] if ksize == 3 else "valid"
        cases.append(GradCase(
            f"conv2d[{seed}] k={ksize} s={stride} pad={padding}",
            lambda x, w, stride=stride, padding=padding: T.conv2d(x, w, stride=stride, padding=padding),
            [rng.standard_normal((b, c, s, s)), rng.standard_normal((o, c, ksize, ksize))],
        ))

        b2 = int(rng.integers(2, 4))
        rm, rv = _bn_buffers(c, rng)
        cases.append(GradCase(
            f"batchnorm2d-train[{seed}]",
            lambda x, g, bb, rm=rm, rv=rv: T.batchnorm2d(x, g, bb, rm.copy(), rv.copy(), training=True, update_stats=False),
            [rng.standard_normal((b2, c, s, s)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)],
        ))
        cases.append(GradCase(
            f"batchnorm2d-eval[{seed}]",
            lambda x, g, bb, rm=rm, rv=rv: T.batchnorm2d(x, g, bb, rm, rv, training=False),
            [rng.standard_normal((b2, c, s, s)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)],
        ))

        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        cases.append(GradCase(f"relu[{seed}]", T.relu, [_away(rng, shape)]))
        cases.append(GradCase(f"clamp_min[{seed}]", lambda x: T.clamp_min(x, -1.0), [_away(rng, shape, -1.0)]))
        cases.append(GradCase(f"add-broadcast[{seed}]", T.add, [rng.standard_normal(shape), rng.standard_normal(shape[-1:])]))
        cases.append(GradCase(f"sub[{seed}]", T.sub, [rng.standard_normal(shape), rng.standard_normal(shape)]))
        cases.append(GradCase(f"mul-broadcast[{seed}]", T.mul, [rng.standard_normal(shape), rng.standard_normal(())]))
        cases.append(GradCase(f"div[{seed}]", T.div, [rng.standard_normal(shape), _away(rng, shape, 0.0, 0.5)]))
        cases.append(GradCase(f"scale[{seed}]", lambda x: T.scale(x, -2.5), [rng.standard_normal(shape)]))
        cases.append(GradCase(f"sqrt[{seed}]", T.sqrt, [rng.uniform(0.5, 2.0, shape)]))
        axis = int(rng.integers(0, len(shape)))
        cases.append(GradCase(f"mean[{seed}] axis={axis}", lambda x, axis=axis: T.mean(x, axis=axis), [rng.standard_normal(shape)]))
        cases.append(GradCase(f"sum[{seed}]", T.sum, [rng.standard_normal(shape)]))
        cases.append(GradCase(
            f"sum_squares[{seed}] axis={axis}", lambda x, axis=axis: T.sum_squares(x, axis=axis, keepdims=True),
            [rng.standard_normal(shape)],
        ))
        cases.append(GradCase(f"softmax[{seed}]", lambda x: T.softmax(x, axis=-1), [2 * rng.standard_normal(shape)]))
        cases.append(GradCase(f"log_softmax[{seed}]", lambda x: T.log_softmax(x, axis=-1), [2 * rng.standard_normal(shape)]))
        cases.append(GradCase(f"avgpool-global[{seed}]", T.avgpool, [rng.standard_normal((b, c, s, s))]))
        cases.append(GradCase(f"avgpool-2[{seed}]", lambda x: T.avgpool(x, 2), [rng.standard_normal((b, c, 4, 4))]))
        cases.append(GradCase(f"reshape[{seed}]", lambda x: T.reshape(x, (-1,)), [rng.standard_normal(shape)]))
        cases.append(GradCase(f"getitem[{seed}]", lambda x: x[0], [rng.standard_normal(shape)]))

        # composite: conv -> bn -> relu -> pool -> linear -> log_softmax, plus a normalized-distance branch
        ci, co, cls = int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
        rm2, rv2 = np.zeros(co), np.ones(co)

        def composite(x, w, g, bb, fc, rm2=rm2, rv2=rv2):
            h = T.conv2d(x, w, stride=1, padding="same")
            h = T.batchnorm2d(h, g, bb, rm2.copy(), rv2.copy(), training=True, update_stats=False)
            tap = T.clamp_min(h, -1.0)
            logits = T.avgpool(T.relu(h)) @ fc
            flat = T.reshape(tap, (tap.shape[0], -1))
            unit = flat / T.sqrt(T.sum_squares(flat, axis=1, keepdims=True))
            return T.sum(T.log_softmax(logits, axis=1)) + T.sum_squares(unit - T.softmax(flat, axis=1))

        cases.append(GradCase(
            f"composite[{seed}]", composite,
            [rng.standard_normal((2, ci, 4, 4)), rng.standard_normal((co, ci, 3, 3)), rng.uniform(0.5, 1.5, co),
             rng.standard_normal(co), rng.standard_normal((co, cls))],
        ))
    return cases


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3)) -> list[tuple[str, float]]:
    return [(case.name, check_gradients(case.fn, case.arrays, seed=i)) for i, case in enumerate(build_cases(seeds))]
