"""Central finite-difference verification of the tensor core.

``check`` compares the analytic gradient of a scalar function against
central differences. Small inputs are checked coordinate by coordinate;
large ones (whole networks) along random directions. The relative error
is norm-wise: ||a - n|| / max(||a||, ||n||, floor).

Op-level checks use h = 1e-3. A whole network crosses many ReLU kinks at
that step, which makes the difference quotient itself wrong, so network
checks start at ``NETWORK_FD_STEP`` in double precision and shrink the step
tenfold until two successive quotients agree to within a relative
tolerance plus the rounding-noise bound of the smaller step (a kink lies
between them otherwise). The refinement never looks at the analytic
gradient.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-3
NETWORK_FD_STEP = 1e-5
TOLERANCE = 1e-3
ABS_FLOOR = 1e-7
REFINE_AGREEMENT = 1e-5
REFINE_LEVELS = 4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize ``out`` as sum(weights * out) so any op output can be checked."""
    w = weights.astype(out.data.dtype)
    val = np.asarray(np.sum(out.data.astype(np.float64) * w), dtype=out.data.dtype)
    return T._result(val, (out,), lambda g: (g * w,), "project")


def _eval(fn, arrays, dtype) -> float:
    with T.no_grad():
        return float(fn([Tensor(a, dtype=dtype) for a in arrays]).data)


def _quotient(fn, arrays, i, d, h, dtype) -> float:
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[i] = plus[i] + h * d
    minus[i] = minus[i] - h * d
    return (_eval(fn, plus, dtype) - _eval(fn, minus, dtype)) / (2 * h)


def _roundoff(f0: float, h: float, dtype) -> float:
    """Bound on the rounding noise of a central quotient with step h."""
    return 4 * np.finfo(dtype).eps * max(abs(f0), 1.0) / h


def _refined_quotient(fn, arrays, i, d, h, dtype) -> float:
    f0 = _eval(fn, arrays, dtype)
    prev = _quotient(fn, arrays, i, d, h, dtype)
    for _ in range(REFINE_LEVELS - 1):
        h_next = h / 10
        cur = _quotient(fn, arrays, i, d, h_next, dtype)
        tol = REFINE_AGREEMENT * max(abs(cur), abs(prev)) + _roundoff(f0, h_next, dtype)
        if abs(cur - prev) <= tol:
            # both steps agree; the larger one carries less rounding noise
            return prev
        prev, h = cur, h_next
    return prev


def check(fn: Callable[[list], Tensor], arrays: Sequence[np.ndarray], h: float = FD_STEP,
          directions: int = 0, rng=None, dtype=np.float64, refine: bool = False) -> float:
    """Max relative error across inputs between analytic and FD gradients.

    With ``directions == 0`` every coordinate is perturbed; otherwise that
    many random unit directions per input are used, optionally with step
    refinement.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.asarray(a, dtype=dtype) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True, dtype=dtype) for a in arrays]
    loss = fn(leaves)
    T.backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        if directions == 0:
            numeric = np.zeros(arrays[i].size)
            for j in range(arrays[i].size):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i].flat[j] += h
                minus[i].flat[j] -= h
                numeric[j] = (_eval(fn, plus, dtype) - _eval(fn, minus, dtype)) / (2 * h)
            worst = max(worst, relative_error(analytic, numeric))
        else:
            for _ in range(directions):
                d = rng.standard_normal(arrays[i].shape)
                d /= np.linalg.norm(d)
                q = _refined_quotient if refine else _quotient
                numeric = q(fn, arrays, i, d, h, dtype)
                worst = max(worst, relative_error(np.sum(analytic * d), numeric))
    return worst


def _uniform(rng, shape, margin=0.0):
    """Uniform in [-1, 1]; ``margin`` keeps values away from 0 (kinks)."""
    x = rng.uniform(-1, 1, size=shape)
    if margin:
        x = np.sign(x) * (margin + (1 - margin) * np.abs(x))
    return x


def _op_cases(rng) -> dict:
    """One random instance of every differentiable op, as (fn, arrays, directions)."""
    cases = {}

    r = rng.standard_normal((2, 6, 8, 8))
    cases["conv2d"] = (lambda t, r=r: project(T.conv2d(t[0], t[1], t[2], stride=1, pad=1), r),
                       [_uniform(rng, (2, 4, 8, 8)), _uniform(rng, (6, 4, 3, 3)), _uniform(rng, (6,))], 0)

    r = rng.standard_normal((2, 3, 4, 4))
    cases["conv2d_stride2"] = (lambda t, r=r: project(T.conv2d(t[0], t[1], t[2], stride=2, pad=1), r),
                               [_uniform(rng, (2, 3, 7, 7)), _uniform(rng, (3, 3, 3, 3)), _uniform(rng, (3,))], 0)

    r = rng.standard_normal((2, 3, 4, 4))
    cases["batch_norm"] = (lambda t, r=r: project(T.batch_norm(t[0], t[1], t[2], "train"), r),
                           [_uniform(rng, (2, 3, 4, 4)), _uniform(rng, (3,)), _uniform(rng, (3,))], 0)

    stats = T.BatchNormStats(rng.uniform(-0.5, 0.5, 3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32))
    r = rng.standard_normal((2, 3, 4, 4))
    cases["batch_norm_infer"] = (lambda t, r=r: project(T.batch_norm(t[0], t[1], t[2], "infer", stats), r),
                                 [_uniform(rng, (2, 3, 4, 4)), _uniform(rng, (3,)), _uniform(rng, (3,))], 0)

    for name, f in [("relu", T.relu), ("leaky_relu", T.leaky_relu), ("tanh", T.tanh_act), ("sigmoid", T.sigmoid)]:
        r = rng.standard_normal((2, 3, 4, 4))
        cases[name] = (lambda t, f=f, r=r: project(f(t[0]), r), [_uniform(rng, (2, 3, 4, 4), 0.01)], 0)

    r = rng.standard_normal((2, 3, 4, 4))
    cases["add"] = (lambda t, r=r: project(T.add(t[0], t[1]), r), [_uniform(rng, (2, 3, 4, 4)), _uniform(rng, (2, 3, 4, 4))], 0)

    r = rng.standard_normal((2, 4, 3, 3))
    cases["concat_channels"] = (lambda t, r=r: project(T.concat_channels(t[0], t[1]), r),
                                [_uniform(rng, (2, 3, 3, 3)), _uniform(rng, (2, 1, 3, 3))], 0)

    r = rng.standard_normal((2, 3, 4, 4))
    x = _uniform(rng, (2, 3, 4, 4), 0.01)
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.01, x * 0.9, x)
    cases["clamp"] = (lambda t, r=r: project(T.clamp(t[0], -0.5, 0.5), r), [x], 0)

    r = rng.standard_normal((2, 5))
    cases["global_avg_pool"] = (lambda t, r=r: project(T.global_avg_pool(t[0]), r), [_uniform(rng, (2, 5, 3, 3))], 0)

    r = rng.standard_normal((3, 2))
    cases["linear"] = (lambda t, r=r: project(T.linear(t[0], t[1], t[2]), r),
                       [_uniform(rng, (3, 4)), _uniform(rng, (2, 4)), _uniform(rng, (2,))], 0)

    cases["mse_loss"] = (lambda t: T.mse_loss(t[0], t[1]), [_uniform(rng, (2, 3, 4, 4)), _uniform(rng, (2, 3, 4, 4))], 0)

    label = rng.integers(0, 2, size=(6, 1))
    cases["bce_loss"] = (lambda t, label=label: T.bce_loss(t[0], label), [rng.uniform(0.05, 0.95, size=(6, 1))], 0)

    # one tensor used twice: the product rule must sum both paths
    r = rng.standard_normal((1, 2, 4, 4))
    cases["shared_use"] = (lambda t, r=r: project(T.add(T.tanh_act(t[0]), T.scale(T.relu(t[0]), 0.5)), r),
                           [_uniform(rng, (1, 2, 4, 4), 0.01)], 0)
    return cases


def _coarse_generator_case(rng):
    from .networks import NetworkSpec, build_coarse_generator

    spec = NetworkSpec.desk()
    net = build_coarse_generator(spec, seed=int(rng.integers(2 ** 31)))
    names = list(net.params)
    for n in names:   # move BN affine params off their identity init so every path carries gradient
        if n.endswith(".gamma"):
            net.params[n].data = rng.uniform(0.5, 1.5, net.params[n].shape)
        elif n.endswith(".beta"):
            net.params[n].data = rng.uniform(-0.2, 0.2, net.params[n].shape)
    x = _uniform(rng, (2, 3, 16, 16))
    target = _uniform(rng, (2, 3, 16, 16)) * 0.9

    def fn(t):
        params = dict(zip(names, t[1:]))
        out = net.forward(t[0], train=True, params=params)
        return T.mse_loss(out, Tensor(target, dtype=t[0].data.dtype))

    arrays = [x] + [net.params[n].data for n in names]
    return fn, arrays, 2, NETWORK_FD_STEP


def run_suite(seed: int = 0, instances: int = 20, include_network: bool = True, dtype=np.float64) -> dict:
    """Max relative error per op over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for _ in range(instances):
        for name, (fn, arrays, dirs) in _op_cases(rng).items():
            err = check(fn, arrays, directions=dirs, rng=rng, dtype=dtype)
            results[name] = max(results.get(name, 0.0), err)
        if include_network:
            fn, arrays, dirs, h = _coarse_generator_case(rng)
            err = check(fn, arrays, h=h, directions=dirs, rng=rng, dtype=np.float64, refine=True)
            results["coarse_generator"] = max(results.get("coarse_generator", 0.0), err)
    return results
