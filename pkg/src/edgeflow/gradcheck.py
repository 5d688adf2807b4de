"""Central finite-difference verification of analytic gradients.

Every differentiable op is checked on small random inputs, and the full
network is checked end to end on a 32x32 image by probing a random subset
of elements in every parameter tensor. Everything runs in float64; inputs
are sampled away from the kinks of relu, clip, and bilinear warping so
that the two-sided difference quotient measures the same one-sided slope
the analytic gradient reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import tensor as T
from .clicks import Click, encode_clicks, sobel_edge
from .losses import FocalParams, LossWeights, bce_loss, nfl_loss, total_loss
from .model import Model, ModelConfig, build_model, forward_full
from .tensor import Tape, Tensor

REL_TOLERANCE = 1e-3
_EPS = 1e-6
_DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOLERANCE


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = _EPS) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_fn(name: str, fn: Callable[[Sequence[Tensor]], Tensor],
             arrays: Sequence[np.ndarray]) -> CheckResult:
    """Compare tape gradients of scalar fn(*tensors) against central
    differences for every input array, elementwise."""
    started = time.perf_counter()
    inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(inputs)
        if out.data.ndim > 0:
            # fixed random projection makes the scalar sensitive everywhere
            proj = Tensor(np.random.default_rng(1234).normal(size=out.data.shape))
            out = T.tensor_sum(T.mul(out, proj))
    tape.backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    def scalar() -> float:
        fresh = [Tensor(t.data) for t in inputs]
        result = fn(fresh)
        if result.data.ndim > 0:
            proj = np.random.default_rng(1234).normal(size=result.data.shape)
            return float(np.sum(result.data * proj))
        return float(result.data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        numeric = _numeric_grad(scalar, t.data)
        worst = max(worst, _rel_err(a, numeric))
    return CheckResult(name, worst, time.perf_counter() - started)


def _away_from(x: np.ndarray, points: Sequence[float], margin: float) -> np.ndarray:
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + margin * np.sign(x - p + 1e-12), x)
    return x


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.normal(size=shape)

    results = [
        check_fn("add", lambda v: T.add(v[0], v[1]), [r(3, 4), r(3, 4)]),
        check_fn("sub", lambda v: T.sub(v[0], v[1]), [r(3, 4), r(3, 4)]),
        check_fn("mul", lambda v: T.mul(v[0], v[1]), [r(3, 4), r(3, 4)]),
        check_fn("div", lambda v: T.div(v[0], v[1]),
                 [r(3, 4), _away_from(r(3, 4), [0.0], 0.5)]),
        check_fn("neg", lambda v: T.neg(v[0]), [r(3, 4)]),
        check_fn("add_scalar", lambda v: T.add(v[0], 1.5), [r(3, 4)]),
        check_fn("mul_scalar", lambda v: T.mul(v[0], -2.0), [r(3, 4)]),
        check_fn("pow_const", lambda v: T.pow_const(v[0], 3.0), [r(3, 4)]),
        check_fn("pow_const_gamma",
                 lambda v: T.pow_const(v[0], 2.0),
                 [np.abs(r(3, 4)) + 0.1]),
        check_fn("log", lambda v: T.log(v[0]), [np.abs(r(3, 4)) + 0.5]),
        check_fn("sigmoid", lambda v: T.sigmoid(v[0]), [r(3, 4)]),
        check_fn("relu", lambda v: T.relu(v[0]),
                 [_away_from(r(3, 4), [0.0], 0.05)]),
        check_fn("clip", lambda v: T.clip(v[0], -1.0, 1.0),
                 [_away_from(r(3, 4), [-1.0, 1.0], 0.05)]),
        check_fn("tensor_sum", lambda v: T.tensor_sum(v[0]), [r(2, 3, 4)]),
        check_fn("mean", lambda v: T.mean(v[0]), [r(2, 3, 4)]),
        check_fn("spatial_mean", lambda v: T.spatial_mean(v[0]), [r(2, 3, 4, 5)]),
        check_fn("reshape", lambda v: T.reshape(v[0], (2, 12)), [r(2, 3, 4)]),
        check_fn("concat_channels",
                 lambda v: T.concat_channels(v), [r(2, 2, 4, 4), r(2, 3, 4, 4)]),
        check_fn("group_normalize",
                 lambda v: T.group_normalize(v[0], groups=2), [r(2, 4, 5, 5)]),
        check_fn("conv2d_s1",
                 lambda v: T.conv2d(v[0], v[1], v[2]),
                 [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        check_fn("conv2d_s2",
                 lambda v: T.conv2d(v[0], v[1], v[2], stride=2),
                 [r(2, 3, 7, 7), r(4, 3, 3, 3), r(4)]),
        check_fn("conv2d_d2",
                 lambda v: T.conv2d(v[0], v[1], v[2], dilation=2),
                 [r(1, 2, 8, 8), r(3, 2, 3, 3), r(3)]),
        check_fn("conv2d_1x1",
                 lambda v: T.conv2d(v[0], v[1], v[2]),
                 [r(2, 3, 5, 5), r(2, 3, 1, 1), r(2)]),
        check_fn("bilinear_up",
                 lambda v: T.bilinear_resize(v[0], 7, 9), [r(2, 2, 4, 5)]),
        check_fn("bilinear_down",
                 lambda v: T.bilinear_resize(v[0], 3, 4), [r(2, 2, 6, 8)]),
        # flow kept off the integer lattice so the interpolation cell (and
        # hence the local linearization) is stable under the FD probe
        check_fn("warp_bilinear",
                 lambda v: T.warp_bilinear(v[0], v[1]),
                 [r(2, 3, 6, 6),
                  _away_from(0.8 * rng.random((2, 2, 6, 6)) + 0.1, [0.0, 1.0], 0.05)]),
        check_fn("nfl_loss",
                 lambda v, g=(rng.random((2, 1, 4, 4)) > 0.5).astype(float):
                 nfl_loss(v[0], g, FocalParams()),
                 [r(2, 1, 4, 4)]),
        check_fn("bce_loss",
                 lambda v, g=(rng.random((2, 1, 4, 4)) > 0.5).astype(float):
                 bce_loss(v[0], g),
                 [r(2, 1, 4, 4)]),
    ]
    return results


def _randomize_zero_convs(model: Model, rng: np.random.Generator) -> None:
    """The flow and refinement output convs start at zero, which parks the
    warp exactly on the integer lattice where bilinear sampling has kinks.
    Small random weights move the operating point somewhere smooth."""
    for name in ("flow2.conv2.w", "flow3.conv2.w", "fine.out.w"):
        if name in model.params:
            p = model.params[name]
            p.data = rng.normal(0.0, 0.05, size=p.data.shape).astype(p.data.dtype)


def model_check(seed: int = 0, elements_per_param: int = 4) -> List[CheckResult]:
    """End-to-end check on a 32x32 input: training loss against every
    parameter tensor, probing a deterministic random subset of elements."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(base_channels=8, input_size=(32, 32))
    model = build_model(config, seed=seed).cast(np.float64)
    _randomize_zero_convs(model, rng)

    raw_image = rng.random((3, 32, 32))
    clicks = [Click(x=10, y=12, polarity="positive", index=1),
              Click(x=25, y=20, polarity="negative", index=2)]
    image = Tensor(raw_image[None])
    click_map = Tensor(encode_clicks(clicks, 32, 32).astype(np.float64)[None])
    prior = Tensor(sobel_edge(raw_image)[None])
    gt = np.zeros((32, 32))
    gt[8:20, 6:22] = 1.0
    gt_t = gt[None, None]
    weights = LossWeights()
    params = FocalParams(detach_normalizer=False)

    def loss_scalar() -> float:
        outputs = forward_full(model, image, click_map, prior)
        value, _ = total_loss(outputs, gt_t, weights, params)
        return float(value.data)

    started = time.perf_counter()
    with Tape() as tape:
        outputs = forward_full(model, image, click_map, prior)
        value, _ = total_loss(outputs, gt_t, weights, params)
    tape.backward(value)

    results = []
    for name, p in model.params.items():
        t0 = time.perf_counter()
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        idx = rng.choice(n, size=min(elements_per_param, n), replace=False)
        flat = p.data.ravel()
        num = np.zeros(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + _EPS
            hi = loss_scalar()
            flat[i] = orig - _EPS
            lo = loss_scalar()
            flat[i] = orig
            num[j] = (hi - lo) / (2.0 * _EPS)
        err = _rel_err(analytic.ravel()[idx], num)
        results.append(CheckResult(f"model:{name}", err, time.perf_counter() - t0))
    results.append(CheckResult("model:total", max(r.max_rel_err for r in results),
                               time.perf_counter() - started))
    return results


def run_suite(seed: int = 0) -> List[CheckResult]:
    return op_checks(seed) + model_check(seed)
