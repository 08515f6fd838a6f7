"""Finite-difference verification of the autodiff backward rules.

The oracle only ever calls forward passes: central differences
(f(x+h) - f(x-h)) / 2h per coordinate, or along a random direction for
large parameter groups. Everything runs in float64 so the comparison
tolerances can stay tight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5
OP_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:45s} rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


def fd_gradient(f: Callable[[], float], arr: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every entry of arr.

    f must read arr by reference; entries are perturbed in place and
    restored.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def fd_directional(f: Callable[[], float], arr: np.ndarray, direction: np.ndarray,
                   step: float = DEFAULT_STEP) -> float:
    """Central-difference directional derivative of f along ``direction``."""
    base = arr.copy()
    arr += step * direction
    fp = f()
    arr[...] = base - step * direction
    fm = f()
    arr[...] = base
    return (fp - fm) / (2.0 * step)


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / (np.abs(b) + floor))) if a.size else 0.0


def check_op(name: str, build_loss: Callable[[Sequence[T.Tensor]], T.Tensor],
             leaves: Sequence[T.Tensor], tol: float = OP_TOL,
             step: float = DEFAULT_STEP) -> CheckResult:
    """Compare autodiff gradients of build_loss(leaves) against central
    differences for every leaf, coordinate by coordinate."""
    loss = build_loss(leaves)
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        if not leaf.requires_grad:
            continue

        def f(leaf=leaf):
            with T.no_grad():
                return build_loss(leaves).item()

        g_fd = fd_gradient(f, leaf.data, step)
        worst = max(worst, rel_err(leaf.grad, g_fd))
    return CheckResult(name, worst, tol)


def _rand(shape, rng, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True,
                    dtype=np.float64)


def _direction_loss(out: T.Tensor, direction: np.ndarray) -> T.Tensor:
    """Scalar projection of an op output along a fixed random direction,
    so every output component influences the loss."""
    n = out.data.size
    return T.reduce_mean(T.mul(out, T.Tensor(direction))) * float(n)


def op_suite(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    """Finite-difference checks for every differentiable op, on ``instances``
    random small tensors each."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def run(name, make):
        worst = CheckResult(name, 0.0, OP_TOL)
        for i in range(instances):
            r = make(rng)
            worst = CheckResult(name, max(worst.max_rel_err, r.max_rel_err), OP_TOL)
        results.append(worst)

    def elementwise(op, positive=False, offset=0.0):
        def make(rng):
            base = rng.standard_normal((1, 2, 3, 3))
            if positive:
                base = np.abs(base) + 0.5
            x = T.Tensor(base + offset, requires_grad=True, dtype=np.float64)
            d = rng.standard_normal(x.shape)
            return check_op(op.__name__, lambda ls: _direction_loss(op(ls[0]), d), [x])
        return make

    run("exp_map", elementwise(T.exp_map))
    run("log_map", elementwise(lambda t: T.log_map(t, 1e-3), positive=True))
    run("sqrt_map", elementwise(T.sqrt_map, positive=True))
    run("abs_map", elementwise(T.abs_map, offset=0.0))
    run("gelu", elementwise(T.gelu))

    def binary(name, op):
        def make(rng):
            a = _rand((2, 2, 3, 3), rng)
            b = _rand((2, 2, 3, 3), rng)
            d = rng.standard_normal(a.shape)
            return check_op(name, lambda ls: _direction_loss(op(ls[0], ls[1]), d), [a, b])
        return make

    run("add", binary("add", T.add))
    run("sub", binary("sub", T.sub))
    run("mul", binary("mul", T.mul))

    def scale_vec(rng):
        x = _rand((2, 3, 4, 4), rng)
        v = T.Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True, dtype=np.float64)
        d = rng.standard_normal(x.shape)
        return check_op("scale_by_channel_vector",
                        lambda ls: _direction_loss(T.scale_by_channel_vector(ls[0], ls[1]), d),
                        [x, v])

    run("scale_by_channel_vector", scale_vec)

    for axis in ("horizontal", "vertical"):
        def diff(rng, axis=axis):
            x = _rand((1, 1, 4, 5), rng)
            out = T.forward_diff(x, axis)
            d = rng.standard_normal(out.shape)
            return check_op(f"forward_diff[{axis}]",
                            lambda ls: _direction_loss(T.forward_diff(ls[0], axis), d), [x])
        run(f"forward_diff[{axis}]", diff)

    def crop(rng):
        x = _rand((1, 2, 4, 5), rng)
        out = T.crop_spatial(x, 3, 4)
        d = rng.standard_normal(out.shape)
        return check_op("crop_spatial",
                        lambda ls: _direction_loss(T.crop_spatial(ls[0], 3, 4), d), [x])

    run("crop_spatial", crop)

    for axis in ("horizontal", "vertical"):
        def ext(rng, axis=axis):
            x = _rand((1, 2, 3, 3), rng)
            out = T.extend_replicate(x, axis)
            d = rng.standard_normal(out.shape)
            return check_op(f"extend_replicate[{axis}]",
                            lambda ls: _direction_loss(T.extend_replicate(ls[0], axis), d), [x])
        run(f"extend_replicate[{axis}]", ext)

    def reductions(rng):
        x = _rand((2, 1, 3, 3), rng)
        r1 = check_op("reduce_mean", lambda ls: T.reduce_mean(ls[0]), [x])
        x2 = _rand((2, 1, 3, 3), rng)
        r2 = check_op("reduce_var", lambda ls: T.reduce_var(ls[0]), [x2])
        return CheckResult("reduce_mean/var", max(r1.max_rel_err, r2.max_rel_err), OP_TOL)

    run("reduce_mean/var", reductions)

    def per_sample(rng):
        x = _rand((3, 1, 3, 3), rng)
        d = rng.standard_normal((3, 1, 1, 1))
        r1 = check_op("mean_per_sample",
                      lambda ls: _direction_loss(T.mean_per_sample(ls[0]), d), [x])
        x2 = _rand((3, 1, 3, 3), rng)
        r2 = check_op("var_per_sample",
                      lambda ls: _direction_loss(T.var_per_sample(ls[0]), d), [x2])
        return CheckResult("per_sample moments", max(r1.max_rel_err, r2.max_rel_err), OP_TOL)

    run("per_sample moments", per_sample)

    def ln(rng):
        x = _rand((1, 4, 2, 2), rng)
        sc = T.Tensor(1.0 + 0.1 * rng.standard_normal((1, 4, 1, 1)),
                      requires_grad=True, dtype=np.float64)
        sh = T.Tensor(0.1 * rng.standard_normal((1, 4, 1, 1)),
                      requires_grad=True, dtype=np.float64)
        d = rng.standard_normal(x.shape)
        return check_op("layer_norm_channels",
                        lambda ls: _direction_loss(
                            T.layer_norm_channels(ls[0], ls[1], ls[2], 1e-6), d),
                        [x, sc, sh])

    run("layer_norm_channels", ln)

    for mode in ("reflect", "zero"):
        def conv(rng, mode=mode):
            x = _rand((1, 1, 5, 5), rng)
            k = _rand((2, 1, 3, 3), rng, scale=0.5)
            b = T.Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True,
                         dtype=np.float64)
            d = rng.standard_normal((1, 2, 5, 5))
            return check_op(f"conv2d[{mode}]",
                            lambda ls: _direction_loss(T.conv2d(ls[0], ls[1], ls[2], mode), d),
                            [x, k, b])
        run(f"conv2d[{mode}]", conv)

    def dw(rng):
        x = _rand((1, 2, 8, 8), rng)
        k = _rand((2, 1, 7, 7), rng, scale=0.2)
        b = T.Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True, dtype=np.float64)
        d = rng.standard_normal((1, 2, 8, 8))
        return check_op("depthwise_conv7",
                        lambda ls: _direction_loss(T.depthwise_conv7(ls[0], ls[1], ls[2]), d),
                        [x, k, b])

    run("depthwise_conv7", dw)

    def pw(rng):
        x = _rand((1, 3, 4, 4), rng)
        w = _rand((2, 3, 1, 1), rng)
        b = T.Tensor(rng.standard_normal((1, 2, 1, 1)), requires_grad=True, dtype=np.float64)
        d = rng.standard_normal((1, 2, 4, 4))
        return check_op("pointwise_conv",
                        lambda ls: _direction_loss(T.pointwise_conv(ls[0], ls[1], ls[2]), d),
                        [x, w, b])

    run("pointwise_conv", pw)

    return results


def network_suite(seed: int = 0, size: int = 16, coords_per_group: int = 24) -> list[CheckResult]:
    """Finite-difference check of the full network gradient through the
    total objective, in float64 on a small patch.

    Every parameter group is verified two ways: the directional
    derivative along a fixed random direction, and ``coords_per_group``
    individually perturbed coordinates.
    """
    from .losses import LossConfig, loss_total
    from .model import build_rpn, forward
    from .speckle import to_log, trigamma

    rng = np.random.default_rng(seed)
    params = build_rpn(seed).astype(np.float64)
    # A zero head hides most of the graph (and parks the losses on abs
    # kinks); perturb every group so the check exercises real gradients.
    for _, t in params.items():
        t.data += 0.05 * rng.standard_normal(t.shape)

    y = T.Tensor(rng.uniform(0.1, 1.0, size=(1, 1, size, size)), dtype=np.float64)
    cfg = LossConfig(beta0=0.7, horizon=30, gamma=1.0, lam=0.05,
                     sigma_edge=0.1, median_window=3, eps=1e-6)
    sigma2 = trigamma(4.0)

    def objective() -> T.Tensor:
        z = to_log(y, cfg.eps)
        f = forward(params, z)
        z_hat = z - f
        x_hat = T.exp_map(z_hat)
        return loss_total(y, z_hat, x_hat, f, cfg, sigma2, t=3).node

    loss = objective()
    T.backward(loss)
    grads = {name: t.grad.copy() for name, t in params.items()}

    def f_scalar() -> float:
        with T.no_grad():
            return objective().item()

    results = []
    for name, t in params.items():
        g = grads[name]
        direction = rng.standard_normal(t.shape)
        direction /= np.linalg.norm(direction.reshape(-1))
        fd_dir = fd_directional(f_scalar, t.data, direction)
        auto_dir = float((g * direction).sum())
        worst = abs(auto_dir - fd_dir) / (abs(fd_dir) + 1e-8)

        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords_per_group, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + DEFAULT_STEP
            fp = f_scalar()
            flat[i] = orig - DEFAULT_STEP
            fm = f_scalar()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * DEFAULT_STEP)
            worst = max(worst, abs(gflat[i] - fd) / (abs(fd) + 1e-8))
        results.append(CheckResult(f"network/{name}", float(worst), NETWORK_TOL))
    return results


def full_suite(seed: int = 0) -> list[CheckResult]:
    """Op-level and full-network finite-difference checks."""
    return op_suite(seed) + network_suite(seed)
