"""Rank-4 tensors with reverse-mode automatic differentiation.

The value type is a dense (batch, channel, height, width) array plus an
optional gradient. Operations build a tape implicitly: every non-leaf
tensor remembers its parents and a backward rule, and ``backward(loss)``
replays the recorded rules in reverse topological order. The op set is
exactly what the residual network and its losses need; this is not a
general autodiff library (no broadcasting beyond channel vectors, no
strides, no GPU).

Storage is float32 by default. Pass ``dtype=np.float64`` when building
leaves to run the whole graph in 64-bit, which the gradient-check suite
uses to keep finite-difference comparisons tight.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import _kernels as _K
from .errors import NumericalError, ValidationError

DEFAULT_DTYPE = np.float32

# Module switches. Gradient recording is disabled inside no_grad();
# finiteness checks may be disabled for benchmarking only.
_grad_enabled = True
_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every forward op."""
    global _finite_checks
    _finite_checks = bool(enabled)


@contextmanager
def no_grad():
    """Context manager that suspends tape recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """Dense (n, c, h, w) value, optionally carrying a gradient.

    Tensors are immutable after the forward pass that created them;
    ``grad`` is populated by ``backward`` on leaves with
    ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ValidationError(
                f"tensors are rank-4 (n, c, h, w); got shape {arr.shape}"
            )
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._bwd is None and not self._consumed

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this one's data, cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision (not differentiable)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def scalar(value: float, dtype=DEFAULT_DTYPE) -> Tensor:
    """Constant scalar as a (1,1,1,1) tensor."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def channel_vector(values, dtype=None, requires_grad: bool = False) -> Tensor:
    """Per-channel vector stored as a (1, c, 1, 1) tensor."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 1:
        raise ValidationError(f"channel vector must be 1-D, got shape {arr.shape}")
    return Tensor(arr.reshape(1, -1, 1, 1), requires_grad=requires_grad)


# ---------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------

def _wrap(data: np.ndarray, parents: tuple, bwd, op: str) -> Tensor:
    """Build an op output node, recording the backward rule if needed."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add g into t.grad. owned=True means g is a fresh array the caller
    will never touch again, so it can be adopted without a copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.shape == t.data.shape and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.zeros_like(t.data)
            t.grad += g
    else:
        t.grad += g


class Tape:
    """Ordered record of the operations reachable from a root node.

    The list is in topological order (inputs precede the ops that use
    them); one reverse sweep populates every reachable leaf gradient.
    A tape is single-use: after ``run_backward`` the recorded rules are
    dropped and re-running requires a fresh forward pass.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise ValidationError(
                    "tape already consumed by a previous backward; re-run the forward pass"
                )
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def run_backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
                # Intermediate grads are transient; free them as soon as
                # they have been propagated. Leaves keep theirs.
                node.grad = None
        for node in self.nodes:
            if node._bwd is not None:
                node._bwd = None
                node._parents = ()
                node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The loss must be scalar. Fan-out accumulates additively. The tape is
    consumed: a second backward without a fresh forward raises.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward requires a scalar loss, got shape {loss.shape}")
    Tape(loss).run_backward(loss)


# ---------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------

def _binary_operands(a, b):
    """Coerce operands: Tensors must match shapes; floats are constants."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
        return a, b
    if isinstance(a, Tensor):
        return a, float(b)
    if isinstance(b, Tensor):
        return float(a), b
    raise ValidationError("at least one operand must be a Tensor")


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, float):
        t, c = a, b

        def bwd(g):
            _accumulate(t, g)

        return _wrap(t.data + c, (t,), bwd, "add")
    if isinstance(a, float):
        return add(b, a)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _wrap(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, float):
        return add(a, -b)
    if isinstance(a, float):

        def bwd(g):
            _accumulate(b, -g)

        return _wrap(a - b.data, (b,), bwd, "sub")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _wrap(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, float):
        t, c = a, b

        def bwd(g):
            _accumulate(t, g * c)

        return _wrap(t.data * c, (t,), bwd, "mul")
    if isinstance(a, float):
        return mul(b, a)

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _wrap(a.data * b.data, (a, b), bwd, "mul")


def scale_by_channel_vector(x: Tensor, v: Tensor) -> Tensor:
    """Multiply each channel of x by the matching entry of a (1,c,1,1) vector."""
    if v.shape[0] != 1 or v.shape[2] != 1 or v.shape[3] != 1:
        raise ValidationError(f"channel vector must be (1,c,1,1), got {v.shape}")
    if v.shape[1] != x.shape[1]:
        raise ValidationError(f"channel count mismatch: {x.shape[1]} vs {v.shape[1]}")

    def bwd(g):
        _accumulate(x, g * v.data)
        _accumulate(v, (g * x.data).sum(axis=(0, 2, 3), keepdims=True))

    return _wrap(x.data * v.data, (x, v), bwd, "scale_by_channel_vector")


def exp_map(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out_data)

    return _wrap(out_data, (x,), bwd, "exp_map")


def log_map(x: Tensor, eps: float = 0.0) -> Tensor:
    shifted = x.data + eps
    if shifted.min() <= 0.0:
        raise ValidationError("log_map requires input + eps > 0 elementwise")

    def bwd(g):
        _accumulate(x, g / shifted)

    return _wrap(np.log(shifted), (x,), bwd, "log_map")


def abs_map(x: Tensor) -> Tensor:
    # Subgradient at 0 is 0, which keeps L1 losses stable.
    def bwd(g):
        _accumulate(x, g * np.sign(x.data))

    return _wrap(np.abs(x.data), (x,), bwd, "abs_map")


def sqrt_map(x: Tensor) -> Tensor:
    if x.data.min() <= 0.0:
        raise ValidationError("sqrt_map requires strictly positive input")
    out_data = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * (0.5 / out_data))

    return _wrap(out_data, (x,), bwd, "sqrt_map")


def forward_diff(x: Tensor, axis: str) -> Tensor:
    """First-order forward difference along 'horizontal' (width) or
    'vertical' (height); output loses one sample along that axis."""
    if axis == "horizontal":
        out_data = x.data[:, :, :, 1:] - x.data[:, :, :, :-1]

        def bwd(g):
            gi = np.zeros_like(x.data)
            gi[:, :, :, 1:] += g
            gi[:, :, :, :-1] -= g
            _accumulate(x, gi)

    elif axis == "vertical":
        out_data = x.data[:, :, 1:, :] - x.data[:, :, :-1, :]

        def bwd(g):
            gi = np.zeros_like(x.data)
            gi[:, :, 1:, :] += g
            gi[:, :, :-1, :] -= g
            _accumulate(x, gi)

    else:
        raise ValidationError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return _wrap(out_data, (x,), bwd, "forward_diff")


def crop_spatial(x: Tensor, rows: int, cols: int) -> Tensor:
    """Keep the first ``rows`` x ``cols`` spatial window (differentiable view)."""
    n, c, h, w = x.shape
    if not (0 < rows <= h and 0 < cols <= w):
        raise ValidationError(f"crop {rows}x{cols} exceeds spatial size {h}x{w}")

    def bwd(g):
        gi = np.zeros_like(x.data)
        gi[:, :, :rows, :cols] = g
        _accumulate(x, gi)

    return _wrap(x.data[:, :, :rows, :cols].copy(), (x,), bwd, "crop_spatial")


def extend_replicate(x: Tensor, axis: str) -> Tensor:
    """Append one copy of the trailing row/column (differentiable)."""
    if axis == "vertical":
        out_data = np.concatenate([x.data, x.data[:, :, -1:, :]], axis=2)

        def bwd(g):
            gi = g[:, :, :-1, :].copy()
            gi[:, :, -1, :] += g[:, :, -1, :]
            _accumulate(x, gi)

    elif axis == "horizontal":
        out_data = np.concatenate([x.data, x.data[:, :, :, -1:]], axis=3)

        def bwd(g):
            gi = g[:, :, :, :-1].copy()
            gi[:, :, :, -1] += g[:, :, :, -1]
            _accumulate(x, gi)

    else:
        raise ValidationError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return _wrap(out_data, (x,), bwd, "extend_replicate")


# ---------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------

def _as_scalar(value, like: np.ndarray) -> np.ndarray:
    return np.full((1, 1, 1, 1), value, dtype=like.dtype)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean over all elements, returned as a (1,1,1,1) scalar tensor."""
    if x.data.size == 0:
        raise ValidationError("reduce_mean of an empty tensor")
    n = x.data.size

    def bwd(g):
        _accumulate(x, np.full_like(x.data, g.reshape(())) / n)

    return _wrap(_as_scalar(x.data.mean(), x.data), (x,), bwd, "reduce_mean")


def reduce_var(x: Tensor) -> Tensor:
    """Population variance (divide by N) over all elements."""
    if x.data.size == 0:
        raise ValidationError("reduce_var of an empty tensor")
    n = x.data.size
    mu = x.data.mean()

    def bwd(g):
        _accumulate(x, (2.0 / n) * (x.data - mu) * g.reshape(()))

    return _wrap(_as_scalar(x.data.var(), x.data), (x,), bwd, "reduce_var")


def mean_per_sample(x: Tensor) -> Tensor:
    """Per-sample mean over (c,h,w), returned as (n,1,1,1)."""
    n_elem = x.data[0].size
    if n_elem == 0:
        raise ValidationError("mean_per_sample of an empty tensor")

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / n_elem, x.shape).astype(x.dtype, copy=False))

    return _wrap(x.data.mean(axis=(1, 2, 3), keepdims=True), (x,), bwd, "mean_per_sample")


def var_per_sample(x: Tensor) -> Tensor:
    """Per-sample population variance over (c,h,w), returned as (n,1,1,1)."""
    n_elem = x.data[0].size
    if n_elem == 0:
        raise ValidationError("var_per_sample of an empty tensor")
    mu = x.data.mean(axis=(1, 2, 3), keepdims=True)

    def bwd(g):
        _accumulate(x, (2.0 / n_elem) * (x.data - mu) * g)

    return _wrap(x.data.var(axis=(1, 2, 3), keepdims=True), (x,), bwd, "var_per_sample")


# ---------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    xf = np.ascontiguousarray(x.data).reshape(-1)
    cdf = np.empty_like(xf)
    _K.gelu_cdf(xf, cdf)
    out_data = (xf * cdf).reshape(x.shape)

    def bwd(g):
        gi = np.empty_like(x.data)
        _K.gelu_bwd(xf, cdf, np.ascontiguousarray(g).reshape(-1), gi.reshape(-1))
        _accumulate(x, gi, owned=True)

    return _wrap(out_data, (x,), bwd, "gelu")


def layer_norm_channels(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the channel vector at each spatial location to zero mean and
    unit (population) variance, then apply a per-channel affine map.

    scale and shift are (1,c,1,1) vectors; eps stabilizes the inverse
    standard deviation and must be positive.
    """
    if eps <= 0:
        raise ValidationError("layer_norm_channels requires eps > 0")
    c = x.shape[1]
    if c == 0:
        raise ValidationError("layer_norm_channels on zero channels")
    if scale.shape != (1, c, 1, 1) or shift.shape != (1, c, 1, 1):
        raise ValidationError("scale/shift must be (1,c,1,1) matching the input channels")

    n, _, h, w = x.shape
    xd = np.ascontiguousarray(x.data)
    out_data = np.empty_like(xd)
    xn = np.empty_like(xd)
    inv_std = np.empty((n, 1, h, w), dtype=xd.dtype)
    _K.ln_fwd(xd, np.ascontiguousarray(scale.data.reshape(c)),
              np.ascontiguousarray(shift.data.reshape(c)), eps, out_data, xn, inv_std)

    def bwd(g):
        _accumulate(shift, g.sum(axis=(0, 2, 3), keepdims=True), owned=True)
        _accumulate(scale, (g * xn).sum(axis=(0, 2, 3), keepdims=True), owned=True)
        gxn = np.ascontiguousarray(g * scale.data)
        # Standard layer-norm backward through the per-location statistics.
        gx = np.empty_like(xd)
        _K.ln_bwd_input(gxn, xn, inv_std, gx)
        _accumulate(x, gx, owned=True)

    return _wrap(out_data, (x, scale, shift), bwd, "layer_norm_channels")


# ---------------------------------------------------------------------
# Convolutions
#
# All spatial convolutions are stride-1 cross-correlations with same
# padding. Internally the data moves to channels-last so every offset
# contribution is a single BLAS matmul; kernels are tiny (3 or 7) so
# the direct k*k-offset accumulation is both simple and fast.
# ---------------------------------------------------------------------

def _pad_channels_last(xl: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return xl
    pad = ((0, 0), (p, p), (p, p), (0, 0))
    if mode == "reflect":
        return np.pad(xl, pad, mode="reflect")
    if mode == "zero":
        return np.pad(xl, pad, mode="constant")
    raise ValidationError(f"padding_mode must be 'reflect' or 'zero', got {mode!r}")


def _fold_pad_adjoint(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of _pad_channels_last: fold border gradients back inside."""
    if p == 0:
        return gp
    core = gp[:, p:-p, p:-p, :].copy()
    if mode == "zero":
        return core
    h = core.shape[1]
    w = core.shape[2]
    # Rows first (using the full padded width), then columns.
    for i in range(p):
        core[:, p - i, :, :] += gp[:, i, p:-p, :]
        core[:, h - 2 - i, :, :] += gp[:, p + h + i, p:-p, :]
    for j in range(p):
        core[:, :, p - j, :] += gp[:, p:-p, j, :]
        core[:, :, w - 2 - j, :] += gp[:, p:-p, p + w + j, :]
    # Corner pads reflect across both axes.
    for i in range(p):
        for j in range(p):
            core[:, p - i, p - j, :] += gp[:, i, j, :]
            core[:, p - i, w - 2 - j, :] += gp[:, i, p + w + j, :]
            core[:, h - 2 - i, p - j, :] += gp[:, p + h + i, j, :]
            core[:, h - 2 - i, w - 2 - j, :] += gp[:, p + h + i, p + w + j, :]
    return core


def _check_conv_args(x: Tensor, kernel: Tensor, bias: Tensor, co: int) -> int:
    k = kernel.shape[2]
    if kernel.shape[3] != k:
        raise ValidationError(f"kernel must be square, got {kernel.shape}")
    if k % 2 == 0:
        raise ValidationError(f"kernel size must be odd, got {k}")
    if x.shape[2] < k or x.shape[3] < k:
        raise ValidationError(
            f"spatial size {x.shape[2]}x{x.shape[3]} smaller than kernel support {k}"
        )
    if bias.shape != (1, co, 1, 1):
        raise ValidationError(f"bias must be (1,{co},1,1), got {bias.shape}")
    return k


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding_mode: str = "reflect") -> Tensor:
    """Same-padding stride-1 cross-correlation.

    x: (n, ci, h, w); kernel: (co, ci, k, k) with odd k; bias: (1, co, 1, 1).
    Differentiable w.r.t. all three.
    """
    n, ci, h, w = x.shape
    co = kernel.shape[0]
    if kernel.shape[1] != ci:
        raise ValidationError(
            f"kernel expects {kernel.shape[1]} input channels, input has {ci}"
        )
    k = _check_conv_args(x, kernel, bias, co)
    p = k // 2

    xl = np.ascontiguousarray(np.moveaxis(x.data, 1, 3))
    xp = _pad_channels_last(xl, p, padding_mode)
    kt = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))  # (k, k, ci, co)
    out_l = np.empty((n, h, w, co), dtype=x.data.dtype)
    _K.conv_fwd(xp, kt, np.ascontiguousarray(bias.data.reshape(co)), out_l)
    out_data = np.ascontiguousarray(np.moveaxis(out_l, 3, 1))

    def bwd(g):
        gl = np.ascontiguousarray(np.moveaxis(g, 1, 3))
        _accumulate(bias, gl.sum(axis=(0, 1, 2)).reshape(1, co, 1, 1), owned=True)
        if kernel.requires_grad:
            kg = np.zeros((k, k, ci, co), dtype=kernel.data.dtype)
            _K.conv_bwd_kernel(gl, xp, kg)
            _accumulate(kernel, np.ascontiguousarray(kg.transpose(3, 2, 0, 1)), owned=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _K.conv_bwd_input(gl, kt, gxp)
            _accumulate(x, np.moveaxis(_fold_pad_adjoint(gxp, p, padding_mode), 3, 1),
                        owned=True)

    return _wrap(out_data, (x, kernel, bias), bwd, "conv2d")


def depthwise_conv7(x: Tensor, kernel: Tensor, bias: Tensor,
                    padding_mode: str = "reflect") -> Tensor:
    """Depthwise same-padding correlation: channel c of the output depends
    only on channel c of the input. kernel: (c, 1, k, k), nominally 7x7."""
    n, c, h, w = x.shape
    if kernel.shape[0] != c or kernel.shape[1] != 1:
        raise ValidationError(
            f"depthwise kernel must be ({c},1,k,k), got {kernel.shape}"
        )
    k = _check_conv_args(x, kernel, bias, c)
    p = k // 2

    xl = np.ascontiguousarray(np.moveaxis(x.data, 1, 3))
    xp = _pad_channels_last(xl, p, padding_mode)
    kv = np.ascontiguousarray(kernel.data[:, 0, :, :].transpose(1, 2, 0))  # (k, k, c)
    out_l = np.empty((n, h, w, c), dtype=x.data.dtype)
    _K.dw_fwd(xp, kv, np.ascontiguousarray(bias.data.reshape(c)), out_l)
    out_data = np.ascontiguousarray(np.moveaxis(out_l, 3, 1))

    def bwd(g):
        gl = np.ascontiguousarray(np.moveaxis(g, 1, 3))
        _accumulate(bias, gl.sum(axis=(0, 1, 2)).reshape(1, c, 1, 1), owned=True)
        if kernel.requires_grad:
            kg = np.zeros((k, k, c), dtype=kernel.data.dtype)
            _K.dw_bwd_kernel(gl, xp, kg)
            _accumulate(kernel, np.ascontiguousarray(kg.transpose(2, 0, 1))[:, None],
                        owned=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _K.dw_bwd_input(gl, kv, gxp)
            _accumulate(x, np.moveaxis(_fold_pad_adjoint(gxp, p, padding_mode), 3, 1),
                        owned=True)

    return _wrap(out_data, (x, kernel, bias), bwd, "depthwise_conv7")


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map across channels (a 1x1 convolution).

    weight is a (co, ci, 1, 1) tensor holding the co x ci matrix.
    """
    n, ci, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1] != ci or weight.shape[2] != 1 or weight.shape[3] != 1:
        raise ValidationError(
            f"pointwise weight must be ({co},{ci},1,1), got {weight.shape}"
        )
    if bias.shape != (1, co, 1, 1):
        raise ValidationError(f"bias must be (1,{co},1,1), got {bias.shape}")

    # Channels-first stays intact: (co,ci) @ (n,ci,hw) is a batched GEMM
    # with no layout copies anywhere.
    wmat = weight.data.reshape(co, ci)
    x3 = np.ascontiguousarray(x.data).reshape(n, ci, h * w)
    out3 = np.matmul(wmat, x3)
    out3 += bias.data.reshape(1, co, 1)
    out_data = out3.reshape(n, co, h, w)

    def bwd(g):
        g3 = np.ascontiguousarray(g).reshape(n, co, h * w)
        _accumulate(bias, g3.sum(axis=(0, 2)).reshape(1, co, 1, 1), owned=True)
        if weight.requires_grad:
            wg = np.zeros((co, ci), dtype=weight.data.dtype)
            for i in range(n):
                wg += np.matmul(g3[i], x3[i].T)
            _accumulate(weight, wg.reshape(co, ci, 1, 1), owned=True)
        if x.requires_grad:
            _accumulate(x, np.matmul(wmat.T, g3).reshape(x.shape), owned=True)

    return _wrap(out_data, (x, weight, bias), bwd, "pointwise_conv")
