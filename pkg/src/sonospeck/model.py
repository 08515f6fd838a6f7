"""Residual prediction network: stem, two residual blocks, head.

The network maps a log-domain image z to a log-domain residual estimate
f(z); the despeckled image is exp(z - f(z)). Layout is isotropic: a 3x3
stem lifts the single channel to 96, two ConvNeXt-style blocks
(depthwise 7x7 -> channel layernorm -> pointwise 96->384 -> GELU ->
pointwise 384->96 -> per-channel layer scale -> skip) refine at constant
resolution, and a 3x3 head projects back to one channel. Stride is 1
everywhere and padding is reflect, so output size always equals input
size.

The head is zero-initialized: a freshly built network is the identity
despeckler, which keeps the first curriculum epochs stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ValidationError
from .speckle import LOG_EPS, substream, to_log
from .tensor import Tensor

STEM_CHANNELS = 96
EXPAND_CHANNELS = 384
N_BLOCKS = 2
DW_KERNEL = 7
STEM_KERNEL = 3
LAYER_SCALE_INIT = 1e-2
LN_EPS = 1e-6

EXPECTED_PARAM_COUNT = 160_417

CHECKPOINT_MAGIC = b"RPNCKPT1"

# Logical shapes of every trainable tensor, in checkpoint order.
_PARAM_SHAPES: list[tuple[str, tuple[int, ...]]] = [("stem.weight", (STEM_CHANNELS, 1, 3, 3)), ("stem.bias", (STEM_CHANNELS,))]
for _k in range(N_BLOCKS):
    _PARAM_SHAPES += [
        (f"block{_k}.dw.weight", (STEM_CHANNELS, 1, DW_KERNEL, DW_KERNEL)),
        (f"block{_k}.dw.bias", (STEM_CHANNELS,)),
        (f"block{_k}.ln.scale", (STEM_CHANNELS,)),
        (f"block{_k}.ln.shift", (STEM_CHANNELS,)),
        (f"block{_k}.pw1.weight", (EXPAND_CHANNELS, STEM_CHANNELS)),
        (f"block{_k}.pw1.bias", (EXPAND_CHANNELS,)),
        (f"block{_k}.pw2.weight", (STEM_CHANNELS, EXPAND_CHANNELS)),
        (f"block{_k}.pw2.bias", (STEM_CHANNELS,)),
        (f"block{_k}.layer_scale", (STEM_CHANNELS,)),
    ]
_PARAM_SHAPES += [("head.weight", (1, STEM_CHANNELS, 3, 3)), ("head.bias", (1,))]
del _k
PARAM_SHAPES: dict[str, tuple[int, ...]] = dict(_PARAM_SHAPES)


def _storage_shape(logical: tuple[int, ...]) -> tuple[int, int, int, int]:
    """Rank-4 layout used in memory for a logical parameter shape."""
    if len(logical) == 4:
        return logical
    if len(logical) == 2:
        return (logical[0], logical[1], 1, 1)
    if len(logical) == 1:
        return (1, logical[0], 1, 1)
    raise ValidationError(f"unsupported parameter rank {len(logical)}")


@dataclass
class RpnParams:
    """Named parameter set of the residual prediction network."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(PARAM_SHAPES) - set(self.tensors)
        extra = set(self.tensors) - set(PARAM_SHAPES)
        if missing or extra:
            raise ValidationError(
                f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, t in self.tensors.items():
            want = _storage_shape(PARAM_SHAPES[name])
            if t.shape != want:
                raise ValidationError(f"{name} has shape {t.shape}, expected {want}")
            if not np.isfinite(t.data).all():
                raise ValidationError(f"{name} contains non-finite values")
        if self.count() != EXPECTED_PARAM_COUNT:
            raise ValidationError(
                f"parameter count {self.count()} != expected {EXPECTED_PARAM_COUNT}"
            )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return ((name, self.tensors[name]) for name, _ in _PARAM_SHAPES)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "RpnParams":
        return RpnParams(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()}
        )

    def astype(self, dtype) -> "RpnParams":
        return RpnParams(
            {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.tensors.items()}
        )


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, by resampling."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def build_rpn(init_seed: int = 0, dtype=np.float32) -> RpnParams:
    """Fresh parameter set.

    Conv and pointwise weights draw from a fan-in-scaled truncated normal;
    layernorm is identity; layer scales start at 1e-2; the head is zeroed
    so the network computes f(z) = 0 (identity despeckler) at step 0.
    """
    rng = substream(init_seed, 0x1217)
    tensors: dict[str, Tensor] = {}
    for name, logical in _PARAM_SHAPES:
        shape = _storage_shape(logical)
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.endswith("ln.scale"):
            data = np.ones(shape)
        elif name.endswith("ln.shift"):
            data = np.zeros(shape)
        elif name.endswith("layer_scale"):
            data = np.full(shape, LAYER_SCALE_INIT)
        elif name.startswith("head."):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(logical[1:]))
            data = _trunc_normal(rng, shape, std=float(np.sqrt(1.0 / fan_in)))
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return RpnParams(tensors)


def forward(params: RpnParams, z: Tensor) -> Tensor:
    """Log-domain residual estimate f(z); same spatial size as the input."""
    n, c, h, w = z.shape
    if c != 1:
        raise ValidationError(f"expected single-channel input, got {c} channels")
    if h < DW_KERNEL or w < DW_KERNEL:
        raise ValidationError(
            f"spatial size {h}x{w} below the {DW_KERNEL}x{DW_KERNEL} kernel support"
        )
    p = params.tensors
    x = T.conv2d(z, p["stem.weight"], p["stem.bias"])
    for k in range(N_BLOCKS):
        b = f"block{k}"
        y = T.depthwise_conv7(x, p[f"{b}.dw.weight"], p[f"{b}.dw.bias"])
        y = T.layer_norm_channels(y, p[f"{b}.ln.scale"], p[f"{b}.ln.shift"], LN_EPS)
        y = T.pointwise_conv(y, p[f"{b}.pw1.weight"], p[f"{b}.pw1.bias"])
        y = T.gelu(y)
        y = T.pointwise_conv(y, p[f"{b}.pw2.weight"], p[f"{b}.pw2.bias"])
        y = T.scale_by_channel_vector(y, p[f"{b}.layer_scale"])
        x = x + y
    return T.conv2d(x, p["head.weight"], p["head.bias"])


def despeckle(params: RpnParams, y: Tensor, eps: float = LOG_EPS):
    """Full homomorphic pipeline on an intensity image.

    Returns (x_hat, r): the despeckled intensity exp(z - f(z)) and the
    log-ratio residual r = z - ln(x_hat + eps). For a zero-head network
    x_hat equals y up to the eps offset and r is ~0.
    """
    z = to_log(y, eps)
    f = forward(params, z)
    z_hat = z - f
    x_hat = T.exp_map(z_hat)
    r = z - T.log_map(x_hat, eps)
    return x_hat, r


def mac_count(h: int, w: int) -> int:
    """Multiply-accumulate count of one forward pass at h x w.

    Convolution MACs only (biases, normalization, activations excluded),
    which is the convention the ~4 G figure at 160x160 uses.
    """
    per_pixel = STEM_CHANNELS * 1 * STEM_KERNEL**2                  # stem
    per_pixel += N_BLOCKS * (
        STEM_CHANNELS * DW_KERNEL**2                                 # depthwise
        + STEM_CHANNELS * EXPAND_CHANNELS                            # expand
        + EXPAND_CHANNELS * STEM_CHANNELS                            # project
    )
    per_pixel += 1 * STEM_CHANNELS * STEM_KERNEL**2                  # head
    return per_pixel * h * w


# ---------------------------------------------------------------------
# Checkpoints
#
# Wire format: 8-byte magic "RPNCKPT1", u32 little-endian record count,
# then per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims,
# raw float32 little-endian data. Metadata (epoch counter, loss config,
# speckle spec, optimizer state) rides along as extra named tensors
# under meta/, cfg/, and opt/ prefixes.
# ---------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume or reproduce a training state."""

    params: RpnParams
    epoch: int = 0
    loss_config: dict | None = None
    speckle: dict | None = None
    optimizer: dict[str, np.ndarray] | None = None


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    records: list[tuple[str, np.ndarray]] = []
    for name, t in ckpt.params.items():
        records.append((name, t.data.reshape(PARAM_SHAPES[name])))
    records.append(("meta/epoch", np.array([ckpt.epoch], dtype=np.float32)))
    for prefix, mapping in (("cfg", ckpt.loss_config), ("speckle", ckpt.speckle)):
        if mapping:
            for key in sorted(mapping):
                records.append((f"{prefix}/{key}", np.array([mapping[key]], dtype=np.float32)))
    if ckpt.optimizer:
        for key in sorted(ckpt.optimizer):
            records.append((f"opt/{key}", np.asarray(ckpt.optimizer[key])))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r}; expected {CHECKPOINT_MAGIC.decode()} "
                "(unsupported version or not a checkpoint)"
            )
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        named: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * size, f"data of {name}")
            named[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

    tensors: dict[str, Tensor] = {}
    for name, logical in PARAM_SHAPES.items():
        if name not in named:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = named.pop(name)
        if tuple(arr.shape) != logical:
            raise CheckpointError(
                f"checkpoint parameter {name} has shape {arr.shape}, expected {logical}"
            )
        tensors[name] = Tensor(arr.reshape(_storage_shape(logical)), requires_grad=True)
    try:
        params = RpnParams(tensors)
    except ValidationError as exc:
        raise CheckpointError(str(exc)) from exc

    epoch = int(named.pop("meta/epoch", np.zeros(1))[0])
    loss_config = {k.split("/", 1)[1]: float(v[0]) for k, v in named.items() if k.startswith("cfg/")}
    speckle = {k.split("/", 1)[1]: float(v[0]) for k, v in named.items() if k.startswith("speckle/")}
    optimizer = {k.split("/", 1)[1]: v for k, v in named.items() if k.startswith("opt/")}
    return Checkpoint(
        params=params,
        epoch=epoch,
        loss_config=loss_config or None,
        speckle=speckle or None,
        optimizer=optimizer or None,
    )
