"""Self-supervised training loop.

Each step samples random 64x64 patches from the corpus, optionally
multiplies a fraction of them by fresh synthetic speckle, runs the
homomorphic forward pass, and minimizes the curriculum-weighted total
objective with AdamW. No clean targets are involved anywhere.

All randomness flows through counter-based streams derived from the
config seed, so a deterministic run is bit-reproducible on the same
machine.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import NumericalError, TrainingError, ValidationError
from .losses import LossBreakdown, LossConfig, beta_schedule, loss_total
from .model import Checkpoint, RpnParams, build_rpn, forward, save_checkpoint
from .speckle import SpeckleSpec, sample_speckle, substream, to_log
from .tensor import Tensor

METRICS_HEADER = ["epoch", "beta", "l_med", "l_stat", "l_str", "total", "var_r", "val_mscore"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults follow the training protocol
    (64x64 patches, batch 8, 50 epochs, fixed AdamW learning rate 1e-5,
    speckle augmentation on half the samples with L in {1..4})."""

    patch_size: int = 64
    batch_size: int = 8
    epochs: int = 50
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_prob: float = 0.5
    augment_looks: tuple[int, ...] = (1, 2, 3, 4)
    seed: int = 0
    checkpoint_every: int = 5
    deterministic: bool = True
    steps_per_epoch: int | None = None  # None: ceil(corpus/batch) scaled by patch coverage

    def __post_init__(self):
        if self.patch_size < 8:
            raise ValidationError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if not (0.0 <= self.augment_prob <= 1.0):
            raise ValidationError(f"augment_prob must be in [0,1], got {self.augment_prob}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if any(l <= 0 for l in self.augment_looks):
            raise ValidationError("augment_looks must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("adam betas must lie in [0, 1)")


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter set.

    The decay p <- p * (1 - lr*wd) is applied separately from the
    bias-corrected adaptive step, never through the gradient.
    """

    def __init__(self, params: RpnParams, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {name}; aborting step")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= self.lr * (m / bc1) / denom

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out


def _corpus_arrays(corpus) -> list[np.ndarray]:
    arrays = []
    for img in corpus:
        data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
        if data.ndim == 2:
            data = data[None, None]
        if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 1:
            raise ValidationError("corpus images must be single-channel (1,1,h,w) or (h,w)")
        arrays.append(data)
    if not arrays:
        raise ValidationError("corpus is empty")
    return arrays


def sample_patches(corpus, n: int, patch_size: int, rng: np.random.Generator) -> Tensor:
    """n random patches: uniform image choice, uniform top-left corner."""
    arrays = _corpus_arrays(corpus)
    for a in arrays:
        if a.shape[2] < patch_size or a.shape[3] < patch_size:
            raise ValidationError(
                f"corpus image {a.shape[2]}x{a.shape[3]} smaller than patch size {patch_size}"
            )
    out = np.empty((n, 1, patch_size, patch_size), dtype=np.float32)
    for i in range(n):
        img = arrays[int(rng.integers(0, len(arrays)))]
        top = int(rng.integers(0, img.shape[2] - patch_size + 1))
        left = int(rng.integers(0, img.shape[3] - patch_size + 1))
        out[i, 0] = img[0, 0, top : top + patch_size, left : left + patch_size]
    return Tensor(out)


def augment_speckle(batch: Tensor, prob: float, looks_set, rng: np.random.Generator) -> Tensor:
    """Multiply each sample, independently with probability ``prob``, by a
    fresh unit-mean Gamma(L, 1/L) field with L drawn uniformly from
    ``looks_set``. Unselected samples pass through bit-exact."""
    if not (0.0 <= prob <= 1.0):
        raise ValidationError(f"prob must be in [0,1], got {prob}")
    looks = tuple(looks_set)
    if not looks:
        raise ValidationError("looks_set is empty")
    if prob == 0.0:
        return batch
    data = batch.data.copy()
    n = data.shape[0]
    for i in range(n):
        if rng.random() < prob:
            L = float(looks[int(rng.integers(0, len(looks)))])
            field_arr = sample_speckle(data[i].shape, L, rng)
            data[i] = data[i] * field_arr.astype(data.dtype)
    return Tensor(data)


def default_steps_per_epoch(corpus, cfg: TrainConfig) -> int:
    """ceil(corpus size / batch size), with fresh random patches each step."""
    arrays = _corpus_arrays(corpus)
    return max(1, math.ceil(len(arrays) / cfg.batch_size))


@dataclass
class TrainResult:
    params: RpnParams
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    metrics_path: Path | None = None


def _train_step(params: RpnParams, batch: Tensor, loss_cfg: LossConfig,
                sigma2_tgt: float, epoch: int) -> tuple[LossBreakdown, float]:
    """One forward/backward on a pre-augmented intensity batch. Returns the
    loss breakdown and the mean per-patch residual variance."""
    z = to_log(batch, loss_cfg.eps)
    f = forward(params, z)
    z_hat = z - f
    x_hat = T.exp_map(z_hat)
    # In the log domain the ratio residual is exactly the network output.
    r = f
    breakdown = loss_total(batch, z_hat, x_hat, r, loss_cfg, sigma2_tgt, epoch)
    var_r = float(r.data.var(axis=(1, 2, 3)).mean())
    return breakdown, var_r


def train(corpus, train_cfg: TrainConfig, loss_cfg: LossConfig, speckle: SpeckleSpec,
          out_dir=None, val_images=None, val_metric=None) -> TrainResult:
    """Run the full curriculum training loop.

    corpus: list of positive intensity images (Tensors or arrays).
    out_dir: if given, metrics.csv and periodic checkpoints are written there.
    val_images: optional list of (noisy, ...) images scored each epoch with
    val_metric(params, val_images) -> float (recorded in the CSV).

    Aborts with TrainingError on a non-finite loss, keeping the last good
    checkpoint on disk.
    """
    arrays = _corpus_arrays(corpus)
    for a in arrays:
        if min(a.shape[2], a.shape[3]) < train_cfg.patch_size:
            raise ValidationError("patch_size exceeds the smallest corpus image")
        if a.min() < 0:
            raise ValidationError("corpus intensities must be non-negative")

    params = build_rpn(train_cfg.seed)
    opt = AdamW(params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay,
                beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2, eps=train_cfg.adam_eps)
    steps = train_cfg.steps_per_epoch or default_steps_per_epoch(arrays, train_cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    writer = None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

    result = TrainResult(params=params, metrics_path=metrics_path)

    def write_checkpoint(epoch: int, tag: str) -> Path | None:
        if out_dir is None:
            return None
        path = out_dir / f"checkpoint_{tag}.rpn"
        save_checkpoint(path, Checkpoint(
            params=params,
            epoch=epoch,
            loss_config={
                "beta0": loss_cfg.beta0, "horizon": loss_cfg.horizon,
                "gamma": loss_cfg.gamma, "lambda": loss_cfg.lam,
                "sigma_edge": loss_cfg.sigma_edge,
                "median_window": loss_cfg.median_window, "eps": loss_cfg.eps,
            },
            speckle={"looks": speckle.looks, "sigma2_tgt": speckle.sigma2_tgt},
            optimizer=opt.state_arrays(),
        ))
        result.checkpoints.append(path)
        return path

    try:
        for epoch in range(train_cfg.epochs):
            sums = {"l_med": 0.0, "l_stat": 0.0, "l_str": 0.0, "total": 0.0, "var_r": 0.0}
            for step in range(steps):
                patch_rng = substream(train_cfg.seed, 1, epoch, step)
                batch = sample_patches(arrays, train_cfg.batch_size,
                                       train_cfg.patch_size, patch_rng)
                aug_rng = substream(train_cfg.seed, 2, epoch, step)
                batch = augment_speckle(batch, train_cfg.augment_prob,
                                        train_cfg.augment_looks, aug_rng)
                breakdown, var_r = _train_step(params, batch, loss_cfg,
                                               speckle.sigma2_tgt, epoch)
                if not math.isfinite(breakdown.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}; aborting "
                        "(last checkpoint retained)"
                    )
                T.backward(breakdown.node)
                opt.step()
                opt.zero_grad()
                sums["l_med"] += breakdown.l_med
                sums["l_stat"] += breakdown.l_stat
                sums["l_str"] += breakdown.l_str
                sums["total"] += breakdown.total
                sums["var_r"] += var_r

            row = {
                "epoch": epoch,
                "beta": beta_schedule(epoch, loss_cfg.beta0, loss_cfg.horizon),
                "l_med": sums["l_med"] / steps,
                "l_stat": sums["l_stat"] / steps,
                "l_str": sums["l_str"] / steps,
                "total": sums["total"] / steps,
                "var_r": sums["var_r"] / steps,
                "val_mscore": "",
            }
            if val_images is not None and val_metric is not None:
                row["val_mscore"] = repr(float(val_metric(params, val_images)))
            result.history.append(row)
            if writer is not None:
                writer.writerow([row[k] if k != "val_mscore" else row["val_mscore"]
                                 for k in METRICS_HEADER])
                fh.flush()
            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                write_checkpoint(epoch + 1, f"epoch{epoch + 1:04d}")
        write_checkpoint(train_cfg.epochs, "final")
    finally:
        if fh is not None:
            fh.close()
    return result


def select_target_variance(corpus, train_cfg: TrainConfig, loss_cfg: LossConfig,
                           val_fraction: float = 0.1, looks_range=(4, 20),
                           sweep_epochs: int = 30, mscore_fn=None) -> tuple[SpeckleSpec, list[dict]]:
    """Choose the target variance by sweeping candidate looks.

    The corpus is split (seeded) into a held-out validation subset of
    ``val_fraction`` and a training remainder; for each integer L in
    ``looks_range`` a shortened run trains with sigma2 = trigamma(L) and
    the mean validation M-score (computed against nominal looks L) is
    recorded. Returns the argmin spec and the full score table.
    """
    arrays = _corpus_arrays(corpus)
    lo, hi = int(looks_range[0]), int(looks_range[1])
    if lo > hi or lo < 1:
        raise ValidationError(f"invalid looks range [{lo}, {hi}]")
    if mscore_fn is None:
        from .metrics import mean_mscore_for_params
        mscore_fn = mean_mscore_for_params

    n_val = max(1, int(round(val_fraction * len(arrays))))
    if n_val >= len(arrays):
        raise ValidationError("corpus too small for the requested validation fraction")
    order = substream(train_cfg.seed, 3).permutation(len(arrays))
    val = [arrays[i] for i in order[:n_val]]
    tr = [arrays[i] for i in order[n_val:]]

    rows: list[dict] = []
    best = None
    for L in range(lo, hi + 1):
        spec = SpeckleSpec.from_looks(L)
        cfg = replace(train_cfg, epochs=sweep_epochs, checkpoint_every=0)
        result = train(tr, cfg, loss_cfg, spec, out_dir=None)
        m = float(mscore_fn(result.params, val, nominal_looks=float(L)))
        rows.append({"looks": L, "sigma2_tgt": spec.sigma2_tgt, "mean_mscore": m})
        if best is None or m < best[1]:
            best = (spec, m)
    return best[0], rows
