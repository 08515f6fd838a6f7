"""Despeckling quality metrics.

The headline metric scores the ratio image rho = noisy / denoised: a
perfect despeckler leaves pure speckle in rho, so within homogeneous
blocks rho should have unit mean and an equivalent number of looks
matching the sensor. Blocks are auto-selected by mean and ENL
consistency; the score averages the percent deviations of both. The
identity denoiser produces a constant ratio, infinite ENL in every
block, zero selected blocks, and therefore an infinite score; lower is
better.

EPI (edge preservation index) compares directional gradient-magnitude
sums of the denoised image against the noisy input: 1 means edges fully
preserved, 0 means everything flattened. PSNR is only meaningful on
synthetic data where the clean reference exists.
"""

from __future__ import annotations

import math
import platform
import time
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .model import RpnParams, despeckle, forward, mac_count
from .tensor import Tensor, no_grad

RATIO_EPS = 1e-6


@dataclass
class MScoreReport:
    """Ratio-image statistics over automatically selected blocks."""

    block_size: int
    n_blocks_total: int
    n_blocks_selected: int
    mean_enl_dev_pct: float
    mean_mu_dev_pct: float
    m_value: float


@dataclass
class EpiReport:
    epi_hd: float
    epi_vd: float


def _image2d(x) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    data = np.squeeze(data)
    if data.ndim != 2:
        raise ValidationError(f"expected a single 2-D image, got shape {data.shape}")
    return data.astype(np.float64, copy=False)


def mscore(noisy, denoised, nominal_looks: float, block_size: int = 25,
           tol_enl: float = 0.2, tol_mu: float = 0.1, eps: float = RATIO_EPS) -> MScoreReport:
    """Homogeneous-block ratio-image score; lower is better, +inf when no
    block passes selection.

    The denominator is floored at eps (multiplicatively harmless for any
    well-scaled image), which keeps the score exactly invariant to a
    joint positive rescaling of both inputs.
    """
    a = _image2d(noisy)
    b = _image2d(denoised)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if nominal_looks <= 0:
        raise ValidationError("nominal_looks must be positive")
    if block_size < 2:
        raise ValidationError("block_size must be >= 2")

    ratio = a / np.maximum(b, eps)
    h, w = ratio.shape
    nby, nbx = h // block_size, w // block_size
    if nby == 0 or nbx == 0:
        raise ValidationError(
            f"block_size {block_size} larger than image {h}x{w}"
        )
    blocks = ratio[: nby * block_size, : nbx * block_size].reshape(
        nby, block_size, nbx, block_size
    ).transpose(0, 2, 1, 3).reshape(nby * nbx, -1)

    means = blocks.mean(axis=1)
    var = blocks.var(axis=1)
    with np.errstate(divide="ignore"):
        enl_b = np.where(var > 0, means * means / np.where(var > 0, var, 1.0), np.inf)
    sel = (np.abs(enl_b / nominal_looks - 1.0) <= tol_enl) & (np.abs(means - 1.0) <= tol_mu)

    n_sel = int(sel.sum())
    if n_sel == 0:
        return MScoreReport(block_size, nby * nbx, 0, math.inf, math.inf, math.inf)
    r_enl = 100.0 * np.abs(enl_b[sel] - nominal_looks) / nominal_looks
    r_mu = 100.0 * np.abs(means[sel] - 1.0)
    return MScoreReport(
        block_size=block_size,
        n_blocks_total=nby * nbx,
        n_blocks_selected=n_sel,
        mean_enl_dev_pct=float(r_enl.mean()),
        mean_mu_dev_pct=float(r_mu.mean()),
        m_value=float(0.5 * (r_enl.mean() + r_mu.mean())),
    )


def epi(noisy, denoised, direction: str) -> float:
    """Directional edge preservation index: the ratio of summed forward
    difference magnitudes, denoised over noisy. 'horizontal' compares
    left-right differences, 'vertical' top-bottom."""
    a = _image2d(noisy)
    b = _image2d(denoised)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if direction == "horizontal":
        num = np.abs(np.diff(b, axis=1)).sum()
        den = np.abs(np.diff(a, axis=1)).sum()
    elif direction == "vertical":
        num = np.abs(np.diff(b, axis=0)).sum()
        den = np.abs(np.diff(a, axis=0)).sum()
    else:
        raise ValidationError(f"direction must be 'horizontal' or 'vertical', got {direction!r}")
    if den == 0.0:
        raise NumericalError("EPI undefined: the noisy image is perfectly flat")
    return float(num / den)


def epi_report(noisy, denoised) -> EpiReport:
    return EpiReport(
        epi_hd=epi(noisy, denoised, "horizontal"),
        epi_vd=epi(noisy, denoised, "vertical"),
    )


def psnr(reference, estimate, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf for an exact match."""
    a = _image2d(reference)
    b = _image2d(estimate)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValidationError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def mean_mscore_for_params(params: RpnParams, noisy_images, nominal_looks: float,
                           block_size: int = 25, tol_enl: float = 0.2,
                           tol_mu: float = 0.1) -> float:
    """Mean M over a set of noisy images despeckled with ``params``.

    Images whose score is infinite contribute inf to the mean, so a model
    that fails selection anywhere is ranked last.
    """
    scores = []
    with no_grad():
        for img in noisy_images:
            t = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=np.float32))
            x_hat, _ = despeckle(params, t)
            scores.append(mscore(t, x_hat, nominal_looks, block_size, tol_enl, tol_mu).m_value)
    return float(np.mean(scores))


@dataclass
class BenchReport:
    height: int
    width: int
    iterations: int
    images_per_sec: float
    macs: int
    hardware: str


def bench_throughput(params: RpnParams, h: int, w: int, iterations: int = 20,
                     warmup: int = 3, seed: int = 0) -> BenchReport:
    """Wall-clock single-image inference rate plus the analytic MAC count."""
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    probe = Tensor(rng.uniform(0.1, 1.0, size=(1, 1, h, w)).astype(np.float32))
    with no_grad():
        for _ in range(max(3, warmup)):
            forward(params, probe)
        t0 = time.perf_counter()
        for _ in range(iterations):
            forward(params, probe)
        elapsed = time.perf_counter() - t0
    hardware = f"{platform.machine()} / {platform.processor() or 'unknown cpu'}"
    return BenchReport(
        height=h, width=w, iterations=iterations,
        images_per_sec=float(iterations / elapsed) if elapsed > 0 else math.inf,
        macs=mac_count(h, w), hardware=hardware,
    )
