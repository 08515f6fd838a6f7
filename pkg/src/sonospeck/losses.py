"""Self-supervised objective: statistical, structural, and curriculum losses.

With no clean targets available, training constrains the log-ratio
residual r to behave like speckle: zero mean and variance equal to the
trigamma target (statistical term), smooth except across image edges
(structural term), and, early on, anchored to a median-filtered version
of the observation (curriculum term, annealed linearly to zero).

The identity mapping r = 0 cannot minimize the statistical term: it
scores exactly sigma2_tgt, while any residual that matches the target
statistics scores 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor

_GRAD_FLOOR = 1e-12  # keeps the gradient-magnitude sqrt differentiable at 0


@dataclass(frozen=True)
class LossConfig:
    """Weights and knobs of the total objective.

    beta0/horizon control the curriculum anneal (weight beta0 at epoch 0,
    linearly down to 0 at ``horizon`` epochs); gamma and lam weight the
    statistical and structural terms; sigma_edge sets how strong an image
    gradient must be to suppress residual smoothing; median_window is the
    spatial extent of the curriculum prior; eps is the shared log offset.
    """

    beta0: float = 1.0
    horizon: int = 30
    gamma: float = 1.0
    lam: float = 0.05
    sigma_edge: float = 0.1
    median_window: int = 3
    eps: float = 1e-6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError(f"horizon must be >= 1, got {self.horizon}")
        if self.median_window < 3 or self.median_window % 2 == 0:
            raise ValidationError(
                f"median_window must be odd and >= 3, got {self.median_window}"
            )
        for name in ("beta0", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.sigma_edge <= 0:
            raise ValidationError("sigma_edge must be positive")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")

    def with_lambda(self, lam: float) -> "LossConfig":
        return replace(self, lam=lam)


@dataclass
class LossBreakdown:
    """Per-term values of one objective evaluation plus the autodiff root."""

    l_med: float
    l_stat: float
    l_str: float
    beta_t: float
    total: float
    node: Tensor


def loss_stat(r: Tensor, sigma2_tgt: float) -> Tensor:
    """First/second-moment residual penalty, per patch then batch-averaged:
    |mean(r)| + |var(r) - sigma2_tgt| with population variance."""
    if r.data.size == 0:
        raise ValidationError("loss_stat on an empty batch")
    mu = T.mean_per_sample(r)
    var = T.var_per_sample(r)
    per_patch = T.abs_map(mu) + T.abs_map(var - float(sigma2_tgt))
    return T.reduce_mean(per_patch)


def loss_str(r: Tensor, x_hat: Tensor, sigma_edge: float) -> Tensor:
    """Edge-weighted residual smoothness.

    Forward differences of r in both directions are penalized with weight
    exp(-|grad x_hat| / sigma_edge), so smoothing is active in homogeneous
    regions and shuts off across strong image edges. The image-gradient
    magnitude lives on the common (h-1, w-1) grid and is edge-replicated
    onto each direction's native grid; the sum is normalized by the count
    of valid difference terms, h*(w-1) + (h-1)*w per image.
    """
    if r.shape != x_hat.shape:
        raise ValidationError(f"shape mismatch: {r.shape} vs {x_hat.shape}")
    if sigma_edge <= 0:
        raise ValidationError("sigma_edge must be positive")
    n, _, h, w = r.shape
    if h < 2 or w < 2:
        raise ValidationError("loss_str needs at least a 2x2 image")

    dxr = T.abs_map(T.forward_diff(r, "horizontal"))   # (n,c,h,w-1)
    dyr = T.abs_map(T.forward_diff(r, "vertical"))     # (n,c,h-1,w)
    dxx = T.forward_diff(x_hat, "horizontal")
    dyx = T.forward_diff(x_hat, "vertical")
    gx = T.crop_spatial(dxx, h - 1, w - 1)
    gy = T.crop_spatial(dyx, h - 1, w - 1)
    mag = T.sqrt_map(gx * gx + gy * gy + _GRAD_FLOOR)
    weight = T.exp_map(mag * (-1.0 / sigma_edge))      # (n,c,h-1,w-1)

    wx = T.extend_replicate(weight, "vertical")        # back to (n,c,h,w-1)
    wy = T.extend_replicate(weight, "horizontal")      # back to (n,c,h-1,w)
    count = h * (w - 1) + (h - 1) * w
    total = T.reduce_mean(wx * dxr) * float(h * (w - 1)) + T.reduce_mean(wy * dyr) * float(
        (h - 1) * w
    )
    return total * (1.0 / count)


def median_filter2d(img: np.ndarray, window: int) -> np.ndarray:
    """Spatial median with reflect borders, applied per image of an
    (n, c, h, w) array."""
    if window % 2 == 0 or window < 1:
        raise ValidationError(f"median window must be odd, got {window}")
    h, w = img.shape[-2:]
    p = window // 2
    if window > h or window > w:
        raise ValidationError(f"median window {window} exceeds image size {h}x{w}")
    padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(p, p), (p, p)], mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(-2, -1))
    return np.median(win, axis=(-2, -1))


def loss_med(z_hat: Tensor, y: Tensor, median_window: int, eps: float) -> Tensor:
    """Curriculum prior: mean |z_hat - ln(Med(y) + eps)|.

    The median target is a fixed teacher, detached from the tape; only
    z_hat receives gradient.
    """
    if z_hat.shape != y.shape:
        raise ValidationError(f"shape mismatch: {z_hat.shape} vs {y.shape}")
    med = median_filter2d(y.data, median_window)
    target = Tensor(np.log(med + eps).astype(y.data.dtype, copy=False))
    return T.reduce_mean(T.abs_map(z_hat - target))


def beta_schedule(t: int, beta0: float, horizon: int) -> float:
    """Linear anneal: beta0 at t=0, exactly 0 for t >= horizon."""
    if t < 0:
        raise ValidationError(f"epoch index must be >= 0, got {t}")
    return beta0 * max(0.0, 1.0 - t / horizon)


def loss_total(y: Tensor, z_hat: Tensor, x_hat: Tensor, r: Tensor,
               config: LossConfig, sigma2_tgt: float, t: int) -> LossBreakdown:
    """Combine the three terms at epoch t: beta(t)*L_med + gamma*L_stat
    + lam*L_str. The returned node is the autodiff root."""
    beta_t = beta_schedule(t, config.beta0, config.horizon)
    l_med = loss_med(z_hat, y, config.median_window, config.eps)
    l_stat = loss_stat(r, sigma2_tgt)
    l_str = loss_str(r, x_hat, config.sigma_edge)
    node = l_med * beta_t + l_stat * config.gamma + l_str * config.lam
    return LossBreakdown(
        l_med=l_med.item(),
        l_stat=l_stat.item(),
        l_str=l_str.item(),
        beta_t=beta_t,
        total=node.item(),
        node=node,
    )
