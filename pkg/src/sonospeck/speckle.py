"""Multiplicative speckle physics.

An L-look intensity observation is y = x * n with unit-mean Gamma speckle
n ~ Gamma(L, 1/L). Taking logs turns the noise additive, z = ln(x) + eta,
and the variance of eta is the trigamma function psi(1, L): that value is
the physics target the statistical training loss aims the residual at.

Everything here is a pure function over explicit RNG streams so that
scene simulation and augmentation stay reproducible regardless of call
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor import Tensor, exp_map, log_map

LOG_EPS = 1e-6


def trigamma(looks: float) -> float:
    """psi(1, L) = sum_{k>=0} 1/(L+k)^2, the log-domain speckle variance
    of an L-look intensity image.

    Upward recurrence shifts the argument to >= 10, then the asymptotic
    Bernoulli series finishes; absolute error is below 1e-10 over the
    supported range.
    """
    if looks <= 0:
        raise ValidationError(f"looks must be positive, got {looks}")
    x = float(looks)
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    # psi(1,x) ~ 1/x + 1/(2x^2) + B2/x^3 + B4/x^5 + B6/x^7 + B8/x^9
    series = inv * (1.0 + inv * (0.5 + inv * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 - inv2 / 30.0)))))
    return acc + series


def looks_from_variance(sigma2: float) -> float:
    """Invert trigamma: the L with psi(1, L) = sigma2, found by bisection.

    trigamma is strictly decreasing, so the root is unique. Supported
    range is 0 < sigma2 <= psi(1, 0.5).
    """
    if not (0.0 < sigma2 <= trigamma(0.5)):
        raise ValidationError(
            f"sigma2 must lie in (0, {trigamma(0.5):.6f}], got {sigma2}"
        )
    lo = 0.5
    hi = 1.0
    while trigamma(hi) > sigma2:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        v = trigamma(mid)
        if abs(v - sigma2) < 1e-10:
            return mid
        if v > sigma2:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SpeckleSpec:
    """Equivalent number of looks and the derived log-variance target."""

    looks: float
    sigma2_tgt: float

    def __post_init__(self):
        if self.looks <= 0:
            raise ValidationError(f"looks must be positive, got {self.looks}")
        if abs(self.sigma2_tgt - trigamma(self.looks)) > 1e-9:
            raise ValidationError(
                "sigma2_tgt inconsistent with looks: "
                f"{self.sigma2_tgt} vs trigamma({self.looks}) = {trigamma(self.looks)}"
            )

    @classmethod
    def from_looks(cls, looks: float) -> "SpeckleSpec":
        return cls(looks=float(looks), sigma2_tgt=trigamma(looks))

    @classmethod
    def from_variance(cls, sigma2: float) -> "SpeckleSpec":
        return cls(looks=looks_from_variance(sigma2), sigma2_tgt=float(sigma2))


def substream(seed: int, *ids: int) -> np.random.Generator:
    """Counter-based RNG stream keyed by (seed, ids...).

    Streams with distinct ids are independent regardless of draw order,
    which keeps scene generation and augmentation reproducible when the
    surrounding loop structure changes.
    """
    mask = 0xFFFFFFFFFFFFFFFF
    base = int(seed) & mask
    key = base
    for i in ids:
        # splitmix64-style mixing of each id into the key
        key = (key + 0x9E3779B97F4A7C15 * ((int(i) & mask) + 1)) & mask
        key = (key ^ (key >> 30)) * 0xBF58476D1CE4E5B9 & mask
        key = (key ^ (key >> 27)) * 0x94D049BB133111EB & mask
        key = key ^ (key >> 31)
    return np.random.Generator(np.random.Philox(key=(base << 64) | key))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(key=int(rng) & 0xFFFFFFFFFFFFFFFF))


def sample_speckle(shape: tuple[int, ...], looks: float, rng) -> np.ndarray:
    """Unit-mean Gamma(L, 1/L) speckle field: E[n] = 1, Var[n] = 1/L.

    rng is a Generator or an integer seed (a Philox counter-based stream;
    the generator's gamma sampler is the Marsaglia-Tsang squeeze with the
    standard boost for shape < 1). All samples are strictly positive.
    """
    if looks <= 0:
        raise ValidationError(f"looks must be positive, got {looks}")
    gen = _as_generator(rng)
    field = gen.gamma(shape=looks, scale=1.0 / looks, size=shape)
    # Gamma(L, 1/L) support is (0, inf); guard against underflow to 0.
    tiny = np.finfo(np.float64).tiny
    return np.maximum(field, tiny)


def to_log(y: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Homomorphic transform z = ln(y + eps); rejects negative pixels."""
    if y.data.min() < 0:
        raise ValidationError("to_log requires non-negative pixel intensities")
    if eps < 0:
        raise ValidationError("eps must be non-negative")
    if eps == 0 and y.data.min() == 0:
        raise ValidationError("eps = 0 requires strictly positive input")
    return log_map(y, eps)


def from_log(z_hat: Tensor) -> Tensor:
    """Inverse homomorphic transform, exp(z_hat).

    The forward eps offset is absorbed rather than subtracted; for
    intensities >= 0.01 the round trip is accurate to about 1e-6 + eps.
    """
    return exp_map(z_hat)


@dataclass
class SyntheticScene:
    """Clean reflectivity, its speckled observation, and the looks used."""

    clean: Tensor
    noisy: Tensor
    looks_used: float


def make_scene(kind: str, size: int, contrast: float, looks: float,
               seed: int) -> SyntheticScene:
    """Synthetic test scene with multiplicative speckle.

    kinds:
      constant   flat reflectivity 0.5 (speckle-only statistics)
      piecewise  exactly two gray levels with the given ratio, as random
                 bright rectangles on a dark background (step edges)
      blobs      smooth Gaussian bumps spanning [0.1, 1.0]

    Reflectivity stays within [0.1, 1.0] so log-domain values remain in
    roughly [-2.3, 0]; piecewise needs contrast <= 10 for that to hold.
    """
    if size < 32:
        raise ValidationError(f"size must be >= 32, got {size}")
    if contrast <= 1:
        raise ValidationError(f"contrast must exceed 1, got {contrast}")
    rng = substream(seed, 0xC0FFEE)
    if kind == "constant":
        clean = np.full((size, size), 0.5)
    elif kind == "piecewise":
        lo = max(1.0 / contrast, 0.1)
        hi = lo * contrast
        clean = np.full((size, size), lo)
        n_rects = int(rng.integers(3, 7))
        min_side = max(4, size // 8)
        for _ in range(n_rects):
            rh = int(rng.integers(min_side, size // 2))
            rw = int(rng.integers(min_side, size // 2))
            top = int(rng.integers(0, size - rh))
            left = int(rng.integers(0, size - rw))
            clean[top : top + rh, left : left + rw] = hi
    elif kind == "blobs":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        field = np.zeros((size, size))
        for _ in range(int(rng.integers(4, 9))):
            cy, cx = rng.uniform(0, size, size=2)
            s = rng.uniform(size / 16, size / 4)
            amp = rng.uniform(0.3, 1.0)
            field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        span = field.max() - field.min()
        clean = 0.1 + 0.9 * (field - field.min()) / (span if span > 0 else 1.0)
    else:
        raise ValidationError(f"unknown scene kind {kind!r}")

    noise = sample_speckle((size, size), looks, substream(seed, 0x5BEC))
    clean_t = Tensor(clean.reshape(1, 1, size, size).astype(np.float32))
    noisy_t = Tensor((clean * noise).reshape(1, 1, size, size).astype(np.float32))
    return SyntheticScene(clean=clean_t, noisy=noisy_t, looks_used=float(looks))


def enl(region) -> float:
    """Equivalent number of looks of a region: mean^2 / population variance.

    A perfectly constant region has zero variance and returns +inf, which
    is a valid outcome (it is how the identity denoiser shows up in the
    ratio-image metrics).
    """
    data = region.data if isinstance(region, Tensor) else np.asarray(region)
    if data.size == 0:
        raise ValidationError("enl of an empty region")
    data = data.astype(np.float64, copy=False)
    mean = data.mean()
    var = data.var()
    if var == 0.0:
        return math.inf
    return float(mean * mean / var)
