"""Synthetic degradation operator and triplet construction.

Images are ``(C, H, W)`` float64 arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

BLUR_KINDS = ("isotropic-gaussian", "anisotropic-gaussian")
ORDERS = ("first", "second")

# IJG luminance quantization table (quality 50).
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


class DegradationError(ValueError):
    """Invalid degradation parameters, space, or image shape."""


@dataclass(frozen=True)
class DegradationParams:
    """One point of the degradation space.

    ``aniso_ratio`` and ``blur_angle`` only matter for the anisotropic kernel:
    the minor axis has std ``blur_sigma * aniso_ratio`` and the major axis is
    rotated by ``blur_angle`` radians.
    """

    blur_kind: str = "isotropic-gaussian"
    blur_sigma: float = 1.0
    kernel_size: int = 7
    noise_sigma: float = 0.0
    scale_factor: int = 4
    compression_quality: Optional[int] = None
    order: str = "first"
    noise_seed: int = 0
    aniso_ratio: float = 1.0
    blur_angle: float = 0.0

    def __post_init__(self):
        if self.blur_kind not in BLUR_KINDS:
            raise DegradationError(f"unknown blur_kind {self.blur_kind!r}")
        if not self.blur_sigma > 0:
            raise DegradationError("blur_sigma must be > 0")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise DegradationError("kernel_size must be odd and >= 3")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise DegradationError("noise_sigma must lie in [0, 0.5]")
        if self.scale_factor < 1:
            raise DegradationError("scale_factor must be >= 1")
        q = self.compression_quality
        if q is not None and not 10 <= q <= 100:
            raise DegradationError("compression_quality must be in [10, 100] or None")
        if self.order not in ORDERS:
            raise DegradationError(f"unknown order {self.order!r}")
        if not 0 <= self.noise_seed < 2**64:
            raise DegradationError("noise_seed must be an unsigned 64-bit integer")
        if not 0 < self.aniso_ratio <= 1:
            raise DegradationError("aniso_ratio must lie in (0, 1]")

    def kind_key(self) -> tuple:
        """Every field except the noise seed."""
        return (
            self.blur_kind,
            self.blur_sigma,
            self.kernel_size,
            self.noise_sigma,
            self.scale_factor,
            self.compression_quality,
            self.order,
            self.aniso_ratio if self.blur_kind == "anisotropic-gaussian" else 1.0,
            self.blur_angle if self.blur_kind == "anisotropic-gaussian" else 0.0,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        return cls(**d)


def identity_params(scale_factor: int = 1) -> DegradationParams:
    """Parameters that only resample (negligible blur, no noise or compression)."""
    return DegradationParams(blur_sigma=1e-3, kernel_size=3, scale_factor=scale_factor)


# --------------------------------------------------------------------- kernels


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Normalized isotropic Gaussian kernel of shape ``(size, size)``."""
    return anisotropic_gaussian_kernel(sigma, sigma, 0.0, size)


def anisotropic_gaussian_kernel(
    sigma_x: float, sigma_y: float, angle: float, size: int
) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise DegradationError("kernel size must be odd and >= 3")
    if not (sigma_x > 0 and sigma_y > 0):
        raise DegradationError("kernel sigma must be > 0")
    r = size // 2
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = c * xs + s * ys
    v = -s * xs + c * ys
    k = np.exp(-(u**2 / (2 * sigma_x**2) + v**2 / (2 * sigma_y**2)))
    return k / k.sum()


def kernel_for(theta: DegradationParams) -> np.ndarray:
    if theta.blur_kind == "isotropic-gaussian":
        return gaussian_kernel(theta.blur_sigma, theta.kernel_size)
    return anisotropic_gaussian_kernel(
        theta.blur_sigma,
        theta.blur_sigma * theta.aniso_ratio,
        theta.blur_angle,
        theta.kernel_size,
    )


def blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel correlation with edge-clamped padding."""
    return np.stack([ndimage.correlate(ch, kernel, mode="nearest") for ch in x])


# ---------------------------------------------------------------------- resize


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax**2, ax**3
    out = np.where(ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1, 0.0)
    out = np.where((ax > 1) & (ax < 2), a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, out)
    return out


@functools.lru_cache(maxsize=128)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """``(n_out, n_in)`` bicubic interpolation matrix along one axis.

    Pixel centers are aligned (half-pixel convention) and out-of-range taps
    are clamped to the edge. When shrinking with ``antialias`` the kernel is
    stretched by the inverse scale, as in MATLAB ``imresize``.
    """
    if n_in < 1 or n_out < 1:
        raise DegradationError("resize dimensions must be >= 1")
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = int(np.floor(center - support))
        taps = np.arange(lo, lo + int(np.ceil(2 * support)) + 2)
        w = _cubic((center - taps) / stretch)
        w = w / w.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    m.setflags(write=False)
    return m


def bicubic_resize(x: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Catmull-Rom (a=-0.5) bicubic resize of a ``(C, H, W)`` image, clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise DegradationError("output size must be >= 1")
    _, h, w = x.shape
    mh = resize_matrix(h, out_h, antialias)
    mw = resize_matrix(w, out_w, antialias)
    out = np.einsum("oh,chw,pw->cop", mh, x, mw)
    return np.clip(out, 0.0, 1.0)


# ----------------------------------------------------------------- compression


def _quant_table(quality: int) -> np.ndarray:
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((_JPEG_LUMA * s + 50.0) / 100.0), 1.0)


def block_dct_compress(x: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block-DCT quantization of each channel at a JPEG-style quality."""
    q = _quant_table(quality)
    c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(x * 255.0 - 128.0, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = padded.shape[1:]
    blocks = padded.reshape(c, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, H, W)[:, :h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


# ------------------------------------------------------------------- operator


def _single_pass(x: np.ndarray, theta: DegradationParams, scale: int, pass_index: int) -> np.ndarray:
    y = blur(x, kernel_for(theta))
    if scale > 1:
        _, h, w = y.shape
        y = bicubic_resize(y, h // scale, w // scale)
    if theta.noise_sigma > 0:
        rng = np.random.default_rng([theta.noise_seed, pass_index])
        y = y + theta.noise_sigma * rng.standard_normal(y.shape)
    y = np.clip(y, 0.0, 1.0)
    if theta.compression_quality is not None:
        y = block_dct_compress(y, theta.compression_quality)
    return y


def apply_degradation(x_hr: np.ndarray, theta: DegradationParams) -> np.ndarray:
    """Blur, downsample, add noise, compress; once or twice depending on ``order``.

    The second pass reuses every field of ``theta`` except that it does not
    resample again and its noise is drawn from a fresh substream.
    """
    x = np.asarray(x_hr, dtype=np.float64)
    if x.ndim != 3:
        raise DegradationError(f"expected (C, H, W) image, got shape {x.shape}")
    s = theta.scale_factor
    if x.shape[1] % s or x.shape[2] % s:
        raise DegradationError(f"image size {x.shape[1:]} not divisible by scale {s}")
    y = _single_pass(x, theta, s, 0)
    if theta.order == "second":
        y = _single_pass(y, theta, 1, 1)
    return y


# ----------------------------------------------------------------------- space


def _check_range(name: str, r: Sequence[float], lo: float, hi: float) -> None:
    if len(r) != 2 or not (lo <= r[0] <= r[1] <= hi):
        raise DegradationError(f"invalid range for {name}: {r!r}")


@dataclass
class DegradationSpace:
    """Ranges from which :func:`sample_params` draws. Real ranges are ``[lo, hi]``."""

    blur_kinds: tuple = BLUR_KINDS
    blur_sigma: tuple = (0.2, 3.0)
    aniso_ratio: tuple = (0.3, 1.0)
    kernel_sizes: tuple = (7, 9, 11)
    noise_sigma: tuple = (0.0, 0.08)
    scale_factor: int = 4
    compression_quality: tuple = (30, 95)
    compression_prob: float = 0.5
    orders: tuple = ("first", "second")
    noise_seed: Optional[int] = None

    def __post_init__(self):
        self.blur_kinds = tuple(self.blur_kinds)
        self.blur_sigma = tuple(self.blur_sigma)
        self.aniso_ratio = tuple(self.aniso_ratio)
        self.kernel_sizes = tuple(self.kernel_sizes)
        self.noise_sigma = tuple(self.noise_sigma)
        self.compression_quality = tuple(self.compression_quality)
        self.orders = tuple(self.orders)
        self.validate()

    def validate(self) -> None:
        if not self.blur_kinds or any(k not in BLUR_KINDS for k in self.blur_kinds):
            raise DegradationError(f"invalid blur_kinds {self.blur_kinds!r}")
        _check_range("blur_sigma", self.blur_sigma, 1e-6, np.inf)
        _check_range("aniso_ratio", self.aniso_ratio, 1e-6, 1.0)
        if not self.kernel_sizes or any(k < 3 or k % 2 == 0 for k in self.kernel_sizes):
            raise DegradationError(f"invalid kernel_sizes {self.kernel_sizes!r}")
        _check_range("noise_sigma", self.noise_sigma, 0.0, 0.5)
        if self.scale_factor < 1:
            raise DegradationError("scale_factor must be >= 1")
        _check_range("compression_quality", self.compression_quality, 10, 100)
        if not 0.0 <= self.compression_prob <= 1.0:
            raise DegradationError("compression_prob must lie in [0, 1]")
        if not self.orders or any(o not in ORDERS for o in self.orders):
            raise DegradationError(f"invalid orders {self.orders!r}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpace":
        return cls(**d)


def sample_params(space: DegradationSpace, rng: np.random.Generator) -> DegradationParams:
    """Draw one parameter set; the draw order is fixed so a seeded rng reproduces it."""
    space.validate()
    kind = space.blur_kinds[rng.integers(len(space.blur_kinds))]
    sigma = rng.uniform(*space.blur_sigma)
    ratio = rng.uniform(*space.aniso_ratio)
    angle = rng.uniform(0.0, np.pi)
    ksize = space.kernel_sizes[rng.integers(len(space.kernel_sizes))]
    noise = rng.uniform(*space.noise_sigma)
    use_jpeg = rng.uniform() < space.compression_prob
    quality = int(rng.integers(space.compression_quality[0], space.compression_quality[1] + 1))
    order = space.orders[rng.integers(len(space.orders))]
    seed = int(rng.integers(0, 2**63))
    if space.noise_seed is not None:
        seed = space.noise_seed
    aniso = kind == "anisotropic-gaussian"
    return DegradationParams(
        blur_kind=kind,
        blur_sigma=float(sigma),
        kernel_size=int(ksize),
        noise_sigma=float(noise),
        scale_factor=space.scale_factor,
        compression_quality=quality if use_jpeg else None,
        order=order,
        noise_seed=seed,
        aniso_ratio=float(ratio) if aniso else 1.0,
        blur_angle=float(angle) if aniso else 0.0,
    )


# -------------------------------------------------------------------- triplets


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positives: list
    negatives: list
    anchor_params: DegradationParams
    negative_params: list
    anchor_source: int = -1
    positive_sources: list = field(default_factory=list)
    positive_params: list = field(default_factory=list)
    negative_sources: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.positives)


MAX_REDRAWS = 16


def draw_negative_params(
    theta: DegradationParams, space: DegradationSpace, rng: np.random.Generator
) -> DegradationParams:
    """Draw parameters whose degradation differs from ``theta``.

    Noise seeds are ignored when comparing: two draws that differ only by seed
    produce statistically identical degradations.
    """
    for _ in range(MAX_REDRAWS):
        cand = sample_params(space, rng)
        if cand.kind_key() != theta.kind_key():
            return cand
    return replace(cand, blur_sigma=cand.blur_sigma * 1.1)


def build_triplets(
    x_hr: np.ndarray,
    hr_pool: Sequence[np.ndarray],
    theta: DegradationParams,
    n: int,
    rng: np.random.Generator,
    space: Optional[DegradationSpace] = None,
    anchor_source: int = -1,
) -> TripletBatch:
    """Anchor ``D(x_hr, theta)``, negatives ``D(x_hr, theta_i)``, positives ``D(x'_i, theta)``.

    ``hr_pool`` must not contain ``x_hr``; positives draw ``n`` of its entries
    without replacement and record their pool indices as sources.
    """
    if n < 1:
        raise DegradationError("n must be >= 1")
    if len(hr_pool) < n:
        raise DegradationError(f"pool of {len(hr_pool)} images cannot supply {n} positives")
    space = space or DegradationSpace(scale_factor=theta.scale_factor)
    anchor = apply_degradation(x_hr, theta)
    picks = rng.choice(len(hr_pool), size=n, replace=False)
    positives = [apply_degradation(hr_pool[i], theta) for i in picks]
    neg_params = [draw_negative_params(theta, space, rng) for _ in range(n)]
    negatives = [apply_degradation(x_hr, p) for p in neg_params]
    return TripletBatch(
        anchor=anchor,
        positives=positives,
        negatives=negatives,
        anchor_params=theta,
        negative_params=neg_params,
        anchor_source=anchor_source,
        positive_sources=[int(i) for i in picks],
        positive_params=[theta] * n,
        negative_sources=[anchor_source] * n,
    )
