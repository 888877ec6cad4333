"""Frequency- and wavelet-domain primitives.

The 2-D FFT is an iterative radix-2 transform over the last two axes; ``dft2``
is the O(n^2) matrix oracle that works for any size. The Haar transform is a
single-level orthonormal 2x2 decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, get_dtype, record


@dataclass
class ComplexSpectrum:
    real: np.ndarray
    imag: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, z: np.ndarray, dtype=None) -> "ComplexSpectrum":
        dtype = dtype or get_dtype()
        return cls(z.real.astype(dtype), z.imag.astype(dtype))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(m // 2) / m)


def _fft_last(z: np.ndarray, inverse: bool = False) -> np.ndarray:
    n = z.shape[-1]
    if not is_power_of_two(n):
        raise ShapeError(f"fast FFT needs power-of-two extents, got {n}; use dft2 for other sizes")
    a = z[..., _bit_reverse(n)]
    m = 2
    lead = a.shape[:-1]
    while m <= n:
        w = _twiddles(m)
        if inverse:
            w = np.conj(w)
        blocks = a.reshape(lead + (n // m, m))
        u = blocks[..., : m // 2]
        v = blocks[..., m // 2 :] * w
        a = np.concatenate([u + v, u - v], axis=-1).reshape(lead + (n,))
        m *= 2
    return a


def _fft2_complex(z: np.ndarray, inverse: bool = False) -> np.ndarray:
    z = _fft_last(z, inverse)
    z = np.swapaxes(_fft_last(np.swapaxes(z, -1, -2), inverse), -1, -2)
    if inverse:
        z = z / (z.shape[-1] * z.shape[-2])
    return z


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def fft2(x) -> ComplexSpectrum:
    """Unnormalized 2-D FFT over the last two axes (power-of-two extents only)."""
    a = _raw(x)
    return ComplexSpectrum.from_complex(_fft2_complex(a.astype(np.complex128)), a.dtype)


def ifft2(s: ComplexSpectrum) -> Tensor:
    """Inverse of :func:`fft2` (``1/(H*W)`` normalized); returns the real part."""
    return Tensor(_fft2_complex(s.to_complex().astype(np.complex128), inverse=True).real.astype(s.real.dtype))


def ifft2_complex(s: ComplexSpectrum) -> ComplexSpectrum:
    return ComplexSpectrum.from_complex(_fft2_complex(s.to_complex(), inverse=True), s.real.dtype)


def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def dft2(x) -> ComplexSpectrum:
    """Naive DFT by explicit matrix products; any extents, O(n^2) per axis."""
    a = _raw(x)
    h, w = a.shape[-2:]
    z = dft_matrix(h) @ a.astype(np.complex128) @ dft_matrix(w).T
    return ComplexSpectrum.from_complex(z, a.dtype if a.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# radial bands


@lru_cache(maxsize=None)
def _band_index(h: int, w: int, bands: int) -> np.ndarray:
    fy = np.fft.fftfreq(h) * 2.0  # signed, in units of Nyquist
    fx = np.fft.fftfreq(w) * 2.0
    r = np.hypot(fy[:, None], fx[None, :])
    rmax = r.max()
    if rmax == 0:
        return np.zeros((h, w), dtype=np.int64)
    idx = np.floor(r / (rmax / bands)).astype(np.int64)
    return np.minimum(idx, bands - 1)


def radial_band_mask(h: int, w: int, bands: int) -> Tensor:
    """Disjoint 0/1 masks ``(bands, 1, H, W)`` of equal-width frequency annuli.

    Radii are measured on the centered frequency plane (Nyquist = 1 per axis);
    masks are laid out in natural FFT order so they apply directly to ``fft2``
    output. Band 0 holds DC, the last band holds the Nyquist corner.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    idx = _band_index(h, w, bands)
    masks = (idx[None] == np.arange(bands)[:, None, None]).astype(get_dtype())
    return Tensor(masks[:, None])


def band_masks(h: int, w: int, bands: int) -> np.ndarray:
    return radial_band_mask(h, w, bands).data[:, 0]


# ---------------------------------------------------------------------------
# differentiable spectral ops


def log_magnitude(x: Tensor) -> Tensor:
    """``log(1 + |fft2(x)|)`` elementwise over the spectrum."""
    z = _fft2_complex(x.data.astype(np.complex128))
    mag = np.abs(z)
    out = np.log1p(mag).astype(x.data.dtype)
    hw = z.shape[-1] * z.shape[-2]

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 0.0)
        weighted = g / (1.0 + mag) * unit
        gx = (_fft2_complex(weighted, inverse=True) * hw).real
        return (gx.astype(x.data.dtype),)

    return record("log_magnitude", out, (x,), backward)


def band_mean(x: Tensor, masks: np.ndarray) -> Tensor:
    """Per-channel means of ``x`` inside each mask: ``(N, C, H, W) -> (N, B*C)``, band-major."""
    n, c, h, w = x.shape
    masks = np.asarray(masks, dtype=x.data.dtype)
    counts = np.maximum(masks.reshape(masks.shape[0], -1).sum(axis=1), 1.0)
    weights = masks / counts[:, None, None]
    out = np.einsum("nchw,bhw->nbc", x.data, weights).reshape(n, -1)

    def backward(g):
        gb = g.reshape(n, masks.shape[0], c)
        return (np.einsum("nbc,bhw->nchw", gb, weights),)

    return record("band_mean", out, (x,), backward)


def spectral_gain_filter(x: Tensor, gains: Tensor, masks: np.ndarray) -> Tensor:
    """``Re(ifft2(G * fft2(x)))`` with ``G[c] = sum_b gains[b, c] * masks[b]``."""
    n, c, h, w = x.shape
    if gains.shape != (masks.shape[0], c):
        raise ShapeError(f"gains must be ({masks.shape[0]}, {c}), got {gains.shape}")
    gfield = np.einsum("bc,bhw->chw", gains.data, masks)[None]
    xf = _fft2_complex(x.data.astype(np.complex128))
    out = _fft2_complex(gfield * xf, inverse=True).real.astype(x.data.dtype)

    def backward(g):
        gf = _fft2_complex(g.astype(np.complex128))
        gx = _fft2_complex(gfield * gf, inverse=True).real.astype(x.data.dtype)
        dfield = (xf * np.conj(gf)).real / (h * w)
        ggain = np.einsum("nchw,bhw->bc", dfield, masks).astype(gains.data.dtype)
        return gx, ggain

    return record("spectral_gain_filter", out, (x, gains), backward)


# ---------------------------------------------------------------------------
# Haar wavelets


@dataclass
class WaveletSubbands:
    LL: Tensor
    LH: Tensor
    HL: Tensor
    HH: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.LL, self.LH, self.HL, self.HH

    def energy(self) -> float:
        return float(sum(np.sum(t.data.astype(np.float64) ** 2) for t in self.as_tuple()))


# sign patterns over the 2x2 block [[a, b], [c, d]]
_HAAR_SIGNS = {
    "LL": (1, 1, 1, 1),
    "LH": (1, -1, 1, -1),
    "HL": (1, 1, -1, -1),
    "HH": (1, -1, -1, 1),
}


def _haar_band(x: Tensor, band: str) -> Tensor:
    sa, sb, sc, sd = _HAAR_SIGNS[band]
    a = x.data[..., 0::2, 0::2]
    b = x.data[..., 0::2, 1::2]
    c = x.data[..., 1::2, 0::2]
    d = x.data[..., 1::2, 1::2]
    out = 0.5 * (sa * a + sb * b + sc * c + sd * d)

    def backward(g):
        gx = np.empty_like(x.data)
        gx[..., 0::2, 0::2] = 0.5 * sa * g
        gx[..., 0::2, 1::2] = 0.5 * sb * g
        gx[..., 1::2, 0::2] = 0.5 * sc * g
        gx[..., 1::2, 1::2] = 0.5 * sd * g
        return (gx,)

    return record(f"haar_{band}", out, (x,), backward)


def haar_dwt2(x: Tensor) -> WaveletSubbands:
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"haar_dwt2 needs even H and W, got {x.shape[-2:]}")
    return WaveletSubbands(*(_haar_band(x, name) for name in ("LL", "LH", "HL", "HH")))


def haar_idwt2(sb: WaveletSubbands) -> Tensor:
    bands = sb.as_tuple()
    shape = bands[0].shape
    for t in bands[1:]:
        if t.shape != shape:
            raise ShapeError("all subbands must share one shape")
    ll, lh, hl, hh = (t.data for t in bands)
    out = np.empty(shape[:-2] + (shape[-2] * 2, shape[-1] * 2), dtype=ll.dtype)
    out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[..., 0::2, 1::2] = 0.5 * (ll - lh + hl - hh)
    out[..., 1::2, 0::2] = 0.5 * (ll + lh - hl - hh)
    out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)

    def backward(g):
        a = g[..., 0::2, 0::2]
        b = g[..., 0::2, 1::2]
        c = g[..., 1::2, 0::2]
        d = g[..., 1::2, 1::2]
        return (
            0.5 * (a + b + c + d),
            0.5 * (a - b + c - d),
            0.5 * (a + b - c - d),
            0.5 * (a - b - c + d),
        )

    return record("haar_idwt2", out, bands, backward)


def soft_threshold(x: Tensor, t: Tensor) -> Tensor:
    """``sign(x) * max(|x| - t, 0)`` with per-channel (or same-shape) thresholds."""
    td = t.data
    if td.shape != x.shape:
        if x.ndim == 4 and td.shape == (x.shape[1],):
            td = td.reshape(1, -1, 1, 1)
        else:
            raise ShapeError(f"threshold shape {t.shape} is not per-channel for {x.shape}")
    if np.any(td < 0):
        raise ValueError("thresholds must be non-negative")
    ax = np.abs(x.data)
    live = ax > td
    sign = np.sign(x.data)
    out = sign * np.maximum(ax - td, 0.0)

    def backward(g):
        gx = g * live
        gt = -(g * sign * live)
        if gt.shape != t.shape:
            gt = gt.sum(axis=(0, 2, 3))
        return gx, gt

    return record("soft_threshold", out.astype(x.data.dtype), (x, t), backward)
