"""Cue extraction: raw image, Haar high-frequency map, chromaticity inconsistency."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image_core import as_planes

CHANNELS = {"r": 0, "g": 1, "b": 2}
DEFAULT_EPS = 1e-3


@dataclass(frozen=True)
class DwtSubbands:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


@dataclass(frozen=True)
class CueBundle:
    img: np.ndarray
    hf: np.ndarray
    ci: np.ndarray

    def __post_init__(self):
        if not (self.img.shape == self.hf.shape == self.ci.shape):
            raise ValueError(
                f"cue shapes differ: img {self.img.shape}, hf {self.hf.shape}, ci {self.ci.shape}"
            )

    def stack(self) -> np.ndarray:
        """(3 cues, H, W, 3 channels) in img, hf, ci order."""
        return np.stack([self.img, self.hf, self.ci])


def _channel(c) -> int:
    if isinstance(c, str):
        return CHANNELS[c.lower()]
    return int(c)


def chromaticity_ratio(img: np.ndarray, j, k, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel (rho_j + eps) / (rho_k + eps)."""
    j, k = _channel(j), _channel(k)
    if j == k:
        raise ValueError("chromaticity ratio needs two distinct channels")
    a = np.asarray(img, dtype=np.float64)
    return (a[..., j] + eps) / (a[..., k] + eps)


def ci_transform(img: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Chromaticity inconsistency: exp(-r/g), exp(-g/b), exp(-b/r) with eps-regularized ratios.

    With ``eps=0`` a zero denominator gives 0 in that channel (the limit of exp(-x) as x -> inf)
    and 0/0 is treated as a unit ratio. With ``eps > 0`` the ratio can reach (1 + eps) / eps,
    whose exponential underflows float64, so outputs are floored at the smallest normal double
    to stay strictly positive.
    """
    a = as_planes(img, min_size=1)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    num = a + eps
    den = np.roll(a, -1, axis=-1) + eps  # (g, b, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    ratio = np.where((num == 0) & (den == 0), 1.0, ratio)
    out = np.exp(-ratio)
    if eps > 0:
        out = np.maximum(out, np.finfo(np.float64).tiny)
    return out


def consistency_score(plane: np.ndarray, window: int = 3) -> float:
    """Mean local variance over all fully-contained ``window`` x ``window`` neighbourhoods.

    Low values mean locally uniform planes; zero for a constant plane.
    """
    p = np.asarray(plane, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a single-channel plane, got shape {p.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if window > min(p.shape):
        raise ValueError(f"window {window} larger than plane {p.shape}")
    # shift-invariance: variance of (p - mean) equals variance of p, and is better conditioned
    p = p - p.mean()
    patches = sliding_window_view(p, (window, window))
    return float(patches.var(axis=(-2, -1)).mean())


def image_consistency(img: np.ndarray, window: int = 3) -> float:
    """Channel-averaged ``consistency_score`` of an (H, W, 3) image."""
    a = as_planes(img)
    return float(np.mean([consistency_score(a[..., c], window) for c in range(a.shape[-1])]))


def _pad_even(a: np.ndarray) -> np.ndarray:
    pad_h = a.shape[0] % 2
    pad_w = a.shape[1] % 2
    if pad_h or pad_w:
        widths = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (a.ndim - 2)
        a = np.pad(a, widths, mode="reflect")
    return a


def haar_dwt_level(img: np.ndarray) -> DwtSubbands:
    """One level of the orthonormal 2D Haar transform.

    Odd heights or widths are reflect-padded by one row/column first.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError(f"Haar DWT needs at least 2x2 pixels, got {a.shape[:2]}")
    a = _pad_even(a)
    tl = a[0::2, 0::2]
    tr = a[0::2, 1::2]
    bl = a[1::2, 0::2]
    br = a[1::2, 1::2]
    return DwtSubbands(
        ll=(tl + tr + bl + br) / 2,
        lh=(tl - tr + bl - br) / 2,
        hl=(tl + tr - bl - br) / 2,
        hh=(tl - tr - bl + br) / 2,
    )


def haar_idwt_level(bands: DwtSubbands) -> np.ndarray:
    ll, lh, hl, hh = bands.ll, bands.lh, bands.hl, bands.hh
    h, w = ll.shape[:2]
    out = np.empty((2 * h, 2 * w) + ll.shape[2:], dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def highfreq_cue(img: np.ndarray) -> np.ndarray:
    """Mean absolute Haar detail, nearest-upsampled to the input size, min-max scaled per image."""
    a = as_planes(img)
    bands = haar_dwt_level(a)
    detail = (np.abs(bands.lh) + np.abs(bands.hl) + np.abs(bands.hh)) / 3
    up = np.repeat(np.repeat(detail, 2, axis=0), 2, axis=1)[: a.shape[0], : a.shape[1]]
    lo, hi = up.min(), up.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)


def extract_cues(img: np.ndarray, eps: float = DEFAULT_EPS) -> CueBundle:
    a = as_planes(img)
    return CueBundle(img=a, hf=highfreq_cue(a), ci=ci_transform(a, eps))
