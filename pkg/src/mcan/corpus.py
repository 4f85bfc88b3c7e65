"""Synthetic real/fake corpus and cue datasets.

Both classes draw from the same texture family: a multi-octave value-noise
luminance field multiplied by a slowly varying colour field, so chromaticity is
locally constant before any noise is added. "Real" samples then receive i.i.d.
Gaussian sensor noise per pixel and channel; "fake" samples are box-blurred and
noise free.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .cues import DEFAULT_EPS, ci_transform, highfreq_cue
from .image_core import load_image, resize_bilinear

REAL, FAKE = 1, 0


@dataclass
class SyntheticCorpusSpec:
    n_per_class: int = 2000
    img_size: int = 32
    noise_sigma: float = 0.02
    smooth_kernel: int = 5
    texture_octaves: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.smooth_kernel < 1 or self.smooth_kernel % 2 == 0:
            raise ValueError("smooth_kernel must be a positive odd number")
        if self.img_size < 2:
            raise ValueError("img_size must be >= 2")
        if self.texture_octaves < 1:
            raise ValueError("texture_octaves must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int8, 1 real / 0 fake

    def __len__(self) -> int:
        return len(self.labels)


def value_noise(rng: np.random.Generator, size: int, octaves: int, base_cells: int = 4) -> np.ndarray:
    """Sum of bilinearly upsampled uniform lattices, octave k has base_cells * 2**k cells; in [0, 1]."""
    out = np.zeros((size, size, 1))
    total = 0.0
    for k in range(octaves):
        cells = max(2, min(size, base_cells * 2**k))
        amp = 0.5**k
        out += amp * resize_bilinear(rng.random((cells, cells, 1)), size, size)
        total += amp
    return out[..., 0] / total


def texture(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    lum = 0.15 + 0.8 * value_noise(rng, size, octaves)
    chroma = resize_bilinear(0.35 + 0.65 * rng.random((2, 2, 3)), size, size)
    return lum[..., None] * chroma


def box_blur(img: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return img.copy()
    r = k // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    return sliding_window_view(padded, (k, k), axis=(0, 1)).mean(axis=(-2, -1))


def generate_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    """Deterministic in ``spec``; real and fake samples use separate seed streams."""
    real_rng, fake_rng = (np.random.default_rng(np.random.SeedSequence([spec.seed, s])) for s in (REAL, FAKE))
    n, s = spec.n_per_class, spec.img_size
    images = np.empty((2 * n, s, s, 3), dtype=np.float32)
    for i in range(n):
        tex = texture(real_rng, s, spec.texture_octaves)
        if spec.noise_sigma > 0:
            tex = tex + real_rng.normal(0.0, spec.noise_sigma, tex.shape)
        images[i] = np.clip(tex, 0.0, 1.0)
    for i in range(n):
        tex = texture(fake_rng, s, spec.texture_octaves)
        images[n + i] = np.clip(box_blur(tex, spec.smooth_kernel), 0.0, 1.0)
    labels = np.concatenate([np.full(n, REAL), np.full(n, FAKE)]).astype(np.int8)
    return Corpus(images, labels)


def load_image_folder(root: str | os.PathLike, img_size: int) -> Corpus:
    """Read ``root/real/*`` and ``root/fake/*`` (PNG or PPM), resized to img_size."""
    root = Path(root)
    images, labels = [], []
    for sub, label in (("real", REAL), ("fake", FAKE)):
        d = root / sub
        if not d.is_dir():
            raise FileNotFoundError(f"{d}: missing class folder")
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in (".png", ".ppm"):
                continue
            img = load_image(f)
            if img.shape[:2] != (img_size, img_size):
                img = np.clip(resize_bilinear(img, img_size, img_size), 0.0, 1.0)
            images.append(img.astype(np.float32))
            labels.append(label)
    if not images:
        raise ValueError(f"{root}: no images found")
    return Corpus(np.stack(images), np.asarray(labels, dtype=np.int8))


@dataclass
class CueDataset:
    """Model-ready cue tensors, each (N, 3, H, W) float32, plus float labels."""

    img: torch.Tensor
    hf: torch.Tensor
    ci: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "CueDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return CueDataset(self.img[idx], self.hf[idx], self.ci[idx], self.labels[idx])

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        b = self.subset(idx)
        return b.img, b.hf, b.ci, b.labels


def build_cue_dataset(corpus: Corpus, eps: float = DEFAULT_EPS) -> CueDataset:
    n = len(corpus)
    if n == 0:
        raise ValueError("empty corpus")
    h, w = corpus.images.shape[1:3]
    out = {k: np.empty((n, 3, h, w), dtype=np.float32) for k in ("img", "hf", "ci")}
    for i, im in enumerate(corpus.images.astype(np.float64)):
        out["img"][i] = im.transpose(2, 0, 1)
        out["hf"][i] = highfreq_cue(im).transpose(2, 0, 1)
        out["ci"][i] = ci_transform(im, eps).transpose(2, 0, 1)
    return CueDataset(
        img=torch.from_numpy(out["img"]),
        hf=torch.from_numpy(out["hf"]),
        ci=torch.from_numpy(out["ci"]),
        labels=torch.from_numpy(corpus.labels.astype(np.float32)),
    )


def shifted_spec(spec: SyntheticCorpusSpec, **kw) -> SyntheticCorpusSpec:
    """Distribution-shifted copy: half the sensor noise, blur kernel + 2."""
    base = spec.to_dict()
    base.update(noise_sigma=spec.noise_sigma / 2, smooth_kernel=spec.smooth_kernel + 2)
    base.update(kw)
    return SyntheticCorpusSpec(**base)
