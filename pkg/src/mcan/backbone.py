"""Toy ViT trunk with MoEA adapters, per-cue heads and min aggregation.

The trunk is randomly initialised and frozen. The three cues share it; the CI
cue sees a fixed permutation of the patch position embeddings. Trainable by
default: MoEA adapters and the three heads.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .moea import GateRecord, MoEA

CUES = ("img", "hf", "ci")


@dataclass
class BackboneConfig:
    img_size: int = 32
    patch_size: int = 4
    d: int = 64
    depth: int = 4
    heads: int = 2
    moea_blocks: tuple[int, ...] | None = None  # None: last 2 blocks
    n_experts: int = 4
    router_dim: int | None = None  # None: d // 2
    mlp_ratio: int = 2
    patch_filters: str = "zero_mean"  # or "plain"
    patch_gain: float = 4.0
    patch_bias: bool = True
    head_init: str = "zero"  # or "default" (PyTorch's uniform init)
    train_pos_embed: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.moea_blocks is None:
            self.moea_blocks = tuple(range(max(0, self.depth - 2), self.depth))
        self.moea_blocks = tuple(sorted(int(b) for b in self.moea_blocks))
        if self.router_dim is None:
            self.router_dim = max(1, self.d // 2)
        if self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.d % self.heads:
            raise ValueError(f"d {self.d} not divisible by heads {self.heads}")
        if any(not 0 <= b < self.depth for b in self.moea_blocks):
            raise ValueError(f"moea_blocks {self.moea_blocks} outside [0, {self.depth})")
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.head_init not in ("default", "zero"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.patch_filters not in ("zero_mean", "plain"):
            raise ValueError(f"unknown patch_filters {self.patch_filters!r}")

    @classmethod
    def full(cls, **kw) -> "BackboneConfig":
        """ViT-B/16 proportions with MoEA in the last four blocks."""
        base = dict(img_size=224, patch_size=16, d=768, depth=12, heads=12,
                    moea_blocks=(8, 9, 10, 11), n_experts=4, mlp_ratio=4)
        base.update(kw)
        return cls(**base)

    @property
    def n_patches(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["moea_blocks"] = list(self.moea_blocks)
        return out


@dataclass
class MultiCueLogits:
    img: float
    hf: float
    ci: float

    @classmethod
    def from_tensor(cls, t) -> "MultiCueLogits":
        vals = [float(v) for v in (t.detach() if torch.is_tensor(t) else t)]
        return cls(*vals)

    def as_list(self) -> list[float]:
        return [self.img, self.hf, self.ci]


@dataclass
class Decision:
    score: float
    is_real: bool
    per_cue: dict[str, float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "real" if self.is_real else "fake"


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def logit_threshold(threshold: float) -> float:
    """Logit of a probability threshold; -inf / inf at 0 / 1."""
    if threshold <= 0:
        return -math.inf
    if threshold >= 1:
        return math.inf
    return math.log(threshold) - math.log1p(-threshold)


def aggregate_min(logits: MultiCueLogits | Sequence[float], threshold: float = 0.5) -> Decision:
    """Probability-of-real is the smallest per-cue sigmoid; ties at the threshold count as real.

    The decision compares the smallest logit against logit(threshold). This is
    equivalent because the sigmoid is monotone, and it does not lose logits of
    order 1e-17 to rounding near 0.5.
    """
    vals = logits.as_list() if isinstance(logits, MultiCueLogits) else [float(v) for v in logits]
    probs = {cue: _sigmoid(v) for cue, v in zip(CUES, vals)}
    score = min(probs.values())
    is_real = min(vals) >= logit_threshold(threshold) if threshold < 1 else score >= 1
    return Decision(score=score, is_real=is_real, per_cue=probs)


def min_scores(logits: torch.Tensor) -> torch.Tensor:
    """Batched form of :func:`aggregate_min`'s score; logits is (..., 3)."""
    return torch.sigmoid(logits).min(dim=-1).values


# --- positions --------------------------------------------------------------

def shuffle_permutation(n_patches: int, seed: int) -> np.ndarray:
    """Index map of length L+1 that fixes 0 (class token) and permutes 1..L."""
    perm = np.random.default_rng(seed).permutation(n_patches)
    return np.concatenate([[0], perm + 1])


def make_shuffled_positions(pe: torch.Tensor, seed: int) -> torch.Tensor:
    """Permute the patch rows of an (L+1, d) position table; row 0 stays put."""
    idx = torch.from_numpy(shuffle_permutation(pe.shape[0] - 1, seed))
    return pe[idx]


# --- trunk ------------------------------------------------------------------

def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, L, C*p*p), patches in row-major order, each flattened as (c, y, x)."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))
        return (out, attn) if return_weights else out


class Block(nn.Module):
    """Pre-norm transformer block; an optional MoEA adapter follows the MLP sublayer."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, moea: MoEA | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)
        self.moea = moea

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        if self.moea is None:
            return x, None
        return self.moea(x)


def block_forward(tokens: torch.Tensor, block: Block) -> torch.Tensor:
    return block(tokens)[0]


class MCAN(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d, p = cfg.d, cfg.patch_size
        with torch.random.fork_rng(devices=[]):
            # nn defaults draw from the global RNG; pin it so construction is seed-determined
            torch.manual_seed(cfg.seed)
            self.patch_embed = nn.Linear(3 * p * p, d, bias=cfg.patch_bias)
            self._init_patch_filters()
            self.blocks = nn.ModuleList()
            for i in range(cfg.depth):
                moea = None
                if i in cfg.moea_blocks:
                    moea = MoEA(d, cfg.n_experts, cfg.router_dim, generator=gen)
                self.blocks.append(Block(d, cfg.heads, cfg.mlp_ratio, moea))
            self.norm = nn.LayerNorm(d, elementwise_affine=False)
            self.heads = nn.ModuleDict({cue: nn.Linear(d, 1) for cue in CUES})
            if cfg.head_init == "zero":
                for head in self.heads.values():
                    nn.init.zeros_(head.weight)
                    nn.init.zeros_(head.bias)
        self.cls_token = nn.Parameter(torch.randn(d, generator=gen) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(cfg.n_patches + 1, d, generator=gen) * 0.02)
        self.register_buffer(
            "ci_index", torch.from_numpy(shuffle_permutation(cfg.n_patches, cfg.seed)), persistent=False
        )
        self.freeze_trunk()

    @torch.no_grad()
    def _init_patch_filters(self) -> None:
        # Zero-mean filters per colour channel respond to local structure (edges, noise)
        # rather than brightness, like the stem of a trained ViT.
        w = self.patch_embed.weight.view(self.cfg.d, 3, -1)
        if self.cfg.patch_filters == "zero_mean":
            w -= w.mean(dim=-1, keepdim=True)
        w *= self.cfg.patch_gain

    # parameters ---------------------------------------------------------------

    def is_trainable_name(self, name: str) -> bool:
        if ".moea." in name or name.startswith("heads."):
            return True
        return name == "pos_embed" and self.cfg.train_pos_embed

    def freeze_trunk(self) -> None:
        for name, prm in self.named_parameters():
            prm.requires_grad_(self.is_trainable_name(name))

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def moea_layers(self) -> list[tuple[int, MoEA]]:
        return [(i, b.moea) for i, b in enumerate(self.blocks) if b.moea is not None]

    def project_(self) -> None:
        for _, m in self.moea_layers():
            m.project_()

    # forward --------------------------------------------------------------------

    def positions(self, cue: str) -> torch.Tensor:
        return self.pos_embed[self.ci_index] if cue == "ci" else self.pos_embed

    def embed(self, images: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        size = self.cfg.img_size
        if images.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} input, got {tuple(images.shape[-2:])}")
        tokens = self.patch_embed(patchify(images, self.cfg.patch_size))
        cls = self.cls_token.expand(tokens.shape[0], 1, -1)
        return torch.cat([cls, tokens], dim=1) + positions

    def forward(self, img: torch.Tensor, hf: torch.Tensor, ci: torch.Tensor
                ) -> tuple[torch.Tensor, list[GateRecord]]:
        """Cue batches (B, 3, H, W) -> logits (B, 3) in img, hf, ci order, plus gate records."""
        b = img.shape[0]
        x = torch.cat([self.embed(t, self.positions(cue)) for cue, t in zip(CUES, (img, hf, ci))])
        records = []
        for i, block in enumerate(self.blocks):
            x, gates = block(x)
            if gates is not None:
                for k, cue in enumerate(CUES):
                    records.append(GateRecord(gates[k * b:(k + 1) * b], i, cue))
        feats = self.norm(x[:, 0]).reshape(3, b, -1)
        logits = torch.cat([self.heads[cue](feats[k]) for k, cue in enumerate(CUES)], dim=-1)
        return logits, records


def forward_multicue(model: MCAN, bundle) -> tuple[MultiCueLogits, list[GateRecord]]:
    """Single-sample forward on a :class:`~mcan.cues.CueBundle`."""
    def to_t(a):
        return torch.as_tensor(np.ascontiguousarray(a.transpose(2, 0, 1)), dtype=torch.float32)[None]

    dtype = next(model.parameters()).dtype
    logits, records = model(*(to_t(a).to(dtype) for a in (bundle.img, bundle.hf, bundle.ci)))
    return MultiCueLogits.from_tensor(logits[0]), records
