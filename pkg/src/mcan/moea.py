"""Mixture-of-Encoder Adapter.

A residual adapter ``z -> z @ w_u @ W_d(z) + z`` whose encoder ``W_d(z)`` is a
gate-weighted sum of expert matrices. Gates come from a cosine router with a
learnable temperature. Expert 0 is a full ``d x c`` matrix; expert ``i >= 1`` is
factored as ``(d x c//i) @ (c//i x c)``, so experts differ in rank.

Because the encoder is linear in the gates, mixing the expert matrices and then
applying the result equals applying every expert and mixing the outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

TAU_MIN = 1e-3


@dataclass
class GateRecord:
    """Gate vectors of one MoEA layer for one cue; ``gates`` is (..., tokens, N)."""

    gates: torch.Tensor
    layer_index: int
    cue: str = ""


def route(w1: torch.Tensor, w_e: torch.Tensor, tau: torch.Tensor | float, tokens: torch.Tensor) -> torch.Tensor:
    """Softmax over experts of cos(tokens @ w1, w_e[:, i]) / tau.

    A token whose projection has zero norm gets uniform gates.
    """
    h = tokens @ w1
    norm = h.norm(dim=-1, keepdim=True)
    h_unit = torch.where(norm > 0, h / norm.clamp_min(torch.finfo(h.dtype).tiny), torch.zeros_like(h))
    e_unit = w_e / w_e.norm(dim=0, keepdim=True).clamp_min(torch.finfo(w_e.dtype).tiny)
    if not torch.is_tensor(tau):
        tau = torch.tensor(tau, dtype=h.dtype)
    logits = (h_unit @ e_unit) / tau.clamp_min(TAU_MIN)
    return torch.softmax(logits, dim=-1)


def expert_rank(c: int, i: int) -> int:
    return c if i == 0 else c // i


class MoEA(nn.Module):
    def __init__(self, d: int, n_experts: int = 4, router_dim: int | None = None,
                 init_scale: float = 0.02, tau_init: float = 0.07,
                 generator: torch.Generator | None = None):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        c = d  # residual in the forward pass requires c == d
        if n_experts > 1 and c // (n_experts - 1) < 1:
            raise ValueError(f"expert {n_experts - 1} would have rank 0 (c={c})")
        d_e = router_dim or max(1, d // 2)
        self.d, self.c, self.n_experts, self.router_dim = d, c, n_experts, d_e

        def uniform(*shape):
            return nn.Parameter((torch.rand(*shape, generator=generator) * 2 - 1) * init_scale)

        self.w_u = nn.Parameter(torch.zeros(d, d))
        self.w1 = uniform(d, d_e)
        self.w_e = uniform(d_e, n_experts)
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))
        self.full_expert = uniform(d, c)
        self.down = nn.ParameterList([uniform(d, c // i) for i in range(1, n_experts)])
        self.up = nn.ParameterList([uniform(c // i, c) for i in range(1, n_experts)])

    def materialize_expert(self, i: int) -> torch.Tensor:
        if not 0 <= i < self.n_experts:
            raise IndexError(f"expert index {i} out of range [0, {self.n_experts})")
        if i == 0:
            return self.full_expert
        return self.down[i - 1] @ self.up[i - 1]

    def experts(self) -> torch.Tensor:
        """All experts stacked, (N, d, c)."""
        return torch.stack([self.materialize_expert(i) for i in range(self.n_experts)])

    def route(self, tokens: torch.Tensor) -> torch.Tensor:
        return route(self.w1, self.w_e, self.tau, tokens)

    def mix_experts(self, gates: torch.Tensor) -> torch.Tensor:
        """Mixed encoder sum_i gates[..., i] * expert_i, shape (..., d, c)."""
        if gates.shape[-1] != self.n_experts:
            raise ValueError(f"expected {self.n_experts} gates, got {gates.shape[-1]}")
        return torch.einsum("...n,ndc->...dc", gates, self.experts())

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tokens.shape[-1] != self.d:
            raise ValueError(f"token dim {tokens.shape[-1]} != adapter dim {self.d}")
        gates = self.route(tokens)
        u = tokens @ self.w_u
        # apply every expert, then mix; equal to mixing first (see moea_forward)
        per_expert = torch.einsum("...d,ndc->...nc", u, self.experts())
        out = (gates.unsqueeze(-1) * per_expert).sum(dim=-2) + tokens
        return out, gates

    @torch.no_grad()
    def project_(self) -> None:
        """Keep the temperature positive after an optimizer step."""
        self.tau.clamp_(min=TAU_MIN)


def materialize_expert(layer: MoEA, i: int) -> torch.Tensor:
    return layer.materialize_expert(i)


def mix_experts(layer: MoEA, gates: torch.Tensor) -> torch.Tensor:
    return layer.mix_experts(gates)


def moea_forward(layer: MoEA, tokens: torch.Tensor) -> torch.Tensor:
    """Literal form: build each token's mixed encoder, then apply it."""
    if tokens.shape[-1] != layer.d:
        raise ValueError(f"token dim {tokens.shape[-1]} != adapter dim {layer.d}")
    w_d = layer.mix_experts(layer.route(tokens))
    u = tokens @ layer.w_u
    return (u.unsqueeze(-2) @ w_d).squeeze(-2) + tokens


def _flat_gates(records) -> torch.Tensor:
    if isinstance(records, torch.Tensor):
        gates = records
    else:
        records = list(records)
        if not records:
            raise ValueError("empty batch of gate records")
        n = records[0].gates.shape[-1]
        gates = torch.cat([r.gates.reshape(-1, n) for r in records])
    if gates.numel() == 0:
        raise ValueError("empty batch of gate records")
    return gates.reshape(-1, gates.shape[-1])


def importance_loss(records: torch.Tensor | Sequence[GateRecord]) -> torch.Tensor:
    """Squared coefficient of variation of per-expert total gate mass."""
    importance = _flat_gates(records).sum(dim=0)
    mean = importance.mean()
    var = ((importance - mean) ** 2).mean()
    return var / mean**2


def entropy_loss(records: torch.Tensor | Sequence[GateRecord]) -> torch.Tensor:
    """Mean Shannon entropy (nats) of per-token gates."""
    g = _flat_gates(records)
    # clamping keeps 0 * log 0 at 0 (with zero gradient) and leaves one-hot gates at exactly 0
    return -(g * torch.log(g.clamp_min(torch.finfo(g.dtype).tiny))).sum(dim=-1).mean()


def routing_losses(records: Sequence[GateRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    """(importance, entropy), each averaged over MoEA layers.

    Gate records of all cues routed through the same layer are pooled, since the
    adapters are shared across cues.
    """
    if not records:
        raise ValueError("empty batch of gate records")
    by_layer: dict[int, list[GateRecord]] = {}
    for r in records:
        by_layer.setdefault(r.layer_index, []).append(r)
    imp = torch.stack([importance_loss(rs) for _, rs in sorted(by_layer.items())]).mean()
    ent = torch.stack([entropy_loss(rs) for _, rs in sorted(by_layer.items())]).mean()
    return imp, ent
