"""Losses, optimisation loop, evaluation and finite-difference gradient checks."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import CUES, logit_threshold
from .corpus import CueDataset
from .moea import GateRecord, routing_losses

log = logging.getLogger(__name__)

LOSS_TERMS = ("l_img", "l_ci", "l_hf", "l_imp", "l_ent")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch_indices: Sequence[int], losses: dict):
        self.step = step
        self.batch_indices = list(batch_indices)
        self.losses = losses
        super().__init__(f"non-finite loss at step {step}: {losses}; batch indices {self.batch_indices}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 16
    steps: int = 2000
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    balanced_batches: bool = True
    eval_every: int = 0
    loss_weights: dict[str, float] | None = None  # None: unit weights

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be >= 1 and steps >= 0")
        if self.balanced_batches and self.batch % 2:
            raise ValueError("balanced batches need an even batch size")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        unknown = set(self.loss_weights or {}) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss weight keys {sorted(unknown)}")

    def weights(self) -> dict[str, float]:
        w = dict.fromkeys(LOSS_TERMS, 1.0)
        w.update(self.loss_weights or {})
        return w

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class LossBreakdown:
    l_img: torch.Tensor
    l_ci: torch.Tensor
    l_hf: torch.Tensor
    l_imp: torch.Tensor
    l_ent: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def bce_loss(logit, label) -> torch.Tensor:
    """Binary cross entropy on a logit, max(x, 0) - x*y + log(1 + exp(-|x|))."""
    x = logit if torch.is_tensor(logit) else torch.tensor(logit, dtype=torch.float64)
    y = torch.as_tensor(label, dtype=x.dtype)
    return torch.clamp(x, min=0) - x * y + torch.log1p(torch.exp(-x.abs()))


def total_loss(logits: torch.Tensor, labels: torch.Tensor, records: Sequence[GateRecord],
               weights: dict[str, float] | None = None) -> LossBreakdown:
    """Weighted sum of the three per-cue BCE terms (batch means) and the two routing terms."""
    w = dict.fromkeys(LOSS_TERMS, 1.0)
    w.update(weights or {})
    labels = labels.to(logits.dtype)
    per_cue = {cue: bce_loss(logits[..., k], labels).mean() for k, cue in enumerate(CUES)}
    if records:
        l_imp, l_ent = routing_losses(records)
    else:
        l_imp = l_ent = logits.new_zeros(())
    terms = {"l_img": per_cue["img"], "l_ci": per_cue["ci"], "l_hf": per_cue["hf"],
             "l_imp": l_imp, "l_ent": l_ent}
    total = sum(w[k] * v for k, v in terms.items())
    return LossBreakdown(total=total, **terms)


# --- evaluation -----------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_cue: dict[str, float]
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_cue": self.per_cue, "n": self.n}


@torch.no_grad()
def predict_logits(model, data: CueDataset, batch_size: int = 256) -> torch.Tensor:
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        img, hf, ci, _ = data.batch(range(start, min(start + batch_size, len(data))))
        logits, _ = model(img, hf, ci)
        out.append(logits.float())
    if was_training:
        model.train()
    return torch.cat(out)


def evaluate(model, data: CueDataset, threshold: float = 0.5, batch_size: int = 256) -> EvalResult:
    """Accuracy of the min-aggregated decision, plus each cue head alone."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, data, batch_size)
    truth = data.labels > 0.5
    cut = logit_threshold(threshold)  # same rule as aggregate_min, in logit space

    def hits(x):
        return ((x >= cut) == truth).float().mean().item()

    acc = hits(logits.min(dim=-1).values)
    per_cue = {cue: hits(logits[:, k]) for k, cue in enumerate(CUES)}
    return EvalResult(accuracy=acc, per_cue=per_cue, n=len(data))


@torch.no_grad()
def mean_gate_entropy(model, data: CueDataset, batch_size: int = 256) -> float:
    """Held-out routing entropy, averaged over MoEA layers."""
    vals = []
    for start in range(0, len(data), batch_size):
        img, hf, ci, _ = data.batch(range(start, min(start + batch_size, len(data))))
        _, records = model(img, hf, ci)
        vals.append(routing_losses(records)[1].item() * img.shape[0])
    return sum(vals) / len(data)


# --- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)


def _sample_batch(rng: np.random.Generator, labels: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.balanced_batches:
        half = cfg.batch // 2
        real = np.flatnonzero(labels == 1)
        fake = np.flatnonzero(labels == 0)
        if len(real) == 0 or len(fake) == 0:
            raise ValueError("balanced batches need both classes in the dataset")
        return np.concatenate([
            rng.choice(real, half, replace=len(real) < half),
            rng.choice(fake, half, replace=len(fake) < half),
        ])
    return rng.choice(len(labels), cfg.batch, replace=len(labels) < cfg.batch)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    return torch.optim.SGD(params, lr=cfg.lr)


def train(model, data: CueDataset, cfg: TrainConfig, eval_data: CueDataset | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the model's trainable parameters in place; deterministic given cfg.seed."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    labels = data.labels.numpy().round().astype(np.int64)
    params = [p for _, p in model.trainable_parameters()]
    opt = make_optimizer(params, cfg)
    weights = cfg.weights()
    result = TrainResult()
    model.train()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = _sample_batch(rng, labels, cfg)
        img, hf, ci, y = data.batch(idx)
        logits, records = model(img, hf, ci)
        losses = total_loss(logits, y, records, weights)
        floats = losses.as_floats()
        if not all(math.isfinite(v) for v in floats.values()):
            raise NonFiniteLossError(step, idx.tolist(), floats)
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        opt.step()
        model.project_()
        entry = {"step": step, **floats}
        if eval_data is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            entry["eval"] = evaluate(model, eval_data).to_dict()
            model.train()
        result.metrics.append(entry)
        result.timings.append({"step": step, "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)})
        if on_step is not None:
            on_step(entry)
    model.eval()
    return result


# --- gradient checking ----------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    trainable: bool


@dataclass
class GradCheckReport:
    max_rel_error: float
    entries: list[GradCheckEntry]

    @property
    def frozen(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.trainable]

    def to_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error,
                "n_checked": sum(e.trainable for e in self.entries),
                "frozen_checked": len(self.frozen),
                "frozen_grads_zero": all(e.analytic == 0.0 for e in self.frozen),
                "entries": [asdict(e) for e in self.entries]}


@torch.no_grad()
def grad_check_point_(model, seed: int = 0, scale: float = 0.1) -> None:
    """Move a freshly built model to a state where every trainable path carries gradient.

    With w_u = 0 the experts and router receive no gradient at all, so they are
    jittered. Router projections enter only through their direction and are
    redrawn at unit scale, so the fixed finite-difference step stays small
    relative to them. The temperature keeps its initial value.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.trainable_parameters():
        if name.endswith(("w1", "w_e")):
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype))
        elif not name.endswith("tau"):
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def relative_error(a: float, b: float, guard: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), guard)


def grad_check(model, batch: tuple, n_params: int = 20, eps_fd: float = 1e-3, seed: int = 0,
               n_frozen: int = 0, cover_all: bool = True,
               loss_fn: Callable | None = None) -> GradCheckReport:
    """Compare autograd against central differences on sampled scalars.

    Runs on a float64 copy of ``model``. ``batch`` is (img, hf, ci, labels).
    With ``cover_all`` every trainable tensor contributes at least one scalar.
    Frozen scalars (``n_frozen``) are reported with their analytic gradient,
    which must be exactly zero, and are excluded from the maximum.
    """
    if n_params < 1:
        raise ValueError("n_params must be >= 1")
    m = copy.deepcopy(model).double()
    if loss_fn is None:
        if batch is None:
            raise ValueError("grad_check needs a batch or a loss_fn")
        img, hf, ci, y = (t.double() for t in batch)

        def loss_fn(mod):
            logits, records = mod(img, hf, ci)
            return total_loss(logits, y, records).total

    named = dict(m.named_parameters())
    trainable = [(n, p) for n, p in named.items() if p.requires_grad]
    frozen = [(n, p) for n, p in named.items() if not p.requires_grad]
    m.zero_grad(set_to_none=True)
    loss_fn(m).backward()

    rng = np.random.default_rng(seed)

    def sample(pool, k, cover):
        if not pool or k <= 0:
            return []
        sizes = np.array([p.numel() for _, p in pool])
        bounds = np.cumsum(sizes)
        starts = bounds - sizes
        k = min(k, int(bounds[-1]))
        chosen = []
        if cover:  # one scalar from each tensor first
            chosen = [int(starts[i] + rng.integers(s)) for i, s in enumerate(sizes)][:k]
        rest = np.setdiff1d(np.arange(bounds[-1]), chosen)
        chosen += [int(f) for f in rng.choice(rest, size=k - len(chosen), replace=False)]
        out = []
        for f in chosen:
            i = int(np.searchsorted(bounds, f, side="right"))
            out.append((pool[i][0], pool[i][1], f - int(starts[i])))
        return out

    entries = []
    with torch.no_grad():
        for name, p, j in sample(trainable, n_params, cover_all) + sample(frozen, n_frozen, False):
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
            flat = p.data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps_fd
            f_plus = float(loss_fn(m))
            flat[j] = orig - eps_fd
            f_minus = float(loss_fn(m))
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * eps_fd)
            entries.append(GradCheckEntry(name, j, analytic, numeric,
                                          relative_error(analytic, numeric), p.requires_grad))
    worst = max((e.rel_error for e in entries if e.trainable), default=0.0)
    return GradCheckReport(max_rel_error=worst, entries=entries)
