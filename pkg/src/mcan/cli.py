"""Command-line entry point.

stdout carries JSON only; progress and diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .backbone import MCAN, aggregate_min, forward_multicue
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .corpus import build_cue_dataset, generate_corpus, load_image_folder
from .cues import DEFAULT_EPS, extract_cues
from .image_core import ImageError, load_image, resize_bilinear, save_image
from .training import NonFiniteLossError, evaluate, grad_check, grad_check_point_, train

log = logging.getLogger("mcan")

GRAD_CHECK_PRESET = {
    "backbone": {"img_size": 8, "patch_size": 4, "d": 8, "depth": 2, "heads": 2, "n_experts": 3, "router_dim": 4},
    "corpus": {"img_size": 8, "n_per_class": 4},
}


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _configure_threads() -> None:
    cap = os.environ.get("MCF_THREADS")
    if cap:
        n = int(cap)
        if n < 1:
            raise ValueError("MCF_THREADS must be a positive integer")
        torch.set_num_threads(n)


def _experiment(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def _dataset_for(cfg: ExperimentConfig, data_dir: str | None, split: str = "holdout"):
    if data_dir:
        corpus = load_image_folder(data_dir, cfg.backbone.img_size)
    else:
        corpus = generate_corpus(cfg.holdout_spec() if split == "holdout" else cfg.corpus)
    return build_cue_dataset(corpus, cfg.eps)


def _model_experiment(meta: dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict(meta.get("experiment", {}))


# --- subcommands ---------------------------------------------------------------

def cmd_gen_corpus(args) -> dict:
    cfg = _experiment(args)
    spec = cfg.holdout_spec() if args.split == "holdout" else cfg.corpus
    corpus = generate_corpus(spec)
    out = Path(args.output_dir)
    counts = {"real": 0, "fake": 0}
    for sub in counts:
        (out / sub).mkdir(parents=True, exist_ok=True)
    for img, label in zip(corpus.images, corpus.labels):
        sub = "real" if label == 1 else "fake"
        save_image(img.astype(np.float64), out / sub / f"{counts[sub]:05d}.{args.format}")
        counts[sub] += 1
    (out / "corpus.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"output_dir": str(out), "counts": counts, "spec": spec.to_dict()}


def cmd_extract_cues(args) -> dict:
    src, out = Path(args.input), Path(args.output_dir)
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in (".png", ".ppm") and p.is_file())
    if not files:
        raise FileNotFoundError(f"{src}: no PNG/PPM images found")
    written = []
    for f in files:
        rel = f.relative_to(src)
        bundle = extract_cues(load_image(f), args.eps)
        target = out / rel.with_suffix(".cues")
        target.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save_tensors(target, {"img": bundle.img, "hf": bundle.hf, "ci": bundle.ci},
                                meta={"source": str(rel), "eps": args.eps})
        if args.viz:
            for name in ("hf", "ci"):
                save_image(getattr(bundle, name), target.with_name(f"{rel.stem}_{name}.png"))
        written.append(str(target))
        log.info("cues: %s", rel)
    return {"count": len(written), "files": written}


def cmd_train(args) -> dict:
    cfg = _experiment(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("building corpus")
    data = _dataset_for(cfg, args.data, split="train")
    holdout = _dataset_for(cfg, args.holdout_data, split="holdout")
    model = MCAN(cfg.backbone)

    def progress(entry):
        if entry["step"] % 100 == 0:
            log.info("step %d total %.4f", entry["step"], entry["total"])

    try:
        result = train(model, data, cfg.train, eval_data=holdout, on_step=progress)
    except NonFiniteLossError as exc:
        dump = {"step": exc.step, "batch_indices": exc.batch_indices, "losses": exc.losses}
        (out / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
        raise
    final = evaluate(model, holdout)
    ckpt = out / "model.ckpt"
    checkpoint.save_model(model, ckpt, meta={"experiment": cfg.to_dict(), "holdout": final.to_dict()})
    _write_jsonl(out / "metrics.jsonl", result.metrics)
    _write_jsonl(out / "timing.jsonl", result.timings)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"checkpoint": str(ckpt), "steps": cfg.train.steps, "holdout": final.to_dict(),
            "final_loss": result.metrics[-1] if result.metrics else None}


def cmd_eval(args) -> dict:
    model, meta = checkpoint.load_model(args.model)
    cfg = _model_experiment(meta)
    if args.config or args.set:
        cfg = ExperimentConfig.from_dict(apply_overrides(
            json.loads(Path(args.config).read_text()) if args.config else cfg.to_dict(), args.set))
    data = _dataset_for(cfg, args.data, split="holdout")
    return evaluate(model, data, threshold=args.threshold).to_dict()


def cmd_infer(args) -> dict:
    model, meta = checkpoint.load_model(args.model)
    eps = _model_experiment(meta).eps
    img = load_image(args.image)
    size = model.cfg.img_size
    if img.shape[:2] != (size, size):
        img = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
    model.eval()
    with torch.no_grad():
        logits, _ = forward_multicue(model, extract_cues(img, eps))
    decision = aggregate_min(logits, args.threshold)
    return {"score": decision.score, "decision": decision.label, "per_cue": decision.per_cue,
            "logits": dict(zip(("img", "hf", "ci"), logits.as_list()))}


def cmd_inspect_router(args) -> list[dict]:
    model, meta = checkpoint.load_model(args.model)
    cfg = _model_experiment(meta)
    data = _dataset_for(cfg, args.data, split="holdout")
    if args.limit:
        data = data.subset(range(min(args.limit, len(data))))
    sums: dict[tuple[int, str], torch.Tensor] = {}
    hist: dict[tuple[int, str], torch.Tensor] = {}
    counts: dict[tuple[int, str], int] = {}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(data), 256):
            img, hf, ci, _ = data.batch(range(start, min(start + 256, len(data))))
            _, records = model(img, hf, ci)
            for r in records:
                key = (r.layer_index, r.cue)
                g = r.gates.reshape(-1, r.gates.shape[-1]).double()
                sums[key] = sums.get(key, 0) + g.sum(0)
                hist[key] = hist.get(key, 0) + torch.bincount(g.argmax(-1), minlength=g.shape[-1])
                counts[key] = counts.get(key, 0) + g.shape[0]
    return [{"layer": layer, "cue": cue, "tokens": counts[(layer, cue)],
             "mean_gate": (sums[(layer, cue)] / counts[(layer, cue)]).tolist(),
             "argmax_hist": hist[(layer, cue)].tolist()}
            for layer, cue in sorted(sums)]


def cmd_grad_check(args) -> dict:
    raw = GRAD_CHECK_PRESET if args.config is None else json.loads(Path(args.config).read_text())
    cfg = ExperimentConfig.from_dict(apply_overrides(raw, args.set))
    model = MCAN(cfg.backbone)
    if args.perturb > 0:
        grad_check_point_(model, seed=args.seed, scale=args.perturb)
    data = build_cue_dataset(generate_corpus(cfg.corpus), cfg.eps)
    batch = data.batch(range(min(args.batch, len(data))))
    report = grad_check(model, batch, n_params=args.n_params, eps_fd=args.eps_fd, seed=args.seed,
                        n_frozen=args.n_frozen)
    out = report.to_dict()
    out["passed"] = report.max_rel_error < args.tolerance and out["frozen_grads_zero"]
    return out


# --- parser ----------------------------------------------------------------------

def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (sections: backbone, corpus, train)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.lr=1e-3 (applied after --config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcan", description="Multi-cue AI-generated image detector (toy scale).")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic real/fake corpus as images")
    _add_config(p)
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--split", choices=("train", "holdout"), default="train")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("extract-cues", help="compute img/hf/ci cue tensors for a folder of images")
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--viz", action="store_true", help="also write PNG renderings of the hf and ci cues")
    p.set_defaults(func=cmd_extract_cues)

    p = sub.add_parser("train", help="train adapters and heads; writes model.ckpt and metrics.jsonl")
    _add_config(p)
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--data", help="folder with real/ and fake/ subfolders (default: synthetic corpus)")
    p.add_argument("--holdout-data", help="held-out folder (default: synthetic hold-out corpus)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    _add_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="folder with real/ and fake/ (default: the checkpoint's hold-out corpus)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect-router", help="per-layer gate statistics as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--limit", type=int, default=0, help="use at most this many samples (0: all)")
    p.set_defaults(func=cmd_inspect_router)

    p = sub.add_parser("grad-check", help="autograd vs central differences on sampled parameters")
    _add_config(p)
    p.add_argument("--n-params", type=int, default=20)
    p.add_argument("--n-frozen", type=int, default=5)
    p.add_argument("--eps-fd", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--perturb", type=float, default=0.1,
                   help="jitter for adapters and heads before checking (0: check the model as built)")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        _configure_threads()
        result = args.func(args)
    except (ConfigError, ImageError, checkpoint.CheckpointError, FileNotFoundError,
            NonFiniteLossError, ValueError) as exc:
        print(f"mcan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, list):
        for row in result:
            _emit(row)
    else:
        _emit(result)
    if args.command == "grad-check" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
