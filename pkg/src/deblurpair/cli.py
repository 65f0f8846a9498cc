"""Command line front end: dataset synthesis, training, inference, and
evaluation as reproducible batch commands.

Exit codes: 0 success, 2 usage or input error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import datagen, imgproc, nets, train as train_mod


def _default_seed() -> int:
    return int(os.environ.get("DEBLURPAIR_SEED", "0"))


def _load_config_values(path) -> dict:
    if path is None:
        return {}
    return train_mod.parse_config_file(path)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    values = _load_config_values(args.config)
    seed = args.seed if args.seed is not None else values.get("seed", _default_seed())
    src = Path(args.src)
    if not src.is_dir():
        print(f"error: source directory {src} does not exist", file=sys.stderr)
        return 2
    records = datagen.build_dataset(
        src, args.out, seed=seed,
        train_fraction=args.train_fraction,
        fscale_range=(args.fscale_min, args.fscale_max),
        sigma_r_range=(args.sigma_r_min, args.sigma_r_max),
        shot_threshold=args.shot_threshold,
    )
    triples = [r for r in records if "error" not in r]
    errors = [r for r in records if "error" in r]
    counts = {"train": 0, "eval": 0}
    for r in triples:
        counts[r["split"]] += 1
    if not triples:
        print("warning: no triples produced (empty or too-short scenes)")
    print(f"train: {counts['train']} triples")
    print(f"eval: {counts['eval']} triples")
    for e in errors:
        print(f"skipped scene {e['scene_id']}: {e['error']}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    values = _load_config_values(args.config)
    overrides = {
        "model": args.model,
        "data_root": args.data,
        "checkpoint_dir": args.out,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "crop": args.crop,
        "seed": args.seed,
        "encoder_depth": args.depth,
        "base_channels": args.base_channels,
    }
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    values.setdefault("seed", _default_seed())
    if args.no_flip:
        values["flip_augment"] = False
    try:
        config = train_mod.config_from_values(values)
    except (TypeError, ValueError) as e:
        print(f"error: bad configuration: {e}", file=sys.stderr)
        return 2
    if not Path(config.data_root, "manifest.jsonl").exists():
        print(f"error: no manifest.jsonl under {config.data_root}", file=sys.stderr)
        return 2
    try:
        final = train_mod.train(config)
    except train_mod.DivergedTrainingError as e:
        last = e.last_checkpoint or "none"
        print(f"error: training diverged ({e}); last good checkpoint: {last}",
              file=sys.stderr)
        return 3
    print(f"final checkpoint: {final}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _pad_to_divisor(x: torch.Tensor, divisor: int) -> tuple[torch.Tensor, int, int]:
    h, w = x.shape[-2:]
    ph = (divisor - h % divisor) % divisor
    pw = (divisor - w % divisor) % divisor
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode=mode)
    return x, h, w


def _forward_cropped(model, divisor, tn, tb) -> torch.Tensor:
    h, w = tn.shape[-2:]
    tn, _, _ = _pad_to_divisor(tn, divisor)
    tb, _, _ = _pad_to_divisor(tb, divisor)
    out = nets.generator_output(model, tn, tb)
    return out[:, :, :h, :w]


def _tile_starts(size: int, tile: int, step: int) -> list[int]:
    if size <= tile:
        return [0]
    starts = []
    s = 0
    while True:
        starts.append(min(s, size - tile))
        if s + tile >= size:
            break
        s += step
    return starts


def run_inference(model: torch.nn.Module, divisor: int, noisy: np.ndarray,
                  blurry: np.ndarray, tile: int = 0,
                  overlap: int = 32) -> tuple[np.ndarray, float]:
    """Exposure-correct, pad, run the generator, crop back; returns the
    restored image and the forward-pass time in milliseconds.

    tile > 0 processes the image in overlapping tiles for memory-limited
    hosts; each tile contributes its 32-pixel-trimmed interior.
    """
    ratio = datagen.estimate_exposure_ratio(noisy, blurry)
    noisy = imgproc.scale_exposure(noisy, ratio)
    tn = train_mod._to_tensor(noisy).unsqueeze(0)
    tb = train_mod._to_tensor(blurry).unsqueeze(0)
    h, w = tn.shape[-2:]
    model.eval()
    start = time.perf_counter()
    with torch.no_grad():
        if tile and (h > tile or w > tile):
            if tile <= 2 * overlap:
                raise ValueError(f"tile size must exceed {2 * overlap}")
            out = torch.zeros_like(tn)
            step = tile - 2 * overlap
            for y0 in _tile_starts(h, tile, step):
                for x0 in _tile_starts(w, tile, step):
                    y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
                    piece = _forward_cropped(
                        model, divisor,
                        tn[:, :, y0:y1, x0:x1], tb[:, :, y0:y1, x0:x1],
                    )
                    wy0 = y0 + overlap if y0 > 0 else 0
                    wy1 = y1 - overlap if y1 < h else h
                    wx0 = x0 + overlap if x0 > 0 else 0
                    wx1 = x1 - overlap if x1 < w else w
                    out[:, :, wy0:wy1, wx0:wx1] = piece[
                        :, :, wy0 - y0 : wy1 - y0, wx0 - x0 : wx1 - x0
                    ]
        else:
            out = _forward_cropped(model, divisor, tn, tb)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    image = out[0].permute(1, 2, 0).numpy().astype(np.float64)
    return image, elapsed_ms


def cmd_infer(args) -> int:
    for name in ("ckpt", "noisy", "blurry"):
        if not Path(getattr(args, name)).exists():
            print(f"error: {name} file {getattr(args, name)} not found", file=sys.stderr)
            return 2
    try:
        state = train_mod.load_checkpoint(args.ckpt)
    except train_mod.UnsupportedCheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    noisy = imgproc.load_png(args.noisy)
    blurry = imgproc.load_png(args.blurry)
    if noisy.shape != blurry.shape:
        print(
            f"error: image shapes differ: {noisy.shape} vs {blurry.shape}",
            file=sys.stderr,
        )
        return 2
    out, ms = run_inference(state.model, state.config.net.size_divisor, noisy,
                            blurry, tile=args.tile)
    imgproc.save_png(args.out, out)
    print(f"inference: {ms:.1f} ms")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _metric_entry(ident: str, pred: np.ndarray, gt: np.ndarray, ms: float) -> dict:
    p = imgproc.psnr(pred, gt)
    return {
        "id": ident,
        "psnr_db": "inf" if math.isinf(p) else p,
        "ssim": imgproc.ssim(pred, gt),
        "inference_ms": ms,
    }


def _aggregate(per_image: list[dict]) -> dict:
    psnrs = [math.inf if e["psnr_db"] == "inf" else e["psnr_db"] for e in per_image]
    mean_psnr = sum(psnrs) / len(psnrs)
    return {
        "mean_psnr_db": "inf" if math.isinf(mean_psnr) else mean_psnr,
        "mean_ssim": sum(e["ssim"] for e in per_image) / len(per_image),
        "mean_inference_ms": sum(e["inference_ms"] for e in per_image) / len(per_image),
        "count": len(per_image),
    }


def _print_report(aggregate: dict) -> None:
    cols = ["count", "mean_psnr_db", "mean_ssim", "mean_inference_ms"]
    values = []
    for c in cols:
        v = aggregate[c]
        values.append(f"{v:.4f}" if isinstance(v, float) else str(v))
    width = max(len(s) for s in cols + values) + 2
    print("".join(c.rjust(width) for c in cols))
    print("".join(v.rjust(width) for v in values))


def cmd_eval(args) -> int:
    per_image = []
    if args.pred is not None:
        if args.gt is None:
            print("error: --gt is required with --pred", file=sys.stderr)
            return 2
        pred_dir, gt_dir = Path(args.pred), Path(args.gt)
        pred_files = {p.stem: p for p in pred_dir.glob("*.png")}
        gt_files = {p.stem: p for p in gt_dir.glob("*.png")}
        common = sorted(pred_files.keys() & gt_files.keys())
        unmatched = sorted(pred_files.keys() ^ gt_files.keys())
        if unmatched:
            for name in unmatched:
                print(f"unmatched: {name}", file=sys.stderr)
        if not common:
            print("error: no matching prediction/ground-truth pairs", file=sys.stderr)
            return 2
        if unmatched:
            return 2
        for stem in common:
            pred = imgproc.load_png(pred_files[stem])
            gt = imgproc.load_png(gt_files[stem])
            if pred.shape != gt.shape:
                print(f"error: shape mismatch for {stem}", file=sys.stderr)
                return 2
            per_image.append(_metric_entry(stem, pred, gt, 0.0))
    else:
        if args.ckpt is None or args.data is None:
            print("error: provide either --pred or both --ckpt and --data",
                  file=sys.stderr)
            return 2
        try:
            state = train_mod.load_checkpoint(args.ckpt)
        except train_mod.UnsupportedCheckpointError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        data_root = Path(args.data)
        records = [
            r for r in datagen.read_manifest(data_root / "manifest.jsonl")
            if "error" not in r and r["split"] == "eval"
        ]
        if not records:
            print("error: no eval triples in manifest", file=sys.stderr)
            return 2
        divisor = state.config.net.size_divisor
        for rec in records:
            triple = datagen.load_triple(data_root, rec)
            out, ms = run_inference(state.model, divisor, triple.noisy, triple.blurry)
            ident = f"{rec['scene_id']}_{rec['index']}"
            per_image.append(_metric_entry(ident, out, triple.sharp, ms))

    report = {"per_image": per_image, "aggregate": _aggregate(per_image)}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    _print_report(report["aggregate"])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deblurpair",
        description="Sharp image restoration from noisy/blurry burst pairs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize a triple dataset from burst scenes")
    p_synth.add_argument("--src", required=True, help="directory of per-scene frame folders")
    p_synth.add_argument("--out", required=True, help="output dataset root")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--fscale-min", type=float, default=datagen.FSCALE_RANGE[0])
    p_synth.add_argument("--fscale-max", type=float, default=datagen.FSCALE_RANGE[1])
    p_synth.add_argument("--sigma-r-min", type=float, default=datagen.SIGMA_R_RANGE[0])
    p_synth.add_argument("--sigma-r-max", type=float, default=datagen.SIGMA_R_RANGE[1])
    p_synth.add_argument("--shot-threshold", type=float, default=datagen.SHOT_THRESHOLD)
    p_synth.add_argument("--train-fraction", type=float, default=0.64)
    p_synth.add_argument("--config", default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a fusion model on a synthesized dataset")
    p_train.add_argument("--data", default=None, help="dataset root with manifest.jsonl")
    p_train.add_argument("--out", default=None, help="checkpoint directory")
    p_train.add_argument("--model", choices=("rnn", "merger"), default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--crop", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--depth", type=int, default=None)
    p_train.add_argument("--base-channels", type=int, default=None)
    p_train.add_argument("--no-flip", action="store_true")
    p_train.add_argument("--config", default=None)
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="restore one image from a noisy/blurry pair")
    p_infer.add_argument("--ckpt", required=True)
    p_infer.add_argument("--noisy", required=True)
    p_infer.add_argument("--blurry", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.add_argument("--tile", type=int, default=0,
                         help="tile size for memory-limited inference (0 = whole image)")
    p_infer.add_argument("--config", default=None)
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="PSNR/SSIM report for predictions or a checkpoint")
    p_eval.add_argument("--pred", default=None, help="directory of predicted PNGs")
    p_eval.add_argument("--ckpt", default=None, help="checkpoint to run on --data")
    p_eval.add_argument("--data", default=None, help="dataset root (eval split)")
    p_eval.add_argument("--gt", default=None, help="directory of ground-truth PNGs")
    p_eval.add_argument("--report", default=None, help="where to write the JSON report")
    p_eval.add_argument("--config", default=None)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
