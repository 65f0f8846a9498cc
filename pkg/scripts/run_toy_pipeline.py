#!/usr/bin/env python3
"""End-to-end desk-scale demo: synthesize a toy dataset, train a small
fusion model, restore one eval pair, and print the evaluation report.

Everything runs through the `deblurpair` CLI, so this doubles as a smoke
test of the packaged workflow:

    python scripts/run_toy_pipeline.py --workdir /tmp/deblurpair-demo
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from deblurpair import cli, datagen, imgproc


def make_toy_scenes(root: Path, n_scenes: int, seed: int, size: int = 64) -> Path:
    """Bursts of moving rectangles over a gradient background."""
    rng = np.random.default_rng(seed)
    for i in range(n_scenes):
        scene = root / f"scene{i:03d}"
        scene.mkdir(parents=True, exist_ok=True)
        yy, xx = np.mgrid[0:size, 0:size]
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx / size + np.sin(angle) * yy / size + 1) / 2
        base = rng.uniform(0.25, 0.65, size=3)
        background = np.clip(base + 0.25 * (ramp[:, :, None] - 0.5), 0.05, 0.95)
        shapes = [
            dict(cy=rng.uniform(10, size - 10), cx=rng.uniform(10, size - 10),
                 hh=rng.uniform(3, 9), hw=rng.uniform(3, 9),
                 vy=rng.uniform(-1, 1), vx=rng.choice([-1, 1]) * rng.uniform(0.4, 1.2),
                 color=rng.uniform(0.05, 0.95, size=3))
            for _ in range(rng.integers(3, 6))
        ]
        for t in range(13):
            img = background.copy()
            for s in shapes:
                y0 = int(round(s["cy"] + t * s["vy"] - s["hh"]))
                y1 = int(round(s["cy"] + t * s["vy"] + s["hh"]))
                x0 = int(round(s["cx"] + t * s["vx"] - s["hw"]))
                x1 = int(round(s["cx"] + t * s["vx"] + s["hw"]))
                img[max(0, y0):max(0, y1), max(0, x0):max(0, x1)] = s["color"]
            imgproc.save_png(scene / f"{t:04d}.png", img)
    return root


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--scenes", type=int, default=24)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    work = Path(args.workdir)
    scenes = work / "scenes"
    dataset = work / "dataset"
    ckpts = work / "checkpoints"

    print(f"[1/4] writing {args.scenes} toy burst scenes")
    make_toy_scenes(scenes, args.scenes, seed=args.seed)

    print("[2/4] synthesizing noisy/blurry/sharp triples")
    rc = cli.main(["synth", "--src", str(scenes), "--out", str(dataset),
                   "--seed", str(args.seed), "--train-fraction", "0.7"])
    if rc:
        return rc

    print(f"[3/4] training DeblurRNN for {args.epochs} epochs")
    cfg = work / "train.cfg"
    cfg.write_text(
        "crop = 64\n"
        "batch_size = 2\n"
        "encoder_depth = 3\n"
        "base_channels = 12\n"
        "dropout_rate = 0.0\n"
        "dc_patch = 7\n"
        "lambda_grad = 10\n"   # toy-scale balance; see README
        "lambda_dc = 10\n"
    )
    rc = cli.main(["train", "--model", "rnn", "--data", str(dataset),
                   "--out", str(ckpts), "--epochs", str(args.epochs),
                   "--seed", str(args.seed), "--config", str(cfg)])
    if rc:
        return rc
    final = ckpts / (ckpts / "latest").read_text().strip()

    print("[4/4] restoring one eval pair and scoring the eval split")
    eval_recs = [
        r for r in datagen.read_manifest(dataset / "manifest.jsonl")
        if "error" not in r and r["split"] == "eval"
    ]
    sample = eval_recs[0]
    rc = cli.main([
        "infer", "--ckpt", str(final),
        "--noisy", str(dataset / sample["paths"]["noisy"]),
        "--blurry", str(dataset / sample["paths"]["blurry"]),
        "--out", str(work / "restored.png"),
    ])
    if rc:
        return rc
    print(f"restored image written to {work / 'restored.png'}")
    return cli.main(["eval", "--ckpt", str(final), "--data", str(dataset),
                     "--report", str(work / "report.json")])


if __name__ == "__main__":
    sys.exit(main())
