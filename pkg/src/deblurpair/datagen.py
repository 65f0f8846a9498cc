"""Synthesis of noisy/blurry/sharp training triples from sharp burst frames.

A burst of consecutively captured sharp frames turns into one sample: the
first frame is the ground truth, the second is dropped to mimic the shutter
lag between the two captures, and the remaining frames are averaged into
the blurry image.  The noisy image is the ground truth after exposure
scaling plus shot noise (Poisson, low light) or readout noise (Gaussian).

All randomness flows from explicit numpy Generators so dataset builds are
reproducible byte for byte.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imgproc

MEAN_EPS = 1e-6

# canonical sampling intervals for synthesis parameters
FSCALE_RANGE = (0.3, 0.8)
SIGMA_R_RANGE = (0.05, 0.1)
SHOT_THRESHOLD = 0.5
WINDOW_RANGE = (9, 13)


@dataclass(frozen=True)
class SynthParams:
    """Parameters that produced one triple; enough to replay the synthesis."""

    f_scale: float
    sigma_r: float
    n_frames_averaged: int
    rng_seed: int
    shot_threshold: float = SHOT_THRESHOLD

    def __post_init__(self):
        if self.f_scale <= 0:
            raise ValueError(f"f_scale must be positive, got {self.f_scale}")
        if self.sigma_r < 0:
            raise ValueError(f"sigma_r must be nonnegative, got {self.sigma_r}")
        if self.n_frames_averaged < 1:
            raise ValueError("n_frames_averaged must be at least 1")


@dataclass
class BurstSequence:
    """Ordered sharp frames of one scene, all with identical dimensions."""

    frames: list[np.ndarray]
    scene_id: str

    def __post_init__(self):
        if len(self.frames) < 4:
            raise ValueError(
                f"burst needs at least 4 frames, got {len(self.frames)}"
            )
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(
                    f"frame {i} has shape {f.shape}, expected {shape}"
                )


@dataclass
class ImageTriple:
    noisy: np.ndarray
    blurry: np.ndarray
    sharp: np.ndarray
    params: SynthParams
    scene_id: str
    index: int


def synth_blurry(frames: list[np.ndarray], sigma_r: float, rng: np.random.Generator) -> np.ndarray:
    """Average the frames and add readout noise of variance sigma_r^2 / N."""
    if len(frames) == 0:
        raise ValueError("cannot average an empty frame list")
    mean = np.mean(np.stack(frames, axis=0), axis=0)
    if sigma_r > 0:
        mean = mean + rng.normal(0.0, sigma_r / np.sqrt(len(frames)), size=mean.shape)
    return np.clip(mean, 0.0, 1.0)


def count_unique_intensities(image: np.ndarray) -> int:
    """Number of distinct values over all pixels and channels."""
    return int(np.unique(image).size)


def synth_noisy(sharp: np.ndarray, params: SynthParams, rng: np.random.Generator) -> np.ndarray:
    """Exposure-scale the sharp image and corrupt it with sensor noise.

    Below the shot-noise threshold the image is dark and shot noise
    dominates: each pixel becomes Poisson(s * I) / s where s counts the
    unique intensities of the scaled image.  Otherwise Gaussian readout
    noise of standard deviation sigma_r is added.
    """
    scaled = imgproc.scale_exposure(sharp, params.f_scale)
    if params.f_scale < params.shot_threshold:
        sigma_s = count_unique_intensities(scaled)
        noisy = rng.poisson(sigma_s * scaled) / sigma_s
    else:
        noisy = scaled + rng.normal(0.0, params.sigma_r, size=scaled.shape)
    return np.clip(noisy, 0.0, 1.0)


def make_triple(seq: BurstSequence, params: SynthParams, rng: np.random.Generator) -> ImageTriple:
    """One sample from a burst: sharp = frame 0, frame 1 dropped, rest averaged."""
    if len(seq.frames) < 4:
        raise ValueError(f"burst needs at least 4 frames, got {len(seq.frames)}")
    params = replace(params, n_frames_averaged=len(seq.frames) - 2)
    sharp = np.asarray(seq.frames[0], dtype=np.float64)
    noisy = synth_noisy(sharp, params, rng)
    blurry = synth_blurry(seq.frames[2:], params.sigma_r, rng)
    return ImageTriple(
        noisy=noisy, blurry=blurry, sharp=sharp,
        params=params, scene_id=seq.scene_id, index=0,
    )


def estimate_exposure_ratio(noisy: np.ndarray, blurry: np.ndarray) -> float:
    """Brightness ratio used to pre-scale the noisy input before fusion."""
    if noisy.shape != blurry.shape:
        raise ValueError(f"shape mismatch: {noisy.shape} vs {blurry.shape}")
    return float(np.mean(blurry)) / max(float(np.mean(noisy)), MEAN_EPS)


def random_crop_triple(triple: ImageTriple, size: int, rng: np.random.Generator) -> ImageTriple:
    """Crop the same window out of all three images; offset uniform."""
    h, w = triple.sharp.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return ImageTriple(
        noisy=triple.noisy[y : y + size, x : x + size],
        blurry=triple.blurry[y : y + size, x : x + size],
        sharp=triple.sharp[y : y + size, x : x + size],
        params=triple.params,
        scene_id=triple.scene_id,
        index=triple.index,
    )


# ---------------------------------------------------------------------------
# dataset builder
# ---------------------------------------------------------------------------

def _scene_rng(seed: int, scene_id: str) -> np.random.Generator:
    # child stream keyed on (seed, scene_id) so scenes can be synthesized
    # in any order, or in parallel, with identical results
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(scene_id.encode("utf-8"))])
    )


def _sorted_frame_files(scene_dir: Path) -> list[Path]:
    files = [p for p in scene_dir.iterdir() if p.suffix.lower() == ".png"]

    def key(p: Path):
        stem = p.stem
        return (0, int(stem), "") if stem.isdigit() else (1, 0, stem)

    return sorted(files, key=key)


def _plan_scene(
    scene_dir: Path,
    seed: int,
    fscale_range: tuple[float, float],
    sigma_r_range: tuple[float, float],
    shot_threshold: float,
) -> tuple[list[dict], str | None]:
    """Window positions and per-set synthesis parameters for one scene."""
    scene_id = scene_dir.name
    rng = _scene_rng(seed, scene_id)
    try:
        files = _sorted_frame_files(scene_dir)
    except OSError as e:
        return [], f"unreadable scene directory: {e}"
    sets = []
    pos = 0
    index = 0
    lo, hi = WINDOW_RANGE
    while True:
        length = int(rng.integers(lo, hi + 1))
        if pos + length > len(files):
            break
        sets.append(
            {
                "scene_id": scene_id,
                "index": index,
                "files": files[pos : pos + length],
                "f_scale": float(rng.uniform(*fscale_range)),
                "sigma_r": float(rng.uniform(*sigma_r_range)),
                "shot_threshold": shot_threshold,
                "rng_seed": int(rng.integers(0, 2**31)),
            }
        )
        pos += length
        index += 1
    return sets, None


def build_dataset(
    src_root,
    out_root,
    seed: int,
    train_fraction: float = 0.64,
    fscale_range: tuple[float, float] = FSCALE_RANGE,
    sigma_r_range: tuple[float, float] = SIGMA_R_RANGE,
    shot_threshold: float = SHOT_THRESHOLD,
) -> list[dict]:
    """Synthesize the triple dataset and write it under out_root.

    Scenes are assigned wholly to the train or eval split (no scene ever
    contributes to both), targeting train_fraction of the total triples.
    Returns the manifest records, also written newline-delimited to
    out_root/manifest.jsonl.
    """
    src_root = Path(src_root)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    scene_dirs = sorted(
        (p for p in src_root.iterdir() if p.is_dir()), key=lambda p: p.name
    ) if src_root.is_dir() else []

    plans: dict[str, list[dict]] = {}
    errors: dict[str, str] = {}
    for scene_dir in scene_dirs:
        sets, err = _plan_scene(scene_dir, seed, fscale_range, sigma_r_range, shot_threshold)
        if err is not None:
            errors[scene_dir.name] = err
        else:
            plans[scene_dir.name] = sets

    total = sum(len(s) for s in plans.values())
    target_train = train_fraction * total
    order = sorted(plans.keys())
    np.random.default_rng(np.random.SeedSequence([seed, 0x5B71])).shuffle(order)
    train_scenes = set()
    running = 0
    for scene_id in order:
        if running < target_train:
            train_scenes.add(scene_id)
            running += len(plans[scene_id])

    records: list[dict] = []
    for scene_id in sorted(plans.keys()):
        split = "train" if scene_id in train_scenes else "eval"
        scene_records = []
        try:
            for planned in plans[scene_id]:
                frames = [imgproc.load_png(p) for p in planned["files"]]
                seq = BurstSequence(frames=frames, scene_id=scene_id)
                params = SynthParams(
                    f_scale=planned["f_scale"],
                    sigma_r=planned["sigma_r"],
                    n_frames_averaged=len(frames) - 2,
                    rng_seed=planned["rng_seed"],
                    shot_threshold=planned["shot_threshold"],
                )
                triple = make_triple(seq, params, np.random.default_rng(params.rng_seed))
                triple.index = planned["index"]
                rel = Path(split) / f"{scene_id}_{triple.index}"
                triple_dir = out_root / rel
                triple_dir.mkdir(parents=True, exist_ok=True)
                paths = {}
                for name, img in (("noisy", triple.noisy), ("blurry", triple.blurry), ("sharp", triple.sharp)):
                    imgproc.save_png(triple_dir / f"{name}.png", img)
                    paths[name] = str(rel / f"{name}.png")
                scene_records.append(
                    {
                        "scene_id": scene_id,
                        "index": triple.index,
                        "split": split,
                        "f_scale": params.f_scale,
                        "sigma_r": params.sigma_r,
                        "shot_threshold": params.shot_threshold,
                        "n_frames_averaged": params.n_frames_averaged,
                        "rng_seed": params.rng_seed,
                        "paths": paths,
                    }
                )
        except (OSError, ValueError) as e:
            errors[scene_id] = str(e)
            continue
        records.extend(scene_records)

    for scene_id in sorted(errors.keys()):
        records.append({"scene_id": scene_id, "error": errors[scene_id]})

    with open(out_root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def read_manifest(path) -> list[dict]:
    """Parse a newline-delimited manifest; error records are kept as-is."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_triple(out_root, record: dict) -> ImageTriple:
    """Load one manifest record back into an in-memory triple."""
    out_root = Path(out_root)
    params = SynthParams(
        f_scale=record["f_scale"],
        sigma_r=record["sigma_r"],
        n_frames_averaged=record["n_frames_averaged"],
        rng_seed=record["rng_seed"],
        shot_threshold=record["shot_threshold"],
    )
    return ImageTriple(
        noisy=imgproc.load_png(out_root / record["paths"]["noisy"]),
        blurry=imgproc.load_png(out_root / record["paths"]["blurry"]),
        sharp=imgproc.load_png(out_root / record["paths"]["sharp"]),
        params=params,
        scene_id=record["scene_id"],
        index=record["index"],
    )
