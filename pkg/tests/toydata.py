"""Tiny synthetic burst scenes for tests: moving shapes over a gradient.

The scenes form a consistent, learnable family so that small models trained
on a handful of them generalize to held-out scenes drawn the same way.
"""

from pathlib import Path

import numpy as np

from deblurpair import imgproc


def _gradient_background(rng, h, w):
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h + 1) / 2
    base = rng.uniform(0.25, 0.65, size=3)
    span = rng.uniform(0.15, 0.3)
    return np.clip(base[None, None, :] + span * (ramp[:, :, None] - 0.5), 0.05, 0.95)


def _draw_rect(img, cy, cx, hh, hw, color):
    h, w, _ = img.shape
    y0, y1 = max(0, int(round(cy - hh))), min(h, int(round(cy + hh)))
    x0, x1 = max(0, int(round(cx - hw))), min(w, int(round(cx + hw)))
    if y0 < y1 and x0 < x1:
        img[y0:y1, x0:x1, :] = color


def make_scene_frames(rng: np.random.Generator, n_frames: int, h: int = 64, w: int = 64):
    """Frames of one burst: static gradient, moving high-contrast rectangles."""
    background = _gradient_background(rng, h, w)
    n_shapes = int(rng.integers(3, 6))
    shapes = []
    for _ in range(n_shapes):
        shapes.append(
            {
                "cy": rng.uniform(0.15 * h, 0.85 * h),
                "cx": rng.uniform(0.15 * w, 0.85 * w),
                "hh": rng.uniform(3, 9),
                "hw": rng.uniform(3, 9),
                "vy": rng.uniform(-1.0, 1.0),
                "vx": rng.choice([-1, 1]) * rng.uniform(0.4, 1.2),
                "color": rng.uniform(0.05, 0.95, size=3),
            }
        )
    frames = []
    for t in range(n_frames):
        img = background.copy()
        for s in shapes:
            _draw_rect(img, s["cy"] + t * s["vy"], s["cx"] + t * s["vx"], s["hh"], s["hw"], s["color"])
        frames.append(img)
    return frames


def quantize8(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid exactly as PNG storage would."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def make_triples(n: int, seed: int, h: int = 64, w: int = 64):
    """In-memory triples from toy scenes, frames quantized like PNG files.

    Quantization matters: the shot-noise scale counts unique intensities,
    which would be inflated by continuous-valued frames.
    """
    from deblurpair import datagen

    rng = np.random.default_rng(seed)
    triples = []
    for k in range(n):
        frames = [quantize8(f) for f in make_scene_frames(rng, 13, h, w)]
        seq = datagen.BurstSequence(frames=frames, scene_id=f"s{k}")
        params = datagen.SynthParams(
            f_scale=float(rng.uniform(0.3, 0.8)),
            sigma_r=float(rng.uniform(0.05, 0.1)),
            n_frames_averaged=11,
            rng_seed=int(rng.integers(2**31)),
        )
        triples.append(datagen.make_triple(seq, params, np.random.default_rng(params.rng_seed)))
    return triples


def write_burst_tree(root, n_scenes: int, seed: int, h: int = 64, w: int = 64,
                     frames_range: tuple[int, int] = (13, 16)) -> Path:
    """Write <root>/<scene>/<frame>.png burst directories; returns root."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(n_scenes):
        scene_dir = root / f"scene{i:03d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        n_frames = int(rng.integers(frames_range[0], frames_range[1] + 1))
        for k, frame in enumerate(make_scene_frames(rng, n_frames, h, w)):
            imgproc.save_png(scene_dir / f"{k:04d}.png", frame)
    return root
