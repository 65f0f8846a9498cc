#!/usr/bin/env python3
"""Monte Carlo check of the sensor noise models against their theory.

Prints the shot-noise (Poisson) mean/variance and the readout-noise
(Gaussian) variance of synthesized images next to their predicted values:

    python scripts/noise_model_stats.py --draws 10000
"""

import argparse

import numpy as np

from deblurpair import datagen, imgproc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    sharp = rng.integers(20, 220, size=(16, 16, 3)) / 255.0

    params = datagen.SynthParams(
        f_scale=0.4, sigma_r=0.08, n_frames_averaged=10, rng_seed=args.seed
    )
    scaled = imgproc.scale_exposure(sharp, params.f_scale)
    sigma_s = datagen.count_unique_intensities(scaled)
    draws = np.stack(
        [datagen.synth_noisy(sharp, params, rng) for _ in range(args.draws)]
    )
    print(f"shot noise (f_scale={params.f_scale}, sigma_s={sigma_s}):")
    print(f"  mean      measured={draws.mean():.6f}  predicted={scaled.mean():.6f}")
    print(f"  variance  measured={draws.var(axis=0).mean():.3e}  "
          f"predicted={(scaled / sigma_s).mean():.3e}")

    params_g = datagen.SynthParams(
        f_scale=0.7, sigma_r=0.08, n_frames_averaged=10, rng_seed=args.seed
    )
    draws = np.stack(
        [datagen.synth_noisy(sharp, params_g, rng) for _ in range(args.draws)]
    )
    print(f"readout noise (f_scale={params_g.f_scale}, sigma_r={params_g.sigma_r}):")
    print(f"  std       measured={draws.std(axis=0).mean():.4f}  predicted={params_g.sigma_r:.4f}")

    frames = [np.full((16, 16, 3), 0.5)] * params.n_frames_averaged
    draws = np.stack(
        [datagen.synth_blurry(frames, params.sigma_r, rng) for _ in range(args.draws)]
    )
    predicted = params.sigma_r**2 / params.n_frames_averaged
    print(f"blurry readout (sigma_r={params.sigma_r}, N={params.n_frames_averaged}):")
    print(f"  variance  measured={draws.var(axis=0).mean():.3e}  predicted={predicted:.3e}")


if __name__ == "__main__":
    main()
