"""Fit the 4 -> 32 channel CSM upsampler on paired windows and score it downstream."""

import argparse

from lamap.experiments import upsampler_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--test-scenes", type=int, default=10)
    p.add_argument("--band", type=float, default=3000.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    r = upsampler_experiment(args.pairs, args.test_scenes, band_hz=args.band, seed=args.seed)
    print(f"relative Frobenius error {r.rel_frobenius:.3f}")
    print(f"argmax within 2 hops: {r.hop_hits}/{r.n_windows}")


if __name__ == "__main__":
    main()
