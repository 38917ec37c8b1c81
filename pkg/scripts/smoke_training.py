"""Train a 2-band LAM on synthetic single-source scenes and compare K-means LE with DAS.

    python scripts/smoke_training.py --gamma 0.05 --lr 1e-3 --epochs 200 --out smoke.lamm
"""

import argparse
import dataclasses

from lamap.experiments import SmokeConfig, kmeans_le, smoke_training
from lamap.lam import save_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--static-train", action="store_true",
                   help="train on static sources only (overfits to the few training directions)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="write the trained checkpoint here")
    args = p.parse_args()

    cfg = SmokeConfig()
    over = {k: v for k, v in (("learning_rate", args.lr), ("gamma", args.gamma),
                              ("max_epochs", args.epochs)) if v is not None}
    if over:
        cfg.train = dataclasses.replace(cfg.train, **over)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.static_train:
        cfg.train_moving_probability = 0.0

    r = smoke_training(cfg, threads=args.threads)
    print(f"trained in {r.train_seconds:.0f} s, best epochs {r.best_epoch}")
    print(f"validation mse      {r.val_mse_init.round(4)} -> {r.val_mse_final.round(4)}")
    print(f"validation objective {r.val_objective_init.round(4)} -> {r.val_objective_best.round(4)}")
    print(f"DAS -> K-means  {r.das.summary()}")
    print(f"LAM -> K-means  {r.lam.summary()}")
    print(f"1.5 x mean spacing {1.5 * r.mean_spacing_deg:.2f} deg")
    if args.out:
        save_checkpoint(r.trained, args.out)


if __name__ == "__main__":
    main()
