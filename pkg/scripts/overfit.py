"""Overfit sanity check: a few easy frames, val = train, no augmentation.

Prints the optimizer step at which val Dice first crossed the target for each seed.
"""
import argparse

from biolite.experiments import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--target", type=float, default=0.99)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    for seed in args.seeds:
        r = overfit(args.frames, args.steps, args.target, lr=args.lr, seed=seed)
        hit = r.first_step_above if r.first_step_above is not None else "never"
        print(f"seed {seed}: Dice > {args.target} at step {hit}; best {r.best_dice:.4f} "
              f"after {r.steps} steps ({r.seconds:.0f}s)")


if __name__ == "__main__":
    main()
