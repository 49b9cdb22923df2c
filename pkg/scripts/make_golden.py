"""Regenerate the golden weights file, input frame and expected mask under tests/data.

Only rerun this when the weights format or the inference pipeline changes on purpose;
the golden test exists to catch accidental changes to either.
"""
import argparse
from pathlib import Path

import numpy as np

from biolite import data, model, runtime, synth, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "tests" / "data", type=Path)
    ap.add_argument("--epochs", type=int, default=25)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    pre = data.PreprocessConfig(size=(128, 128))
    frames = [data.preprocess(s.frame, pre) for s in synth.generate_dataset(24, "easy", seed=2024, size=(128, 128))]
    best, log = train.train(frames[:20], frames[20:], model.build(seed=2024),
                            train.TrainConfig(max_epochs=args.epochs, lr=3e-3, seed=2024))
    runtime.save(best, args.out / "golden_weights.blw")

    image = synth.generate_dataset(1, "medium", seed=77, size=(180, 240))[0].image
    params, _, inf_pre = runtime.load(args.out / "golden_weights.blw")
    mask = runtime.infer(image, params, inf_pre)
    data.write_png(args.out / "golden_image.png", image)
    data.write_png(args.out / "golden_mask.png", mask)
    counts = np.bincount(mask.ravel(), minlength=3)
    print(f"best val dice {log.best_val_dice:.4f}; golden mask class counts {counts.tolist()}")


if __name__ == "__main__":
    main()
