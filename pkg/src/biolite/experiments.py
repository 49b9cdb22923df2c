"""Reusable synthetic-data experiments: the overfit sanity run and end-to-end training."""
from __future__ import annotations

import time
from dataclasses import dataclass

from . import data, model, runtime, synth, train
from .metrics import ConfusionMatrix, EvalReport


@dataclass
class OverfitResult:
    first_step_above: int | None  # optimizer step at which val Dice first exceeded the target
    best_dice: float
    steps: int
    seconds: float


def overfit(n_frames: int = 4, max_steps: int = 300, target: float = 0.99, size=(128, 128), lr: float = 3e-3,
            seed: int = 0) -> OverfitResult:
    """Train on a handful of easy frames with val = train and no augmentation."""
    t0 = time.perf_counter()
    pre = data.PreprocessConfig(size=size)
    frames = [data.preprocess(s.frame, pre) for s in synth.generate_dataset(n_frames, "easy", seed, size)]
    cfg = train.TrainConfig(lr=lr, batch_size=n_frames, max_epochs=max_steps, max_steps=max_steps,
                            augment=False, early_stop_patience=max_steps, seed=seed)
    hit = []

    def on_epoch(rec, params, is_best):
        if rec.val_dice > target and not hit:
            hit.append(rec.steps)

    _, tlog = train.train(frames, frames, model.build(seed=seed), cfg, on_epoch=on_epoch)
    steps = tlog.epochs[-1].steps if tlog.epochs else 0
    return OverfitResult(hit[0] if hit else None, tlog.best_val_dice, steps, time.perf_counter() - t0)


@dataclass
class SyntheticRun:
    report: EvalReport
    log: train.TrainLog
    params: model.ModelParams
    split_sizes: tuple[int, int, int]
    seconds: float


def synthetic_training(n: int = 200, difficulty: str = "easy", max_epochs: int = 50, seed: int = 0,
                       train_config: train.TrainConfig | None = None,
                       preprocess: data.PreprocessConfig | None = None) -> SyntheticRun:
    """Generate, split 80/10/10, train, then score the best checkpoint on the held-out test frames.

    Test frames go through the full inference pipeline at their source resolution.
    """
    t0 = time.perf_counter()
    pre = preprocess or data.PreprocessConfig()
    frames = [s.frame for s in synth.generate_dataset(n, difficulty, seed)]
    sp = data.split(frames, seed)
    by_id = {f.id: f for f in frames}
    tr, va, te = ([by_id[i] for i in sp.of(name)] for name in ("train", "val", "test"))
    cfg = train_config or train.TrainConfig(max_epochs=max_epochs, seed=seed)
    best, tlog = train.train([data.preprocess(f, pre) for f in tr], [data.preprocess(f, pre) for f in va],
                             model.build(seed=seed), cfg)
    cm = ConfusionMatrix()
    for f in te:
        cm.accumulate(runtime.infer(f.image, best, pre), f.mask)
    return SyntheticRun(EvalReport.from_confusion(cm), tlog, best, (len(tr), len(va), len(te)),
                        time.perf_counter() - t0)
