"""Brute-force reference implementations used as independent oracles."""
from fractions import Fraction

import numpy as np

from biolite import model


def brute_metrics(pred, true, num_classes=3):
    """Per-class IoU/Dice from pixel coordinate sets, plus accuracy from a per-pixel loop."""
    coords = list(np.ndindex(true.shape))
    ious, dices = [], []
    for c in range(num_classes):
        p = {ij for ij in coords if pred[ij] == c}
        t = {ij for ij in coords if true[ij] == c}
        union = p | t
        ious.append(Fraction(len(p & t), len(union)) if union else None)
        dices.append(Fraction(2 * len(p & t), len(p) + len(t)) if union else None)
    present = [v for v in ious if v is not None]
    miou = sum(present, Fraction(0)) / len(present)
    dpresent = [v for v in dices if v is not None]
    mdice = sum(dpresent, Fraction(0)) / len(dpresent)
    acc = Fraction(sum(1 for ij in coords if pred[ij] == true[ij]), len(coords))
    return ious, miou, dices, mdice, acc


def point_in_polygon(x, y, xs, ys):
    """Crossing-number test written independently of the rasterizer."""
    inside = False
    n = len(xs)
    for i in range(n):
        x1, y1, x2, y2 = xs[i], ys[i], xs[(i + 1) % n], ys[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


# worked 2x2 example: true = [0, 0, 1, 1], pred = [0, 1, 1, 1]
WORKED_TRUE = np.array([[0, 0], [1, 1]])
WORKED_PRED = np.array([[0, 1], [1, 1]])
WORKED = {
    "iou": [Fraction(1, 2), Fraction(2, 3), None],
    "dice": [Fraction(2, 3), Fraction(4, 5), None],
    "miou": Fraction(7, 12),
    "acc": Fraction(3, 4),
}


def observed_layers(config, h, w):
    """Per-layer (params, flops) from the real parameter tensors and shapes seen in a forward pass.

    Costs per output element: a 3x3 depthwise output is 9 products plus 9 sums (8
    accumulations and the bias), a 1x1 output over c_in inputs is c_in products plus c_in
    sums. Bilinear 2x outputs are charged 4 products plus 4 sums, the package convention;
    what this oracle checks independently is the shapes and tensor sizes.
    """
    params = model.build(config, seed=0)
    x = np.zeros((1, config.in_channels, h, w), np.float32)
    _, st = model.forward(params, x, cache=True)
    out = {}
    for name in model.BLOCKS:
        _, mid, pre, _ = st[name]
        dw_w, dw_b = params[f"{name}.dw.weight"], params[f"{name}.dw.bias"]
        pw_w, pw_b = params[f"{name}.pw.weight"], params[f"{name}.pw.bias"]
        out[f"{name}.dw"] = (dw_w.size + dw_b.size, mid.size * (dw_w[0].size + dw_w[0].size))
        out[f"{name}.pw"] = (pw_w.size + pw_b.size, pre.size * (pw_w[0].size + pw_w[0].size))
    head_w, head_b = params["head.weight"], params["head.bias"]
    out["head"] = (head_w.size + head_b.size, head_w.shape[0] * h * w * 2 * head_w[0].size)
    up1 = st["bottleneck"][2].size * 4
    up2 = st["dec1"][2].size * 4
    out["up1"] = (0, up1 * (4 + 4))
    out["up2"] = (0, up2 * (4 + 4))
    for name in ("pool1", "pool2", "cat1", "cat2"):
        out[name] = (0, 0)
    return out
