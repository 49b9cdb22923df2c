import numpy as np
import pytest

from biolite import synth
from oracles import point_in_polygon


def seg_distance(px, py, a, b):
    d = b - a
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(d @ d, 1e-12), 0, 1)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def test_empty_scene_is_background():
    f = synth.generate(synth.SceneConfig(image_size=(20, 30)))
    assert f.mask.shape == (20, 30) and not f.mask.any()
    assert np.all(f.image == 60)


def test_nozzle_pixels_match_point_in_polygon():
    noz = synth.NozzleSpec(tip_x=15.3, tip_y=18.7, width=10.0, taper_deg=8.0, gray=200.0, tip_length=6.0)
    f = synth.generate(synth.SceneConfig(image_size=(32, 32), nozzle=noz))
    expected = 0
    for y in range(32):
        for x in range(32):
            expected += any(point_in_polygon(x + 0.5, y + 0.5, xs, ys) for xs, ys in noz.polygons())
    assert (f.mask == 2).sum() == expected > 0


def test_ink_mask_matches_stroke_distance():
    ink = synth.InkSpec(points=[(3, 4), (20, 9), (28, 25)], thickness=4.0, color=(0, 255, 0))
    f = synth.generate(synth.SceneConfig(image_size=(32, 32), ink=ink))
    line = ink.polyline()
    for y in range(32):
        for x in range(32):
            d = min(seg_distance(x + 0.5, y + 0.5, line[i], line[i + 1]) for i in range(len(line) - 1))
            assert (f.mask[y, x] == 1) == (d <= 2.0)


def test_spline_endpoints_clamped():
    ctrl = np.array([[0.0, 0.0], [10.0, 5.0], [20.0, 0.0], [30.0, 10.0]])
    line = synth.quadratic_bspline(ctrl)
    assert np.allclose(line[0], ctrl[0]) and np.allclose(line[-1], ctrl[-1])


def test_nozzle_occludes_ink():
    ink = synth.InkSpec(points=[(0, 10), (16, 10), (31, 10)], thickness=4.0, color=(0, 255, 0))
    noz = synth.NozzleSpec(tip_x=16, tip_y=20, width=8, taper_deg=0, gray=200)
    f = synth.generate(synth.SceneConfig(image_size=(32, 32), ink=ink, nozzle=noz))
    assert f.mask[10, 16] == 2 and f.mask[10, 2] == 1


def test_painted_ink_is_labeled_ink():
    for sf in synth.generate_dataset(5, "easy", seed=4, size=(96, 96)):
        cfg = sf.config
        _, ink_cov = synth.ink_masks(cfg.ink, cfg.image_size)
        _, noz_cov = synth.nozzle_masks(cfg.nozzle, cfg.image_size)
        solid = (ink_cov == 1) & (noz_cov == 0)
        assert solid.any()
        assert np.all(sf.mask[solid] == 1)
        assert np.all(sf.image[solid] == np.rint(cfg.ink.color).astype(np.uint8))


def test_dataset_determinism_and_tiers():
    a = synth.generate_dataset(3, "medium", seed=9, size=(64, 64))
    b = synth.generate_dataset(3, "medium", seed=9, size=(64, 64))
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    easy = synth.generate_dataset(3, "easy", seed=9, size=(64, 64))
    hard = synth.generate_dataset(3, "hard", seed=9, size=(64, 64))
    for e, h in zip(easy, hard):
        assert np.array_equal(e.mask, h.mask)
        assert not np.array_equal(e.image, h.image)
    assert [f.id for f in a] == ["synth_0000", "synth_0001", "synth_0002"]
    with pytest.raises(ValueError):
        synth.generate_dataset(2, "extreme")


def test_easy_class_frequencies():
    frames = synth.generate_dataset(200, "easy", seed=0)
    counts = np.bincount(np.concatenate([f.mask.ravel() for f in frames]), minlength=3)
    freq = counts / counts.sum()
    assert set(np.unique(np.concatenate([np.unique(f.mask) for f in frames]))) <= {0, 1, 2}
    assert freq[0] >= 0.85 and freq[1] >= 0.01 and freq[2] >= 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        synth.SceneConfig(image_size=(10, 10), ink=synth.InkSpec([(0, 0), (5, 5)], 0.5, (1, 1, 1)))
    with pytest.raises(ValueError):
        synth.SceneConfig(image_size=(10, 10), nozzle=synth.NozzleSpec(20, 5, 4, 0, 100))
