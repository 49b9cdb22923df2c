import struct
import zlib

import numpy as np
import pytest

from biolite import data, model, runtime, synth
from biolite.errors import DataError, FormatError


def random_params(seed, config=model.ArchConfig()):
    rng = np.random.default_rng(seed)
    p = model.build(config, seed=seed)
    for t in p.tensors.values():
        t[...] = rng.standard_normal(t.shape).astype(np.float32) * 10.0 ** rng.integers(-3, 3)
    return p


@pytest.mark.parametrize("seed", range(5))
def test_roundtrip_bitwise(seed, tmp_path):
    cfg = model.ArchConfig(enc_channels=(4 + seed, 8), bottleneck_channels=9, dec_channels=(7, 5))
    p = random_params(seed, cfg)
    pre = data.PreprocessConfig(clahe=bool(seed % 2), mean=(0.5, 0.5, 0.5), std=(0.25, 0.5, 1.0))
    runtime.save(p, tmp_path / "w.blw", pre)
    q, arch, pre2 = runtime.load(tmp_path / "w.blw")
    assert arch == cfg and pre2.clahe == pre.clahe and pre2.mean == pre.mean and pre2.std == pre.std
    assert q.names() == p.names()
    assert all(q[k].tobytes() == p[k].tobytes() for k in p.names())


def test_layout_header_and_crc():
    buf = runtime.dumps(model.build())
    assert buf[:4] == b"BLU1"
    assert struct.unpack_from("<H", buf, 4)[0] == 1
    assert struct.unpack_from("<7H", buf, 6) == (3, 3, 16, 40, 56, 40, 16)
    assert struct.unpack_from("<I", buf, 45)[0] == 22
    # first record: name length, name, dtype tag, ndim, dims
    (n,) = struct.unpack_from("<H", buf, 49)
    assert buf[51:51 + n] == b"enc1.dw.weight"
    assert struct.unpack_from("<BB4I", buf, 51 + n) == (1, 4, 3, 1, 3, 3)
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


def test_corruption_detected():
    buf = runtime.dumps(model.build())
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(buf), 200, replace=False):
        bad = bytearray(buf)
        bad[pos] ^= 0x5A
        with pytest.raises(FormatError, match="CRC mismatch"):
            runtime.loads(bytes(bad))


def test_truncation_names_layer():
    buf = runtime.dumps(model.build())
    with pytest.raises(FormatError, match=r"layer 'enc2\.pw\.weight'") as exc:
        runtime.loads(buf[:1300])
    assert "byte offset" in str(exc.value)
    with pytest.raises(FormatError, match="magic"):
        runtime.loads(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        runtime.loads(b"")


def test_future_version_rejected_explicitly():
    buf = bytearray(runtime.dumps(model.build()))
    struct.pack_into("<H", buf, 4, 2)
    buf[-4:] = struct.pack("<I", zlib.crc32(bytes(buf[:-4])))
    with pytest.raises(FormatError, match="unsupported weights format version 2"):
        runtime.loads(bytes(buf))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        runtime.load(tmp_path / "nope.blw")


@pytest.fixture(scope="module")
def frames():
    return [s.image for s in synth.generate_dataset(4, "medium", seed=2, size=(120, 160))]


def test_infer_contract(frames):
    p = random_params(1)
    for img in frames:
        m = runtime.infer(img, p)
        assert m.shape == img.shape[:2] and m.dtype == np.uint8
        assert set(np.unique(m)) <= {0, 1, 2}
        assert np.array_equal(m, runtime.infer(img, p, fused_softmax=True))
    with pytest.raises(DataError):
        runtime.infer(np.zeros((0, 5, 3), np.uint8), p)


def test_infer_stages_match_manual_pipeline(frames):
    p = model.build(seed=4)
    pre = data.PreprocessConfig()
    img = frames[0]
    x = data.normalize(data.clahe_rgb(data.resize_bilinear(img, (256, 256)))[None])
    manual = data.resize_nearest(model.forward(p, x)[0].argmax(axis=0).astype(np.uint8), img.shape[:2])
    timings = {}
    assert np.array_equal(runtime.infer(img, p, pre, timings=timings), manual)
    assert set(timings) == {"preprocess", "forward", "postprocess", "total"}


def test_argmax_ties_go_to_lowest_class():
    p = model.build(seed=0)
    for t in p.tensors.values():
        t[...] = 0
    m = runtime.infer(np.full((8, 8, 3), 100, np.uint8), p)
    assert not m.any()


def test_overlay_colors():
    o = runtime.overlay_rgba(np.array([[0, 1, 2]], np.uint8))
    assert o[0, 0].tolist() == [0, 0, 0, 0]
    assert o[0, 1].tolist() == [0, 255, 0, 255] and o[0, 2].tolist() == [255, 0, 0, 255]


def test_benchmark_report(frames):
    masks = []
    rep = runtime.benchmark(model.build(), frames, n=7, warmup=2, masks_out=masks)
    assert rep.n == 7 and len(rep.samples_ms) == 7 and len(masks) == 7
    assert rep.p95_ms == max(rep.samples_ms)  # nearest rank over 7 samples
    assert rep.median_ms == pytest.approx(float(np.median(rep.samples_ms)))
    csv_text = rep.to_csv()
    assert "Raspberry Pi 4B (reference),335.0" in csv_text and "GPU (reference),0.41" in csv_text
    assert csv_text.splitlines()[0] == "stage,mean_ms,median_ms,p95_ms,n,warmup,threads,kind"
    with pytest.raises(ValueError):
        runtime.benchmark(model.build(), frames, n=0)


def test_describe_report():
    rep = runtime.describe()
    assert rep.total_params == model.count_params(model.ArchConfig())
    assert rep.total_flops == sum(r.flops for r in rep.rows)
    row = rep.table_row()
    assert row["input_size"] == "256x256" and row["params_M"] == 0.01
    assert 0.35 <= row["flops_G"] <= 0.55
    text = rep.to_text()
    assert "Parameters (M)" in text and "FLOPs (G)" in text
    assert rep.to_csv().splitlines()[-1].startswith("total,,,")
