#!/usr/bin/env python3
"""Smoke test for the groie_py extension module.

Build the module first:

    cargo build --release -p groie-py --features extension-module
    cp target/release/libgroie_py.so python/groie_py.so

then run `python3 python/smoke_test.py`.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import groie_py  # noqa: E402


def approx(a, b, tol=1e-12):
    assert abs(a - b) < tol, f"{a} != {b}"


def test_rng_determinism():
    a = groie_py.SeededRng(7)
    b = groie_py.SeededRng(7)
    for _ in range(100):
        assert a.uniform() == b.uniform()
    draws = [groie_py.SeededRng(7).int_range(0, 9) for _ in range(1)]
    assert all(0 <= d <= 9 for d in draws)


def test_level_assignment():
    # 224x224 box sits at the canonical level 4; half the size drops one
    # level; a huge box clamps at 5.
    assert groie_py.RoiBox(0, 0, 224, 224).level() == 4
    assert groie_py.RoiBox(0, 0, 112, 112).level() == 3
    assert groie_py.RoiBox(0, 0, 1000, 1000).level() == 5


def test_roi_align_hand_case():
    # 2x2 map [[1,2],[3,4]], whole-map box, 1x1 output, one sample per bin
    # -> the bilinear sample at the center averages everything: 2.5.
    level = groie_py.Tensor([1, 1, 2, 2], [1.0, 2.0, 3.0, 4.0])
    box = groie_py.RoiBox(0.0, 0.0, 2.0, 2.0)
    out = groie_py.roi_align(level, [box], out_size=1, sampling_ratio=1, spatial_scale=1.0)
    assert out.shape == [1, 1, 1, 1]
    approx(out.data[0], 2.5)


def make_pyramid(channels, seed=3):
    sizes = [(2, 32), (3, 16), (4, 8), (5, 4)]
    return [
        (k, groie_py.Tensor.random([1, channels, s, s], -1.0, 1.0, seed + k))
        for k, s in sizes
    ]


def test_extraction_strategies():
    channels = 8
    pyramid = make_pyramid(channels)
    boxes = [
        groie_py.RoiBox(4.0, 8.0, 40.0, 52.0),
        groie_py.RoiBox(30.0, 20.0, 90.0, 110.0),
    ]
    for strategy in ["single", "random", "sum", "sum_plus", "concat", "groie"]:
        ext = groie_py.Extractor(strategy, out_size=7, channels=channels,
                                 pre="conv3", agg="sum", post="none")
        feats = ext.extract(pyramid, boxes)
        assert feats.shape == [2, channels, 7, 7], (strategy, feats.shape)
        assert all(v == v for v in feats.data), strategy  # no NaNs
    # The plain-sum special case of the generic extractor matches sum exactly.
    plain = groie_py.Extractor("sum", channels=channels).extract(pyramid, boxes)
    generic = groie_py.Extractor("groie", channels=channels,
                                 pre="none", agg="sum", post="none").extract(pyramid, boxes)
    assert plain.data == generic.data


def test_empty_boxes():
    feats = groie_py.Extractor("sum", channels=8).extract(make_pyramid(8), [])
    assert feats.shape == [0, 8, 7, 7]


def test_iou():
    a = groie_py.RoiBox(0, 0, 10, 10)
    b = groie_py.RoiBox(5, 0, 15, 10)
    approx(a.iou(b), 50.0 / 150.0)


def test_gradcheck_battery():
    results = groie_py.gradcheck(1e-5)
    assert len(results) >= 10
    for name, worst, ok in results:
        assert ok, f"{name} failed with max rel err {worst}"


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"{t.__name__}: ok")
    print(f"all {len(tests)} smoke tests passed")


if __name__ == "__main__":
    main()
