"""Smoke test for the voxloc_py extension.

Build and run from the repository root:

    cargo build --release -p voxloc-py --features extension-module
    cp target/release/libvoxloc_py.so python/voxloc_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import voxloc_py as vl


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    assert close(vl.mad([(0, 0, 0), (2, 0, 0)]), 1.0, 1e-12)
    assert close(vl.mad([(0, 0, 0), (1, 0, 0), (2, 0, 0)]), 2 / 3, 1e-12)

    a = vl.Volume([1, 1, 1], [0.0])
    b = vl.Volume([1, 1, 1], [2.0])
    mean, var = vl.mean_variance([a, b])
    assert mean.data == [1.0] and var.data == [1.0]

    h = vl.gaussian_heatmap([10, 10, 10], [21, 21, 21], spacing=[0.5, 0.5, 0.5])
    assert close(h.get(13, 10, 10), math.exp(-0.5))
    assert h.argmax() == [10, 10, 10]

    s = vl.rejection_stats([float(x) for x in range(1, 10)])
    assert (s["q1"], s["median"], s["q3"], s["iqr"]) == (3.0, 5.0, 7.0, 4.0)
    assert vl.rejection_stats([1, 1, 1, 1, 100])["flagged"] == [4]

    tf = vl.RigidTransform([0, 0, 1], 90.0, [0, 0, 0], pivot=[7, 7, 7])
    p = tf.map_point([11, 7, 7])
    assert all(close(x, y) for x, y in zip(p, [7, 11, 7]))
    back = tf.invert().map_point(p)
    assert all(close(x, y) for x, y in zip(back, [11, 7, 7]))

    curve = vl.IntensityCurve([0, 1], [0, 1])
    assert all(close(x, y, 1e-12) for x, y in zip(curve.eval(0.5), [0.125, 0.875]))
    assert abs(curve.apply(0.125) - 0.875) <= 2e-3
    rigid, c2 = vl.sample_transform(3, [31.5, 31.5, 31.5])
    assert 0 <= c2.p1[0] <= c2.p2[0] <= 1

    case = vl.generate_phantom(dims=[96, 80, 80], crop_extent=[32, 32, 32])
    lo, hi = case["image"].min_max()
    assert lo == 0.0 and hi == 1.0
    oracle = vl.OracleLocalizer()
    res = vl.run_pipeline(
        case["image"], case["left_mask"], case["right_mask"],
        case["left_target"], case["right_target"], oracle,
        coarse_dims=[48, 40, 40], crop_extent=[32, 32, 32],
    )
    for side in ("left", "right"):
        t = case[side + "_target"]
        d = math.dist(res[side], t)
        assert d <= 1.0, (side, res[side], t)
    assert res["left"][0] < res["right"][0]

    crop = vl.Volume.zeros([32, 32, 32])
    summary = vl.run_uncertainty(vl.OracleLocalizer(jitter_std=1.0), crop, [16, 16, 16], "mcdo", 50, 7)
    assert 0.5 <= summary["mad"] <= 2.5, summary["mad"]
    still = vl.run_uncertainty(oracle, crop, [16, 16, 16], "tta", 10, 7, identity_priors=True)
    assert still["mad"] == 0.0 and still["final_target"] == [16, 16, 16]

    with tempfile.TemporaryDirectory() as d:
        stem = os.path.join(d, "vol")
        h.write(stem)
        assert vl.Volume.read(stem + ".json").max_abs_diff(h) < 1e-6
        try:
            vl.Volume.read(os.path.join(d, "missing.json"))
        except OSError:
            pass
        else:
            raise AssertionError("expected OSError")

        cfg = {
            "cohort_dir": os.path.join(d, "cohort"),
            "out_dir": os.path.join(d, "out"),
            "seed": 2,
            "modes": ["baseline", "mcdo"],
            "cohort": {"n_cases": 4, "template": {
                "dims": [96, 80, 80], "crop_extent": [32, 32, 32],
                "brain": {"center": [47.5, 39.5, 39.5], "semi_axes": [38.0, 36.0, 32.0], "intensity": 0.55},
                "ventricle": {"center": [47.5, 39.5, 43.5], "semi_axes": [4.0, 18.0, 12.0], "intensity": 0.15},
                "left_thalamus": {"center": [33.5, 39.5, 43.5], "semi_axes": [9.0, 15.0, 10.0], "intensity": 0.8},
                "right_thalamus": {"center": [61.5, 39.5, 43.5], "semi_axes": [9.0, 15.0, 10.0], "intensity": 0.8}}},
            "pipeline": {"coarse_dims": [48, 40, 40], "crop_extent": [32, 32, 32]},
            "localizer": {"oracle": {"jitter_std": 0.5}},
            "uncertainty": {"mcdo": {"mode": "mcdo", "n_samples": 10}},
        }
        text = json.dumps(cfg)
        assert vl.generate(config_json=text) == 4
        results, failed = vl.run(config_json=text)
        assert failed == []
        report = json.loads(vl.analyze(results, os.path.join(d, "out")))
        assert [m["mode"] for m in report["modes"]] == ["mcdo"]

    try:
        vl.mad([])
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("voxloc_py smoke test: ok")


if __name__ == "__main__":
    main()
