"""Smoke test for the aogshape extension module.

Build first, for example:
    cargo build -p andor-shape-py --release
    cp target/release/libaogshape.so python/aogshape.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import aogshape  # noqa: E402


def main():
    assert abs(aogshape.iou((0, 0, 10, 10), (5, 0, 15, 10)) - 1 / 3) < 1e-12

    truth = {"a": [(0, 0, 10, 10)], "b": [(50, 50, 60, 60)]}
    dets = [
        ("a", 0.9, (0, 0, 10, 10)),
        ("a", 0.8, (30, 30, 40, 40)),
        ("b", 0.7, (50, 50, 60, 60)),
    ]
    ap = aogshape.average_precision(dets, truth)
    assert f"{ap:.4f}" == "0.8333", ap

    sample = aogshape.Sample(64, 64, [[(1, 1), (20, 5), (30, 30)]], label=1,
                             groundtruth=[(0, 0, 40, 40)], id="toy")
    text = sample.to_text()
    assert aogshape.Sample.parse(text, "toy").to_text() == text

    train = aogshape.synth(12, 12, seed=3)
    test = aogshape.synth(6, 6, seed=4)
    assert sum(s.label == 1 for s in train) == 12

    model, log = aogshape.fit(train, max_iterations=3)
    print("\n".join(log))
    assert model.live_leaves > 0
    result = aogshape.benchmark(model, test)
    print(f"AP {result['ap']:.4f} on {len(test)} synthetic test samples")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.aogm")
        model.save(path)
        again = aogshape.Model.load(path)
        assert again.omega == model.omega
        assert again.detect(test[0]) == model.detect(test[0])
        manifest = aogshape.write_synth(os.path.join(tmp, "synth"))
        assert len(aogshape.load_split(manifest, "test")) == 80

    print(model)
    print("smoke test passed")


if __name__ == "__main__":
    main()
