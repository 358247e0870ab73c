"""Smoke test for the tsf_siammu extension.

Build and install first:  pip install maturin && (cd crates/py && maturin develop)
"""

import math
import tempfile

import tsf_siammu as tsf


def main():
    gt = tsf.parse_vot_groundtruth("10,20,30,40\nnan,nan,nan,nan\n")
    assert gt == [(10.0, 20.0, 30.0, 40.0), None], gt
    assert tsf.parse_gtot_groundtruth("10 20 40 60\n") == [(10.0, 20.0, 30.0, 40.0)]
    assert abs(tsf.iou((0, 0, 10, 10), (5, 0, 10, 10)) - 1 / 3) < 1e-12
    try:
        tsf.parse_vot_groundtruth("1,2,3\n")
    except ValueError as e:
        assert ":1:" in str(e), e
    else:
        raise AssertionError("malformed line accepted")

    with tempfile.TemporaryDirectory() as root:
        ids = tsf.write_synthetic_suite(root, "motion_size", 1, 6, 3)
        (seq_id, truth), = tsf.load_dataset(root)
        assert seq_id == ids[0] and len(truth) == 6
        model = tsf.Model.tiny(seed=1)
        boxes, scores = model.track(root, seq_id)
        assert len(boxes) == len(scores) == 6
        assert boxes[0] == truth[0]
        auc, p20 = tsf.score(boxes, truth)
        assert 0.0 <= auc <= 1.0 and not math.isnan(p20)
        path = f"{root}/model.ckpt"
        model.save(path)
        assert tsf.Model.load(path).checksum() == model.checksum()
    print("smoke test OK")


if __name__ == "__main__":
    main()
