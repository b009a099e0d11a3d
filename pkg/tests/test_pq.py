import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskconf.panoptic import PanopticSegmentation
from maskconf.pq import PqStats, pq_accumulate, pq_finalize
from maskconf.tensor_store import Segment

from oracles import pq_reference


def pan(id_map, classes):
    id_map = np.asarray(id_map, dtype=np.uint32)
    segs = [Segment(i, c, i - 1, int((id_map == i).sum())) for i, c in classes.items()]
    return PanopticSegmentation(id_map, segs)


def random_pan(rng, h=10, w=10, n_cls=3, max_segs=6, void_frac=0.1):
    id_map = np.zeros((h, w), dtype=np.uint32)
    n = int(rng.integers(1, max_segs + 1))
    for k in range(1, n + 1):
        r, c = rng.integers(0, h), rng.integers(0, w)
        id_map[r : r + int(rng.integers(1, h)), c : c + int(rng.integers(1, w))] = k
    id_map[rng.random((h, w)) < void_frac] = 0
    present = [int(v) for v in np.unique(id_map) if v]
    return pan(id_map, {i: int(rng.integers(1, n_cls + 1)) for i in present})


def stats_as_table(stats):
    return {
        c: [stats.tp.get(c, 0), stats.fp.get(c, 0), stats.fn.get(c, 0), stats.iou_sum.get(c, 0.0)]
        for c in stats.classes()
    }


def test_identical_single_segment():
    a = pan(np.ones((3, 3)), {1: 2})
    s = pq_accumulate(a, a)
    assert (s.tp[2], s.iou_sum[2], s.fp.get(2, 0), s.fn.get(2, 0)) == (1, 1.0, 0, 0)


def test_shifted_by_one_column():
    gt = np.zeros((4, 4))
    gt[:, :2] = 1
    pred = np.zeros((4, 4))
    pred[:, 1:3] = 1
    # half of the prediction lies on void: IoU 4/8 is not above 0.5, and half is not more than half
    s = pq_accumulate(pan(pred, {1: 1}), pan(gt, {1: 1}))
    assert s.tp.get(1, 0) == 0
    assert (s.fp[1], s.fn[1]) == (1, 1)


def test_shift_with_full_gt_labelling():
    # with no void at all the IoU is 4/12 = 1/3
    gt = np.full((4, 4), 2)
    gt[:, :2] = 1
    pred = np.full((4, 4), 2)
    pred[:, 1:3] = 1
    s = pq_accumulate(pan(pred, {1: 1, 2: 3}), pan(gt, {1: 1, 2: 3}))
    assert s.tp.get(1, 0) == 0
    assert (s.fp[1], s.fn[1]) == (1, 1)


def test_void_excluded_from_union():
    gt = np.zeros((2, 4))
    gt[:, :2] = 1
    pred = np.ones((2, 4))  # half on void
    s = pq_accumulate(pan(pred, {1: 1}), pan(gt, {1: 1}))
    assert s.tp[1] == 1
    assert s.iou_sum[1] == 1.0


def test_prediction_mostly_on_void_is_not_fp():
    gt = np.zeros((3, 3))
    gt[0, 0] = 1
    pred = np.zeros((3, 3))
    pred[1:, 1:] = 5
    s = pq_accumulate(pan(pred, {5: 2}), pan(gt, {1: 1}))
    assert s.fp.get(2, 0) == 0
    assert s.fn[1] == 1


def test_class_mismatch_never_matches():
    a = pan(np.ones((2, 2)), {1: 1})
    b = pan(np.ones((2, 2)), {1: 2})
    s = pq_accumulate(a, b)
    assert s.tp == {}
    assert (s.fp[1], s.fn[2]) == (1, 1)


def test_size_mismatch():
    with pytest.raises(ValueError):
        pq_accumulate(pan(np.ones((2, 2)), {1: 1}), pan(np.ones((2, 3)), {1: 1}))


@pytest.mark.parametrize(
    "tp, fp, fn, iou, expected",
    [(1, 0, 0, 1.0, (1.0, 1.0, 1.0)), (0, 1, 1, 0.0, (0.0, 0.0, 0.0)), (1, 1, 0, 0.6, (0.4, 0.6, 2 / 3))],
)
def test_finalize_examples(tp, fp, fn, iou, expected):
    stats = PqStats({1: tp}, {1: fp}, {1: fn}, {1: iou})
    got = pq_finalize(stats, [1])["per_class"][1]
    assert (got["pq"], got["sq"], got["rq"]) == pytest.approx(expected)


def test_finalize_skips_absent_classes():
    stats = PqStats({1: 1}, {}, {}, {1: 0.8})
    res = pq_finalize(stats, [1, 2, 3])
    assert res["n_classes"] == 1
    assert res["mean"]["pq"] == pytest.approx(0.8)


def test_finalize_rejects_empty_subset():
    with pytest.raises(ValueError):
        pq_finalize(PqStats(), [])


def test_identical_maps_give_pq_one(rng):
    a = random_pan(rng, void_frac=0.0)
    assert pq_finalize(pq_accumulate(a, a))["mean"]["pq"] == 1.0


@settings(max_examples=80, deadline=None)
@given(tp=st.integers(0, 50), fp=st.integers(0, 50), fn=st.integers(0, 50), frac=st.floats(0.5, 1.0))
def test_pq_is_sq_times_rq(tp, fp, fn, frac):
    if tp + fp + fn == 0:
        return
    stats = PqStats({1: tp}, {1: fp}, {1: fn}, {1: frac * tp})
    m = pq_finalize(stats, [1])["per_class"][1]
    assert abs(m["pq"] - m["sq"] * m["rq"]) <= 1e-9


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_matches_pairwise_reference(seed):
    gen = np.random.default_rng(seed)
    gt, pred = random_pan(gen), random_pan(gen, void_frac=0.0)
    ref = pq_reference(pred.id_map, pred.class_of(), gt.id_map, gt.class_of())
    got = stats_as_table(pq_accumulate(pred, gt))
    assert set(got) <= set(ref)
    for c, (tp, fp, fn, iou) in ref.items():
        g = got.get(c, [0, 0, 0, 0.0])
        assert g[:3] == [tp, fp, fn]
        assert g[3] == pytest.approx(iou, abs=1e-12)


def relabel(p, rng):
    ids = [s.segment_id for s in p.segments]
    new = rng.permutation(np.arange(1, len(ids) + 1) * 7)
    lut = np.zeros(p.id_map.max() + 1, dtype=np.uint32)
    for old, n in zip(ids, new):
        lut[old] = n
    segs = [Segment(int(lut[s.segment_id]), s.class_id, s.mask_index, s.area) for s in p.segments]
    return PanopticSegmentation(lut[p.id_map], segs)


def test_segment_id_permutation_invariance(rng):
    for _ in range(20):
        gt, pred = random_pan(rng), random_pan(rng)
        base = stats_as_table(pq_accumulate(pred, gt))
        assert stats_as_table(pq_accumulate(relabel(pred, rng), relabel(gt, rng))) == base


def test_accumulation_is_additive(rng):
    pairs = [(random_pan(rng), random_pan(rng)) for _ in range(6)]
    running = PqStats()
    for p, g in pairs:
        pq_accumulate(p, g, running)
    parts = [pq_accumulate(p, g) for p, g in pairs]
    merged = PqStats()
    for part in reversed(parts):
        merged = merged.merge(part)
    a, b = stats_as_table(running), stats_as_table(merged)
    assert a.keys() == b.keys()
    for c in a:
        assert a[c][:3] == b[c][:3]
        assert a[c][3] == pytest.approx(b[c][3])


def test_iou_sum_bounded_by_tp(rng):
    stats = PqStats()
    for _ in range(10):
        pq_accumulate(random_pan(rng), random_pan(rng), stats)
    for c in stats.classes():
        assert stats.iou_sum.get(c, 0.0) <= stats.tp.get(c, 0)


def test_to_dict_round_numbers():
    stats = PqStats({1: 2}, {1: 1}, {}, {1: 1.5})
    assert stats.to_dict() == {"1": {"tp": 2, "fp": 1, "fn": 0, "iou_sum": 1.5}}
