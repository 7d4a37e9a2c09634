import random

import pytest
from hypothesis import given, settings, strategies as st

from detpo.evaluation import (
    COCO_IOU_THRESHOLDS,
    Detection,
    average_precision,
    coco_map,
    confusion_matrix,
    greedy_match,
    per_image_f1,
    read_detections,
    tide_decompose,
    write_detections,
)
from detpo.dataset import GroundTruthBox
from detpo.geometry import BoundingBox
from helpers import make_split, random_instance
from oracle import mean_ap

B = BoundingBox


def det(box, score=1.0, cls=0, image=0):
    return Detection(image, cls, B(*box), score)


def gt(box, cls=0, image=0):
    return GroundTruthBox(image, cls, B(*box))


def one_image(anns, names=("a", "b")):
    return make_split([(0, 100, 100)], anns, list(names))


def test_thresholds():
    assert COCO_IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_detection_score_validated():
    with pytest.raises(ValueError):
        Detection(0, 0, B(0, 0, 1, 1), 1.5)


# --- greedy matching -----------------------------------------------------------


def test_match_single_pair():
    m = greedy_match([det((0, 0, 10, 10))], [gt((0, 0, 10, 10))])
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)


def test_match_higher_score_wins():
    low, high = det((0, 0, 10, 10), 0.8), det((0, 0, 10, 9), 0.9)
    m = greedy_match([low, high], [gt((0, 0, 10, 10))])
    assert m.pairs[0][0] is high
    assert m.unmatched_detections == [low]


def test_match_below_threshold():
    m = greedy_match([det((0, 0, 10, 10))], [gt((0, 0, 4, 10))])  # IoU 0.4
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_prefers_highest_iou_then_earlier_gt():
    g1, g2 = gt((0, 0, 10, 10)), gt((1, 0, 11, 10))
    m = greedy_match([det((1, 0, 11, 10))], [g1, g2])
    assert m.pairs[0][1] is g2
    g3 = gt((0, 0, 10, 10))
    m = greedy_match([det((0, 0, 10, 10))], [g1, g3])
    assert m.pairs[0][1] is g1


def test_match_score_ties_keep_input_order():
    a, b = det((0, 0, 10, 10), 0.5), det((0, 0, 10, 10), 0.5)
    m = greedy_match([a, b], [gt((0, 0, 10, 10))])
    assert m.pairs[0][0] is a


def test_zero_area_gt_never_matched():
    m = greedy_match([det((5, 5, 5, 5))], [gt((5, 5, 5, 5))])
    assert m.tp == 0 and m.fn == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6), st.integers(0, 4), st.sampled_from([0.1, 0.5, 0.75]))
def test_match_invariants(seed, n_det, n_gt, thr):
    split, dets, _, _ = random_instance(random.Random(seed), n_det, n_gt, 2, n_images=1)
    m = greedy_match(dets, list(split.ground_truths), thr)
    assert len({id(d) for d, _, _ in m.pairs}) == len(m.pairs)
    assert len({id(g) for _, g, _ in m.pairs}) == len(m.pairs)
    assert all(v >= thr for _, _, v in m.pairs)
    assert m.tp + m.fp == n_det and m.tp + m.fn == n_gt


# --- AP / mAP -------------------------------------------------------------------


def test_ap_examples():
    split = one_image([(0, 0, [0, 0, 10, 10])])
    assert average_precision([det((0, 0, 10, 10))], split, 0) == 1.0
    assert average_precision([], split, 0) == 0.0
    assert average_precision([det((0, 0, 10, 10), cls=1)], split, 1) is None


def test_ap_tp_fp_tp_matches_oracle():
    split = one_image([(0, 0, [0, 0, 10, 10]), (0, 0, [50, 50, 10, 10])])
    dets = [det((0, 0, 10, 10), 0.9), det((80, 80, 90, 90), 0.8), det((50, 50, 60, 60), 0.7)]
    got = average_precision(dets, split, 0, 0.5)
    # PR points (1/2, 1), (1/2, 1/2), (1, 2/3): 51 levels at 1, 50 levels at 2/3
    assert got == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)
    oracle_dets = [(0, 0, (0, 0, 10, 10), 0.9, 0), (0, 0, (80, 80, 90, 90), 0.8, 1), (0, 0, (50, 50, 60, 60), 0.7, 2)]
    oracle_gts = [(0, 0, (0, 0, 10, 10)), (0, 0, (50, 50, 60, 60))]
    assert coco_map(dets, split).map == pytest.approx(float(mean_ap(oracle_dets, oracle_gts, [0])), abs=1e-12)


def test_map_examples():
    split = one_image([(0, 0, [0, 0, 20, 20]), (0, 1, [40, 40, 20, 20])])
    perfect = [det((0, 0, 20, 20)), det((40, 40, 60, 60), cls=1)]
    assert coco_map(perfect, split).map == 1.0
    assert coco_map([], split).map == 0.0


def test_iou_055_gives_point_two():
    split = one_image([(0, 0, [0, 0, 100, 100])], names=["a"])
    d = det((0, 0, 100, 55))  # IoU exactly 0.55
    assert coco_map([d], split).map == pytest.approx(0.2, abs=1e-12)


def test_classes_without_gt_excluded():
    split = one_image([(0, 0, [0, 0, 20, 20])])
    res = coco_map([det((0, 0, 20, 20)), det((50, 50, 60, 60), cls=1)], split)
    assert res.map == 1.0 and set(res.class_ap) == {0}


def test_max_dets_per_image():
    split = one_image([(0, 0, [0, 0, 10, 10])], names=["a"])
    noise = [det((50, 50, 60, 60), 0.9) for _ in range(3)]
    hit = det((0, 0, 10, 10), 0.1)
    assert coco_map(noise + [hit], split, max_dets=3).map == 0.0
    assert coco_map(noise + [hit], split, max_dets=4).map > 0.0


def test_oracle_sweep_sample():
    rng = random.Random(1)
    for _ in range(300):
        n_cls = rng.choice([1, 2])
        split, dets, od, og = random_instance(rng, rng.randrange(7), rng.randrange(5), n_cls)
        assert coco_map(dets, split).map == pytest.approx(float(mean_ap(od, og, range(n_cls))), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["square", "affine", "exp"]))
def test_map_rank_only(seed, kind):
    split, dets, _, _ = random_instance(random.Random(seed), 6, 4, 2)
    f = {"square": lambda s: s * s, "affine": lambda s: 0.1 + 0.5 * s, "exp": lambda s: 2.718281828 ** (s - 1)}[kind]
    moved = [d.with_score(f(d.score)) for d in dets]
    assert coco_map(moved, split).map == pytest.approx(coco_map(dets, split).map, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_bounded(seed):
    split, dets, _, _ = random_instance(random.Random(seed), 6, 4, 2)
    res = coco_map(dets, split)
    assert 0.0 <= res.map <= 1.0
    assert all(0.0 <= v <= 1.0 for v in res.class_ap.values())
    assert all(0.0 <= x <= 1.0 for p in res.per_image.values() for x in p)


# --- per-image F1 ---------------------------------------------------------------


def test_f1_examples():
    g = [gt((0, 0, 10, 10)), gt((50, 50, 60, 60))]
    assert per_image_f1([det((0, 0, 10, 10)), det((50, 50, 60, 60))], g) == (1.0, 1.0, 1.0)
    p, r, f = per_image_f1([det((0, 0, 10, 10)), det((80, 80, 90, 90))], g)
    assert (p, r, f) == (0.5, 0.5, 0.5)
    assert per_image_f1([], []) == (1.0, 1.0, 1.0)
    assert per_image_f1([], g) == (0.0, 0.0, 0.0)


# --- confusion matrix -----------------------------------------------------------


def test_confusion_diagonal():
    split = one_image([(0, 0, [0, 0, 10, 10]), (0, 1, [50, 50, 10, 10])])
    cm = confusion_matrix([det((0, 0, 10, 10)), det((50, 50, 60, 60), cls=1)], split)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 0]]


def test_confusion_cross_class():
    split = one_image([(0, 0, [0, 0, 10, 10])])
    cm = confusion_matrix([det((0, 0, 10, 10), cls=1)], split)
    assert cm.counts[0, 1] == 1 and cm.counts.sum() == 1


def test_confusion_no_detections_and_threshold():
    split = one_image([(0, 0, [0, 0, 10, 10]), (0, 1, [50, 50, 10, 10])])
    assert confusion_matrix([], split).counts[:, 2].tolist() == [1, 1, 0]
    cm = confusion_matrix([det((0, 0, 10, 10), 0.2), det((80, 80, 90, 90), 0.9)], split)
    assert cm.counts.tolist() == [[0, 0, 1], [0, 0, 1], [1, 0, 0]]
    assert cm.to_csv().splitlines()[0] == "gt\\pred,a,b,missed"


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_confusion_row_sums(seed):
    split, dets, _, _ = random_instance(random.Random(seed), 6, 4, 2)
    cm = confusion_matrix(dets, split, score_threshold=0.0)
    for c in range(2):
        assert cm.counts[c].sum() == len(split.gt_by_class.get(c, []))
    assert cm.counts[2].sum() + sum(cm.counts[c, :2].sum() for c in range(2)) == len(dets)


# --- TIDE -----------------------------------------------------------------------


def test_tide_examples():
    split = one_image([(0, 0, [0, 0, 20, 20])])
    dupe = tide_decompose([det((0, 0, 20, 20), 0.9), det((0, 0, 20, 20), 0.8)], split)
    assert dupe.counts["Dupe"] == 1 and dupe.fp_total == 1
    bkg = tide_decompose([det((0, 0, 20, 20)), det((19, 19, 40, 40))], split)
    assert bkg.counts["Bkg"] == 1
    cls = tide_decompose([det((0, 0, 20, 17), cls=1)], split)  # IoU 0.85 with a class-0 box
    assert cls.counts["Cls"] == 1 and cls.counts["Miss"] == 0
    loc = tide_decompose([det((0, 0, 20, 6))], split)  # IoU 0.3, right class
    assert loc.counts["Loc"] == 1 and loc.counts["Miss"] == 0
    both = tide_decompose([det((0, 0, 20, 6), cls=1)], split)
    assert both.counts["Both"] == 1 and both.counts["Miss"] == 1
    miss = tide_decompose([], split)
    assert miss.counts["Miss"] == 1 and miss.fn_total == 1


def test_tide_class_error_outranks_localization():
    # poor overlap with its own class, near-perfect with another class
    split = one_image([(0, 0, [0, 0, 20, 20]), (0, 1, [0, 0, 20, 6])])
    report = tide_decompose([det((0, 0, 20, 6))], split)
    assert report.counts["Cls"] == 1 and report.counts["Loc"] == 0
    assert report.counts["Miss"] == 1  # the class-0 box; the class-1 box is explained


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_tide_every_fp_assigned_once(seed):
    split, dets, _, _ = random_instance(random.Random(seed), 6, 4, 2)
    rep = tide_decompose(dets, split)
    fp_kinds = sum(v for k, v in rep.counts.items() if k != "Miss")
    assert fp_kinds == rep.fp_total == len(rep.assignments)
    assert rep.counts["Miss"] <= rep.fn_total


# --- JSON lines -----------------------------------------------------------------


def test_detections_round_trip(tmp_path):
    split = one_image([(0, 0, [0, 0, 10, 10])])
    dets = [det((1.5, 2, 3, 4), 0.25), det((0, 0, 10, 10), 1.0, cls=1)]
    write_detections(tmp_path / "d.jsonl", dets, split.classes)
    assert read_detections(tmp_path / "d.jsonl", split.classes) == dets
