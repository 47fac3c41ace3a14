import math

import numpy as np
import pytest

from oracles import best_permutation_total, edit_distance
from stepseg.core import BACKGROUND, ValidationError, frames_to_segmentation
from stepseg.metrics import (
    EvalReport,
    aggregate,
    all_frame_accuracy,
    assignment_matrix,
    background_pct,
    evaluate,
    hungarian_assign,
    levenshtein,
    map_states,
    num_step_segments,
    representative_frames,
    score_video,
    sequence_similarity,
    step_frame_accuracy,
    step_recall,
)

bkg, A, B, C = BACKGROUND, 0, 1, 2


def test_all_frame_accuracy():
    ref = np.array([bkg, A, B, B])
    assert all_frame_accuracy(ref, ref) == 1.0
    assert all_frame_accuracy([C] * 4, ref) == 0.0
    ref = np.array([bkg] * 719 + [A] * 281)
    assert math.isclose(all_frame_accuracy(np.full(1000, bkg), ref), 0.719)
    with pytest.raises(ValidationError):
        all_frame_accuracy([A], [A, A])


def test_step_frame_accuracy():
    assert step_frame_accuracy([A, A, A], [bkg, A, B]) == 0.5
    assert step_frame_accuracy([bkg] * 3, [bkg, A, B]) == 0.0
    assert step_frame_accuracy([bkg, A, B], [bkg, A, B]) == 1.0
    assert math.isnan(step_frame_accuracy([A, A], [bkg, bkg]))


def test_decomposition_identity(rng):
    for _ in range(100):
        ref = rng.choice([bkg, A, B], size=int(rng.integers(2, 30)))
        pred = rng.choice([bkg, A, B], size=ref.size)
        is_bkg = ref == bkg
        if is_bkg.all() or not is_bkg.any():
            continue
        bg = is_bkg.mean()
        bkg_acc = np.mean(pred[is_bkg] == bkg)
        total = bg * bkg_acc + (1 - bg) * step_frame_accuracy(pred, ref)
        assert math.isclose(all_frame_accuracy(pred, ref), total, rel_tol=1e-12)


def test_representative_frame_midpoint():
    pred = np.full(10, bkg)
    pred[[3, 4, 5]] = A
    ref = np.full(10, bkg)
    ref[4] = A
    assert representative_frames(pred) == {A: 4}
    assert step_recall([pred], [ref]) == 1.0


def test_representative_frame_ties_earlier():
    pred = np.array([A, bkg, bkg, A])
    # midpoint (0 + 3) // 2 = 1; nearest predicted frames 0 (dist 1) and 3 (dist 2)
    assert representative_frames(pred) == {A: 0}
    pred = np.array([bkg, A, bkg, bkg, bkg, A, bkg])
    # midpoint 3: frames 1 and 5 are equidistant, earlier wins
    assert representative_frames(pred) == {A: 1}


def test_step_recall_pooled():
    ref1, ref2 = np.array([A, A, B, B]), np.array([bkg, C, C, bkg])
    pred1, pred2 = np.array([A, A, A, A]), np.array([bkg, bkg, bkg, bkg])
    # video 1: A recovered (rep frame 1), B not predicted; video 2: C missed
    assert math.isclose(step_recall([pred1, pred2], [ref1, ref2]), 1 / 3)
    assert step_recall([ref1, ref2], [ref1, ref2]) == 1.0
    assert step_recall([pred2], [ref2]) == 0.0


def test_sequence_similarity_examples():
    assert sequence_similarity([A, B], [A, B]) == 100.0
    assert math.isclose(sequence_similarity([A, B], [A, C, B]), 100 * (1 - 1 / 3))
    assert sequence_similarity([A, B, C], [bkg, bkg, bkg]) == 0.0
    seg = frames_to_segmentation([A, A, bkg, B])
    assert sequence_similarity(seg, seg) == 100.0


def test_sequence_similarity_empty():
    with pytest.warns(UserWarning):
        assert sequence_similarity([], []) == 100.0


def test_sequence_similarity_symmetric_and_identity(rng):
    for _ in range(200):
        a = rng.integers(-1, 3, size=int(rng.integers(0, 7))).tolist()
        b = rng.integers(-1, 3, size=int(rng.integers(1, 7))).tolist()
        assert sequence_similarity(a, b) == sequence_similarity(b, a)
        assert (sequence_similarity(a, b) == 100.0) == (a == b)


def test_levenshtein_matches_recursive(rng):
    for _ in range(300):
        a = rng.integers(0, 4, size=int(rng.integers(0, 8))).tolist()
        b = rng.integers(0, 4, size=int(rng.integers(0, 8))).tolist()
        assert levenshtein(a, b) == edit_distance(a, b)


def test_background_pct_and_segments():
    assert background_pct([bkg] * 4) == 100.0
    assert background_pct([A, B]) == 0.0
    assert num_step_segments([bkg, A, A, bkg, B]) == 2
    assert num_step_segments([bkg] * 3) == 0
    assert num_step_segments([A, B, B]) == 2


def test_hungarian_examples():
    m = np.diag([5, 6, 7]) + 1
    assert hungarian_assign(m).tolist() == [0, 1, 2]
    anti = np.fliplr(np.diag([5, 6, 7]))
    assert hungarian_assign(anti).tolist() == [2, 1, 0]


def test_hungarian_brute_force(rng):
    for n in range(1, 7):
        for _ in range(20):
            m = rng.integers(0, 20, size=(n, n))
            sigma = hungarian_assign(m)
            assert sorted(sigma.tolist()) == list(range(n))
            assert m[np.arange(n), sigma].sum() == best_permutation_total(m)


def test_hungarian_non_square_warns():
    m = np.array([[1, 5, 0], [4, 0, 0]])
    with pytest.warns(UserWarning):
        sigma = hungarian_assign(m)
    assert sigma.tolist() == [1, 0]


def test_assignment_matrix_and_map():
    preds = [np.array([0, 0, 1, 2]), np.array([2, 2])]
    refs = [np.array([bkg, bkg, A, B]), np.array([B, B])]
    m = assignment_matrix(preds, refs, 3, [A, B, bkg])
    assert m.sum() == 6
    assert m.tolist() == [[0, 0, 2], [1, 0, 0], [0, 3, 0]]
    assert map_states(preds, refs, 3, [A, B, bkg]) == {0: bkg, 1: A, 2: B}


def video_scores(task, vid, pred, ref):
    return score_video(vid, task, np.asarray(pred), np.asarray(ref))


def test_aggregate_single_video():
    pred, ref = [A, A, bkg, B], [A, bkg, bkg, B]
    rep = aggregate([video_scores("t", "v", pred, ref)])
    r = rep.per_task["t"]
    assert r["all_frame_accuracy"] == 75.0
    assert r["step_frame_accuracy"] == 100.0
    assert r["step_recall"] == 100.0
    assert r["background_pct"] == 25.0
    assert r["num_step_segments"] == 2.0
    assert r["sequence_similarity"] == sequence_similarity(frames_to_segmentation(pred), frames_to_segmentation(ref))
    assert rep.average == r


def test_aggregate_unweighted_over_tasks():
    scores = [video_scores("t1", "a", [A, A], [B, B])] + [
        video_scores("t2", f"b{i}", [A, A], [A, A]) for i in range(5)
    ]
    rep = aggregate(scores)
    assert rep.average["all_frame_accuracy"] == 50.0


def test_aggregate_order_invariant(rng):
    scores = [
        video_scores(f"t{i % 2}", f"v{i}", rng.integers(-1, 2, 10), rng.integers(-1, 2, 10)) for i in range(8)
    ]
    a, b = aggregate(scores), aggregate(scores[::-1])
    assert a.per_task == b.per_task and a.average == b.average


def test_aggregate_flags_no_step_frames():
    rep = aggregate([video_scores("t", "v", [bkg, bkg], [bkg, bkg])])
    assert math.isnan(rep.per_task["t"]["step_frame_accuracy"])
    assert any("no reference step frames" in f for f in rep.flags)


def test_evaluate_and_report_rendering():
    rep = evaluate({"v": np.array([A, bkg])}, {"v": np.array([A, A])}, {"v": "t"})
    assert isinstance(rep, EvalReport)
    recs = rep.records()
    assert [r["task"] for r in recs] == ["t", "average"]
    assert "all_acc" in rep.table()


def test_percentages_in_range(rng):
    for _ in range(50):
        scores = [video_scores("t", str(i), rng.integers(-1, 3, 15), rng.integers(-1, 3, 15)) for i in range(3)]
        rep = aggregate(scores)
        for k, v in rep.average.items():
            if k != "num_step_segments" and not math.isnan(v):
                assert 0.0 <= v <= 100.0
