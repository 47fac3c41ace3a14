import numpy as np
import pytest

from stepseg.baselines import TaskStats, corpus_background_fraction, ordered_uniform, predict_background, sample_from_train
from stepseg.core import BACKGROUND, TaskDefinition, ValidationError, segmentation_to_frames
from stepseg.constraints import satisfies_order
from stepseg.metrics import all_frame_accuracy, num_step_segments, step_frame_accuracy, step_recall

bkg = BACKGROUND


def test_predict_background():
    assert predict_background(5).tolist() == [bkg] * 5
    with pytest.raises(ValidationError):
        predict_background(0)


def test_background_baseline_scores(rng):
    for _ in range(20):
        ref = rng.choice([bkg, 0, 1, 2], size=int(rng.integers(1, 40)))
        pred = predict_background(ref.size)
        assert all_frame_accuracy(pred, ref) == np.mean(ref == bkg)
        if (ref != bkg).any():
            assert step_frame_accuracy(pred, ref) == 0.0
            assert step_recall([pred], [ref]) == 0.0


def test_sample_degenerate():
    task = TaskDefinition("t", ("A", "B"))
    stats = TaskStats.from_labelings(task, [np.full(10, bkg)])
    assert sample_from_train(stats, 7, 0).tolist() == [bkg] * 7
    assert stats.background_fraction == 1.0


def test_sample_frequencies():
    task = TaskDefinition("t", ("A", "B"))
    stats = TaskStats.from_labelings(task, [np.array([0, 0, 1, bkg, bkg, bkg, bkg, bkg])])
    assert np.isclose(sum(stats.probs), 1.0)
    n = 100_000
    draws = sample_from_train(stats, n, 3)
    for label, p in zip(stats.labels, stats.probs):
        assert abs(np.mean(draws == label) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_sample_expected_accuracy_identity():
    task = TaskDefinition("t", ("A", "B"))
    stats = TaskStats.from_labelings(task, [np.array([0, 1, 1, bkg, bkg])])
    ref = np.array([0] * 300 + [1] * 100 + [bkg] * 600)
    p_hat = dict(zip(stats.labels, stats.probs))
    p_star = {l: np.mean(ref == l) for l in stats.labels}
    expected = sum(p_hat[l] * p_star[l] for l in stats.labels)
    accs = [all_frame_accuracy(sample_from_train(stats, ref.size, s), ref) for s in range(200)]
    assert abs(np.mean(accs) - expected) < 3 * np.std(accs) / np.sqrt(200)


def test_ordered_uniform_hand_example():
    seg = ordered_uniform(TaskDefinition("t", ("a", "b", "c", "d")), 100, 0.72)
    assert seg.regions == ((bkg, 15), (0, 7), (bkg, 15), (1, 7), (bkg, 14), (2, 7), (bkg, 14), (3, 7), (bkg, 14))
    assert num_step_segments(seg) == 4


def test_ordered_uniform_no_background():
    seg = ordered_uniform(3, 10, 0.0)
    assert seg.regions == ((0, 4), (1, 3), (2, 3))


def test_ordered_uniform_errors():
    with pytest.raises(ValidationError):
        ordered_uniform(4, 3, 0.5)
    with pytest.raises(ValidationError):
        ordered_uniform(2, 10, 1.5)


def test_ordered_uniform_properties(rng):
    for _ in range(200):
        S = int(rng.integers(1, 6))
        T = int(rng.integers(2 * S + 1, 120))
        bg = float(rng.uniform(0, 0.95))
        seg = ordered_uniform(S, T, bg)
        frames = segmentation_to_frames(seg)
        assert seg.T == T
        assert satisfies_order(seg, S)
        realized = np.mean(frames == bkg)
        if round((1 - bg) * T) >= S:
            assert abs(realized - bg) <= 1 / T + 1e-12


def test_corpus_background_fraction():
    assert corpus_background_fraction([np.array([bkg, 0]), np.array([bkg, bkg])]) == 0.75
