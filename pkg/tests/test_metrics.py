import json

import numpy as np
import pytest

from floodnowcast.errors import UsageError
from floodnowcast.metrics import ConfusionMatrix, confusion, macro_metrics


def test_confusion_diagonal_when_perfect():
    cm = confusion([0, 1, 2, 2, 0], [0, 1, 2, 2, 0])
    assert np.array_equal(cm.counts, np.diag([2, 1, 2]))


def test_confusion_empty_is_zero():
    cm = confusion([], [])
    assert np.array_equal(cm.counts, np.zeros((3, 3), dtype=int))


def test_confusion_hand_count():
    cm = confusion(preds=[0, 1, 1, 2], labels=[0, 0, 1, 2])
    assert np.array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])


def test_confusion_rejects_out_of_range():
    with pytest.raises(UsageError):
        confusion([0, 3], [0, 1])
    with pytest.raises(UsageError):
        confusion([0, 1], [0, -1])
    with pytest.raises(UsageError):
        confusion([0, 1, 2], [0, 1])


def test_macro_metrics_perfect():
    rep = macro_metrics(confusion([0, 1, 2], [0, 1, 2]))
    assert rep.macro_precision == rep.macro_recall == rep.macro_f1 == rep.accuracy == 1.0


def test_macro_metrics_hand_example():
    rep = macro_metrics(confusion(preds=[0, 1, 1, 2], labels=[0, 0, 1, 2]))
    assert abs(rep.macro_precision - (1.0 + 0.5 + 1.0) / 3.0) < 1e-12
    assert abs(rep.macro_recall - (0.5 + 1.0 + 1.0) / 3.0) < 1e-12
    assert abs(rep.macro_f1 - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0) < 1e-12
    assert abs(rep.accuracy - 0.75) < 1e-12


def test_macro_metrics_absent_class_scores_zero_but_divides_by_m():
    # class 2 never appears; its p/r/f1 are 0 and the macro mean still uses M=3
    rep = macro_metrics(confusion(preds=[0, 1], labels=[0, 1]))
    assert rep.precision[2] == rep.recall[2] == rep.f1[2] == 0.0
    assert abs(rep.macro_f1 - 2.0 / 3.0) < 1e-12
    assert rep.accuracy == 1.0


def test_macro_metrics_rejects_empty():
    with pytest.raises(UsageError):
        macro_metrics(ConfusionMatrix(counts=np.zeros((3, 3), dtype=int)))


def test_swapping_class_labels_preserves_macro_values():
    rng = np.random.default_rng(0)
    for _ in range(100):
        labels = rng.integers(0, 3, size=40)
        preds = rng.integers(0, 3, size=40)
        base = macro_metrics(confusion(preds, labels))
        swap = {0: 1, 1: 0, 2: 2}
        swapped = macro_metrics(confusion([swap[p] for p in preds],
                                          [swap[l] for l in labels]))
        assert swapped.macro_precision == pytest.approx(base.macro_precision, abs=1e-15)
        assert swapped.macro_recall == pytest.approx(base.macro_recall, abs=1e-15)
        assert swapped.macro_f1 == pytest.approx(base.macro_f1, abs=1e-15)
        assert swapped.accuracy == base.accuracy
        # per-class metrics permute alongside the relabeling
        assert swapped.precision[1] == pytest.approx(base.precision[0], abs=1e-15)
        assert swapped.recall[0] == pytest.approx(base.recall[1], abs=1e-15)


def test_macro_f1_bounded_by_per_class_extremes():
    rng = np.random.default_rng(1)
    for _ in range(20):
        labels = rng.integers(0, 3, size=30)
        preds = rng.integers(0, 3, size=30)
        rep = macro_metrics(confusion(preds, labels))
        assert min(rep.f1) - 1e-15 <= rep.macro_f1 <= max(rep.f1) + 1e-15
        assert 0.0 <= rep.accuracy <= 1.0


def test_confusion_total_conserved_under_prediction_changes():
    labels = [0, 1, 2, 1, 0, 2]
    a = confusion([0, 0, 0, 0, 0, 0], labels)
    b = confusion([2, 2, 2, 2, 2, 2], labels)
    assert a.total == b.total == 6


def test_report_serialization(tmp_path):
    rep = macro_metrics(confusion(preds=[0, 1, 1, 2], labels=[0, 0, 1, 2]))
    path = tmp_path / "metrics.json"
    rep.to_json(path)
    loaded = json.loads(path.read_text())
    assert loaded["accuracy"] == 0.75
    assert loaded["per_class"]["support"] == [2, 1, 1]
    cm_path = tmp_path / "confusion.csv"
    confusion(preds=[0, 1, 1, 2], labels=[0, 0, 1, 2]).to_csv(cm_path)
    assert cm_path.read_text().splitlines()[1] == "0,1,1,0"
