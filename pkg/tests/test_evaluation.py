import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xcam import blocks, data, evaluation as ev
from xcam.errors import ShapeError, ValidationError
from xcam.training import ScheduleConfig, TrainConfig
from oracles import auprc_oracle, metrics_oracle, recount

METRICS = ("accuracy", "f1", "sensitivity", "specificity", "ppv", "npv")


class TestConfusion:
    def test_example(self):
        assert ev.confusion([0.9, 0.1], [1, 0]) == ev.ConfusionCounts(tp=1, fp=0, fn=0, tn=1)

    def test_tie_is_positive(self):
        assert ev.confusion([0.5], [1]).tp == 1
        assert ev.confusion([0.5], [0]).fp == 1

    def test_random_matches_recount(self):
        rng = np.random.default_rng(0)
        s, y = rng.random(20), rng.integers(0, 2, 20)
        c = ev.confusion(s, y)
        assert (c.tp, c.fp, c.fn, c.tn) == recount(s, y)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ev.confusion([0.1, 0.2], [1])

    def test_empty_and_bad_labels(self):
        with pytest.raises(ValidationError):
            ev.confusion([], [])
        with pytest.raises(ValidationError):
            ev.confusion([0.2], [3])


class TestMetrics:
    def test_all_seventy_five(self):
        m = ev.metrics_from_confusion(ev.ConfusionCounts(tp=6, fp=2, fn=2, tn=6))
        for k in METRICS:
            assert getattr(m, k) == pytest.approx(75.0, abs=1e-12)

    def test_perfect(self):
        m = ev.metrics_from_confusion(ev.ConfusionCounts(tp=3, fp=0, fn=0, tn=4))
        assert m.accuracy == m.sensitivity == m.specificity == 100.0

    def test_absent_positive_class(self):
        m = ev.metrics_from_confusion(ev.ConfusionCounts(tp=0, fp=1, fn=0, tn=5))
        assert m.sensitivity is None and m.f1 is None
        assert m.accuracy == pytest.approx(500 / 6)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            ev.metrics_from_confusion(ev.ConfusionCounts(0, 0, 0, 0))

    @given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
    def test_oracle_and_ranges(self, tp, fp, fn, tn):
        if tp + fp + fn + tn == 0:
            return
        m = ev.metrics_from_confusion(ev.ConfusionCounts(tp, fp, fn, tn))
        ref = metrics_oracle(tp, fp, fn, tn)
        for k in METRICS:
            got = getattr(m, k)
            assert (got is None) == (ref[k] is None)
            if got is not None:
                assert got == pytest.approx(ref[k], rel=1e-12)
                assert 0.0 <= got <= 100.0


class TestPrCurve:
    def test_perfect(self):
        assert ev.pr_curve([0.9, 0.1], [1, 0]).auprc == 1.0

    def test_example(self):
        c = ev.pr_curve([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])
        assert c.auprc == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)

    def test_ties_share_threshold(self):
        c = ev.pr_curve([0.5, 0.5, 0.2], [1, 0, 1])
        np.testing.assert_array_equal(c.thresholds, [0.5, 0.2])
        assert c.auprc == pytest.approx(0.5 * 0.5 + 0.5 * 2 / 3)

    def test_no_positive(self):
        with pytest.raises(ValidationError):
            ev.pr_curve([0.1, 0.2], [0, 0])

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=1, max_size=12))
    @settings(max_examples=300)
    def test_small_instances_exact(self, pairs):
        scores = [s / 6 for s, _ in pairs]
        labels = [y for _, y in pairs]
        if sum(labels) == 0:
            return
        c = ev.pr_curve(scores, labels)
        assert c.auprc == auprc_oracle(scores, labels)
        assert np.all(np.diff(c.thresholds) < 0)
        assert np.all(np.diff(c.recall) >= 0)
        assert 0.0 <= c.auprc <= 1.0

    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, ticks, seed):
        # on this grid the transform stays injective in float64, so ties are preserved exactly
        scores = np.asarray(ticks) / 100
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        if labels.sum() == 0:
            labels[0] = 1
        a = ev.pr_curve(scores, labels).auprc
        b = ev.pr_curve(np.exp(scores) * 3 + 1, labels).auprc
        assert a == b

    def test_random_scores_track_prevalence(self):
        rng = np.random.default_rng(1)
        values = []
        for _ in range(1000):
            labels = rng.permutation(np.repeat([0, 1], 100))
            values.append(ev.pr_curve(rng.random(200), labels).auprc)
        assert abs(np.mean(values) - 0.5) <= 0.05

    def test_csv(self):
        text = ev.pr_curve([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]).to_csv()
        lines = text.splitlines()
        assert lines[0] == "threshold,recall,precision"
        assert lines[1] == "0.9,0.5,1.0"
        assert len(lines) == 5


class TestFolds:
    def test_reference_cohort(self):
        labels = np.array([1] * 88 + [0] * 65)
        plan = ev.stratified_kfold(labels, 10, seed=0)
        assert {len(f) for f in plan.folds} <= {15, 16}
        assert {t[1] for t in plan.tallies} <= {8, 9}
        assert {t[0] for t in plan.tallies} <= {6, 7}

    def test_leave_one_out(self):
        plan = ev.stratified_kfold(np.array([0, 1] * 5), 10, seed=3)
        assert all(len(f) == 1 for f in plan.folds)

    @given(st.lists(st.integers(0, 1), min_size=20, max_size=80), st.integers(0, 1000))
    @settings(max_examples=200)
    def test_partition(self, labels, seed):
        labels = np.array(labels)
        k = 4
        if min(np.sum(labels == 0), np.sum(labels == 1)) < k:
            return
        plan = ev.stratified_kfold(labels, k, seed)
        joined = np.concatenate(plan.folds)
        assert sorted(joined) == list(range(len(labels)))
        for cls in (0, 1):
            per_fold = [np.sum(labels[f] == cls) for f in plan.folds]
            assert max(per_fold) - min(per_fold) <= 1

    def test_seeded(self):
        labels = np.array([1] * 30 + [0] * 20)
        a, b = ev.stratified_kfold(labels, 5, 9), ev.stratified_kfold(labels, 5, 9)
        assert all(np.array_equal(x, y) for x, y in zip(a.folds, b.folds))

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            ev.stratified_kfold(np.array([1, 0, 1]), 5, 0)

    def test_small_class_spreads_thin(self):
        plan = ev.stratified_kfold(np.array([1] * 20 + [0] * 3), 5, 0)
        assert sum(t.get(0, 0) for t in plan.tallies) == 3
        assert {len(f) for f in plan.folds} <= {4, 5}


@pytest.fixture(scope="module")
def tiny_cv():
    synth = data.generate_synthetic(data.SynthConfig(n_per_class=4, seed=5, size=32))
    x = data.to_batch(synth.images, 32)
    cfg = TrainConfig(schedule=ScheduleConfig(total_epochs=1))
    scale = blocks.NetworkScale(width_multiplier=0.25, se_reduction=4)
    return ev.cross_validate(x, synth.labels, "se_resnext", cfg, seed=1, k=2, scale=scale), synth.labels


class TestCrossValidate:
    def test_smoke(self, tiny_cv):
        result, labels = tiny_cv
        assert len(result.folds) == 2
        total = sum(f.confusion.total for f in result.folds)
        assert total == len(labels)
        rows = json.loads(result.records_json())
        assert [r["fold"] for r in rows] == [0, 1, "pooled", "mean"]

    def test_scores_cover_dataset(self, tiny_cv):
        result, labels = tiny_cv
        assert result.scores.shape == labels.shape
        assert np.all((result.scores > 0) & (result.scores < 1))
        assert result.curve.auprc == ev.pr_curve(result.scores, labels).auprc

    def test_deterministic(self, tiny_cv):
        result, _ = tiny_cv
        synth = data.generate_synthetic(data.SynthConfig(n_per_class=4, seed=5, size=32))
        again = ev.cross_validate(
            data.to_batch(synth.images, 32), synth.labels, "se_resnext",
            TrainConfig(schedule=ScheduleConfig(total_epochs=1)), seed=1, k=2,
            scale=blocks.NetworkScale(width_multiplier=0.25, se_reduction=4),
        )
        assert again.scores.tobytes() == result.scores.tobytes()

    def test_average_excludes_undefined(self):
        recs = [
            ev.MetricsRecord(50, None, None, 50, None, 50),
            ev.MetricsRecord(100, 100, 100, 100, 100, 100),
        ]
        avg = ev.average_records(recs)
        assert avg.accuracy == 75 and avg.sensitivity == 100
        assert avg.excluded == {"f1": 1, "sensitivity": 1, "ppv": 1, "auprc": 2}


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

FIXTURE = ev.MetricsRecord(accuracy=72.88, f1=78.26, sensitivity=82.64, specificity=58.12, ppv=76.35, npv=68.63)


class TestReport:
    def test_fixture_column(self):
        text = ev.render_report({"SE-ResNext50": FIXTURE})
        parsed = ev.parse_report(text)["SE-ResNext50"]
        assert [parsed[k] for k in METRICS] == [72.88, 78.26, 82.64, 58.12, 76.35, 68.63]
        for v in ("72.88", "78.26", "82.64", "58.12", "76.35", "68.63"):
            assert f"{v}*" in text

    def test_single_record_best_everywhere(self):
        text = ev.render_report({"net": FIXTURE})
        body = text.splitlines()[2:8]
        assert all(line.rstrip().endswith("*") for line in body)

    @given(st.lists(st.lists(st.floats(0, 100) | st.none(), min_size=6, max_size=6), min_size=1, max_size=5))
    def test_best_flag_matches_argmax(self, rows):
        records = {f"n{i}": ev.MetricsRecord(*r) for i, r in enumerate(rows)}
        text = ev.render_report(records)
        lines = text.splitlines()
        names = list(records)
        for row_idx, key in enumerate(METRICS):
            cells = lines[2 + row_idx].split()[-len(names):]
            shown = [None if getattr(records[n], key) is None else round(getattr(records[n], key), 2) for n in names]
            shown = [None if v is None else float(f"{v:.2f}") for v in shown]
            best = max((v for v in shown if v is not None), default=None)
            for cell, v in zip(cells, shown):
                assert cell.endswith("*") == (v is not None and v == best)

    @given(st.lists(st.floats(0, 100), min_size=6, max_size=6))
    def test_round_trip(self, vals):
        text = ev.render_report({"a": ev.MetricsRecord(*vals)})
        parsed = ev.parse_report(text)["a"]
        for k, v in zip(METRICS, vals):
            assert parsed[k] == float(f"{v:.2f}")

    def test_undefined_and_footnote(self):
        rec = ev.MetricsRecord(50.0, None, None, 50.0, None, 50.0, excluded={"sensitivity": 2})
        text = ev.render_report({"x": rec})
        assert ev.UNDEFINED in text
        assert "x: sensitivity undefined in 2 fold(s)" in text
        assert ev.parse_report(text)["x"]["f1"] is None

    def test_empty(self):
        with pytest.raises(ValidationError):
            ev.render_report({})
