"""Sorting loop behaviour: trigger detection, deadline handling, rate and
error accounting, FIFO storage, threshold sweeps, and the CSV logs."""

import collections
import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dropsort import cnn, sorter
from dropsort.scenarios import truth_from_counts
from dropsort.sorter import (ClassifierOutput, DropletEvent,
                             ErrorStubClassifier, KindOracleClassifier,
                             OracleClassifier, SortDecision, StorageLine,
                             TimingModel, TriggerConfig,
                             TwoModelAndClassifier)
from dropsort.synth import ObjectKind


def label_stream(labels, period_ms=25.0):
    return [DropletEvent(i, (i + 1) * period_ms, int(y))
            for i, y in enumerate(labels)]


def _prediction(probs):
    probs = np.asarray(probs, dtype=float)
    amax = int(np.argmax(probs))
    return cnn.Prediction(probs=probs, argmax=amax,
                          confidence=float(probs[amax]))


class TestTrace:
    def test_trigger_round_trip(self):
        times = [10.0, 40.0, 80.0]
        trace = sorter.synthesize_trace(times)
        got = sorter.detect_triggers(trace, TriggerConfig(threshold=0.5))
        assert got == pytest.approx(times, abs=1e-9)

    def test_pass_times_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            sorter.synthesize_trace([10.0, 10.0])

    def test_close_passes_warn(self):
        with pytest.warns(UserWarning, match="refractory"):
            sorter.synthesize_trace([10.0, 12.0])

    def test_refractory_merges_close_triggers(self):
        trace = sorter.synthesize_trace([10.0, 13.0], refractory_hint_ms=0.0)
        merged = sorter.detect_triggers(
            trace, TriggerConfig(threshold=0.5, refractory_ms=5.0))
        split = sorter.detect_triggers(
            trace, TriggerConfig(threshold=0.5, refractory_ms=1.0))
        assert merged == pytest.approx([10.0])
        assert split == pytest.approx([10.0, 13.0])

    def test_trace_starting_above_threshold(self):
        trace = sorter.PhotodetectorTrace(
            sample_rate=1000.0, samples=np.array([1.0, 1.0, 0.0, 1.0]))
        got = sorter.detect_triggers(
            trace, TriggerConfig(threshold=0.5, refractory_ms=0.0))
        assert got == pytest.approx([0.0, 3.0])

    def test_noise_is_seeded(self):
        a = sorter.synthesize_trace([10.0], noise_sigma=0.2, seed=5)
        b = sorter.synthesize_trace([10.0], noise_sigma=0.2, seed=5)
        assert np.array_equal(a.samples, b.samples)

    def test_non_finite_samples_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            sorter.PhotodetectorTrace(sample_rate=1000.0,
                                      samples=np.array([0.0, np.nan]))

    def test_negative_refractory_rejected(self):
        with pytest.raises(ValueError):
            TriggerConfig(threshold=0.5, refractory_ms=-1.0)


class TestTimingModel:
    def test_default_headroom_equals_deadline(self):
        t = TimingModel()
        assert t.junction_headroom_ms() == pytest.approx(12.0)
        assert t.deadline_ms == 12.0

    def test_deadline_must_be_positive(self):
        with pytest.raises(ValueError):
            TimingModel(deadline_ms=0.0)

    def test_timed_out_accept_is_contradictory(self):
        with pytest.raises(ValueError):
            SortDecision(droplet_id=0, predicted_class=1, confidence=1.0,
                         accepted=True, latency_ms=99.0, timed_out=True,
                         t_trigger_ms=25.0, true_label=1)


class TestStorage:
    def test_fifo_order_and_eviction(self):
        line = StorageLine(capacity=3)
        assert [line.push(i) for i in (1, 2, 3)] == [None, None, None]
        assert line.push(4) == 1
        assert line.contents == (2, 3, 4)
        assert line.pop() == 2
        assert len(line) == 2

    def test_store_helper_delegates(self):
        line = StorageLine(capacity=1)
        assert sorter.store(line, 7) is None
        assert sorter.store(line, 8) == 7

    def test_pop_empty_raises(self):
        with pytest.raises(IndexError, match="empty"):
            StorageLine(capacity=2).pop()

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            StorageLine(capacity=0)

    @given(st.lists(st.integers(min_value=0, max_value=999), max_size=200))
    def test_matches_bounded_deque_model(self, ids):
        cap = 30
        line = StorageLine(capacity=cap)
        model = collections.deque(maxlen=cap)
        for i in ids:
            expected_evict = model[0] if len(model) == cap else None
            assert line.push(i) == expected_evict
            model.append(i)
            assert line.contents == tuple(model)
            assert len(line) <= cap

    @given(st.lists(st.one_of(st.integers(min_value=0, max_value=99),
                              st.none()), max_size=150))
    def test_interleaved_pops(self, ops):
        line = StorageLine(capacity=5)
        model = collections.deque()
        for op in ops:
            if op is None:
                if model:
                    assert line.pop() == model.popleft()
                else:
                    with pytest.raises(IndexError):
                        line.pop()
            else:
                evicted = line.push(op)
                model.append(op)
                assert evicted == (model.popleft() if len(model) > 5
                                   else None)
            assert line.contents == tuple(model)


class TestClassifiers:
    def test_oracle_is_one_hot_on_truth(self):
        out = OracleClassifier()(DropletEvent(0, 25.0, 2))
        assert out.prediction.argmax == 2
        assert out.prediction.confidence == 1.0
        assert out.accept is None

    def test_kind_oracle_reads_counts(self):
        gt = truth_from_counts({ObjectKind.MCF7_CELL: 1,
                                ObjectKind.PA_BEAD: 3})
        clf = KindOracleClassifier(ObjectKind.PA_BEAD)
        out = clf(DropletEvent(0, 25.0, 1, ground_truth=gt))
        assert out.prediction.argmax == 2  # three beads clip to "multiple"
        assert KindOracleClassifier(ObjectKind.MCF7_CELL)(
            DropletEvent(1, 50.0, 1, ground_truth=gt)).prediction.argmax == 1

    def test_kind_oracle_requires_ground_truth(self):
        with pytest.raises(ValueError, match="ground truth"):
            KindOracleClassifier(ObjectKind.PA_BEAD)(DropletEvent(0, 25.0, 1))

    def test_error_stub_is_deterministic(self):
        stream = label_stream([1, 0] * 50)
        runs = []
        for _ in range(2):
            clf = ErrorStubClassifier(1, 0.8, 0.1, seed=3)
            runs.append([clf(e).accept for e in stream])
        assert runs[0] == runs[1]

    def test_error_stub_perfect_rates_match_truth(self):
        stream = label_stream([0, 1, 2, 1, 0, 1])
        clf = ErrorStubClassifier(1, sensitivity=1.0, false_accept=0.0,
                                  seed=0)
        assert [clf(e).accept for e in stream] == [
            e.true_label == 1 for e in stream]

    def test_error_stub_rates_within_mc_noise(self):
        n = 2000
        clf = ErrorStubClassifier(1, 0.8, 0.1, seed=42)
        hits = sum(clf(e).accept for e in label_stream([1] * n))
        clf = ErrorStubClassifier(1, 0.8, 0.1, seed=43)
        false = sum(clf(e).accept for e in label_stream([0] * n))
        assert abs(hits / n - 0.8) < 3 * np.sqrt(0.8 * 0.2 / n)
        assert abs(false / n - 0.1) < 3 * np.sqrt(0.1 * 0.9 / n)

    def test_error_stub_rejects_bad_rates(self):
        with pytest.raises(ValueError):
            ErrorStubClassifier(1, 1.2, 0.0, seed=0)

    @pytest.mark.parametrize("counts, expect", [
        ({ObjectKind.MCF7_CELL: 1, ObjectKind.PA_BEAD: 1}, True),
        ({ObjectKind.MCF7_CELL: 1}, False),
        ({ObjectKind.MCF7_CELL: 2, ObjectKind.PA_BEAD: 1}, False),
        ({}, False),
    ])
    def test_two_model_and(self, counts, expect):
        clf = TwoModelAndClassifier(
            KindOracleClassifier(ObjectKind.MCF7_CELL), 1, 0.9,
            KindOracleClassifier(ObjectKind.PA_BEAD), 1, 0.9)
        gt = truth_from_counts(counts)
        out = clf(DropletEvent(0, 25.0, 0, ground_truth=gt))
        assert out.accept is expect
        # reported prediction comes from the first model
        assert out.prediction.argmax == min(
            counts.get(ObjectKind.MCF7_CELL, 0), 2)

    def test_two_model_and_honours_accept_overrides(self):
        gt = truth_from_counts({ObjectKind.MCF7_CELL: 1,
                                ObjectKind.PA_BEAD: 1})
        clf = TwoModelAndClassifier(
            ErrorStubClassifier(1, 1.0, 0.0, seed=0), 1, 0.9,
            KindOracleClassifier(ObjectKind.PA_BEAD), 1, 0.9)
        out = clf(DropletEvent(0, 25.0, 1, ground_truth=gt))
        assert out.accept is True


class _ForcedAccept:
    """Low-confidence wrong-class prediction with an explicit accept flag."""

    def __call__(self, event):
        return ClassifierOutput(prediction=_prediction([0.2, 0.5, 0.3]),
                                accept=True)


class TestRunSort:
    def test_theta_bounds(self):
        with pytest.raises(ValueError, match="theta"):
            sorter.run_sort([], OracleClassifier(), 1, 1.5, TimingModel(),
                            StorageLine())

    def test_out_of_order_stream_rejected(self):
        stream = [DropletEvent(0, 50.0, 1), DropletEvent(1, 25.0, 1)]
        with pytest.raises(ValueError, match="out of order"):
            sorter.run_sort(stream, OracleClassifier(), 1, 0.5,
                            TimingModel(), StorageLine())

    def test_duplicate_id_rejected(self):
        stream = [DropletEvent(3, 25.0, 1), DropletEvent(3, 50.0, 1)]
        with pytest.raises(ValueError, match="duplicate"):
            sorter.run_sort(stream, OracleClassifier(), 1, 0.5,
                            TimingModel(), StorageLine())

    def test_slow_inference_times_out_every_droplet(self):
        stream = label_stream([1] * 20)
        decisions, report, pulses = sorter.run_sort(
            stream, OracleClassifier(infer_ms=20.0), 1, 0.5, TimingModel(),
            StorageLine())
        assert report.timeout_count == 20
        assert report.n_sorted == 0 and pulses == []
        assert all(d.timed_out and not d.accepted for d in decisions)

    def test_latency_equal_to_deadline_is_in_time(self):
        stream = label_stream([1])
        decisions, report, _ = sorter.run_sort(
            stream, OracleClassifier(infer_ms=11.0), 1, 0.5, TimingModel(),
            StorageLine())
        assert decisions[0].latency_ms == pytest.approx(12.0)
        assert not decisions[0].timed_out and decisions[0].accepted
        assert report.timeout_count == 0

    def test_forty_hz_rate_is_exact(self):
        stream = label_stream([1] * 400, period_ms=25.0)
        _, report, _ = sorter.run_sort(stream, OracleClassifier(), 1, 0.5,
                                       TimingModel(), StorageLine())
        assert report.achieved_rate_hz == 40.0
        assert report.timeout_count == 0

    def test_accept_override_bypasses_threshold(self):
        stream = label_stream([0])
        decisions, _, _ = sorter.run_sort(stream, _ForcedAccept(), 0, 0.99,
                                          TimingModel(), StorageLine())
        assert decisions[0].accepted
        assert decisions[0].predicted_class == 1  # not the target class

    def test_conservation_identities(self):
        rng = np.random.default_rng(0)
        stream = label_stream(rng.integers(0, 3, size=200))
        clf = ErrorStubClassifier(1, 0.9, 0.2, seed=1)
        decisions, report, pulses = sorter.run_sort(
            stream, clf, 1, 0.9, TimingModel(), StorageLine(capacity=500))
        n_accept = sum(d.accepted for d in decisions)
        assert report.n_screened == 200
        assert report.n_sorted == n_accept == len(pulses)
        if report.n_sorted:
            assert report.fp_of_sorted == pytest.approx(
                1.0 - report.purity_after)
        assert report.fn_of_screened == pytest.approx(
            report.fn_count / report.n_screened)

    def test_pulse_overlap_counting(self):
        stream = label_stream([1] * 5, period_ms=25.0)
        _, clear, _ = sorter.run_sort(stream, OracleClassifier(), 1, 0.5,
                                      TimingModel(), StorageLine())
        _, packed, _ = sorter.run_sort(stream, OracleClassifier(), 1, 0.5,
                                       TimingModel(pulse_ms=30.0),
                                       StorageLine())
        assert clear.pulse_overlap_count == 0
        assert packed.pulse_overlap_count == 4

    def test_storage_receives_accepted_ids(self):
        stream = label_stream([1] * 5)
        line = StorageLine(capacity=3)
        sorter.run_sort(stream, OracleClassifier(), 1, 0.5, TimingModel(),
                        line)
        assert line.contents == (2, 3, 4)

    def test_empty_stream(self):
        decisions, report, pulses = sorter.run_sort(
            [], OracleClassifier(), 1, 0.5, TimingModel(), StorageLine())
        assert decisions == [] and pulses == []
        assert report.n_screened == 0
        assert report.achieved_rate_hz == 0.0


class TestComputeRates:
    @staticmethod
    def _decision(i, accepted, label):
        return SortDecision(droplet_id=i, predicted_class=1 if accepted
                            else 0, confidence=1.0, accepted=accepted,
                            latency_ms=6.0, timed_out=False,
                            t_trigger_ms=25.0 * (i + 1), true_label=label)

    def test_hand_checked_counts(self):
        labels = {0: 1, 1: 0, 2: 1, 3: 0, 4: 1}
        decisions = [self._decision(i, acc, labels[i])
                     for i, acc in enumerate([True, True, False, False,
                                              True])]
        rep = sorter.compute_rates(decisions, labels, target_class=1)
        assert (rep.fp_count, rep.fn_count, rep.n_sorted) == (1, 1, 3)
        assert rep.fp_of_sorted == pytest.approx(1 / 3)
        assert rep.fn_of_screened == pytest.approx(0.2)
        assert rep.purity_before == pytest.approx(0.6)
        assert rep.purity_after == pytest.approx(2 / 3)
        assert rep.enrichment == pytest.approx((2 / 3) / 0.6)

    def test_missing_truth_rejected(self):
        d = self._decision(0, True, 1)
        with pytest.raises(ValueError, match="ground truth"):
            sorter.compute_rates([d], {}, 1)

    def test_single_decision_has_no_rate(self):
        d = self._decision(0, True, 1)
        rep = sorter.compute_rates([d], {0: 1}, 1)
        assert rep.achieved_rate_hz == 0.0


class _SeededConfidence:
    """Dirichlet prediction keyed to the droplet id; stable across calls."""

    def __call__(self, event):
        rng = np.random.default_rng(event.droplet_id)
        return ClassifierOutput(prediction=_prediction(
            rng.dirichlet(np.ones(3))))


class TestThresholdSweep:
    def test_counts_move_monotonically(self):
        stream = label_stream(np.random.default_rng(1).integers(0, 3, 300))
        rows = sorter.threshold_sweep(stream, _SeededConfidence(), 1,
                                      [0.0, 0.5, 0.7, 0.9])
        sorted_counts = [r["sorted_count"] for r in rows]
        fn_counts = [r["fn_count"] for r in rows]
        assert sorted_counts == sorted(sorted_counts, reverse=True)
        assert fn_counts == sorted(fn_counts)
        assert set(rows[0]) == {"theta", "fp_count", "fn_count",
                                "sorted_count", "fp_of_sorted",
                                "fn_of_screened"}

    def test_unsorted_thetas_rejected(self):
        with pytest.raises(ValueError, match="ascending"):
            sorter.threshold_sweep([], _SeededConfidence(), 1, [0.9, 0.5])

    def test_theta_zero_accepts_every_target_argmax(self):
        stream = label_stream(np.random.default_rng(2).integers(0, 3, 100))
        clf = _SeededConfidence()
        rows = sorter.threshold_sweep(stream, clf, 1, [0.0])
        expect = sum(clf(e).prediction.argmax == 1 for e in stream)
        assert rows[0]["sorted_count"] == expect


class TestStageLatencies:
    def test_zero_repetitions_yield_nothing(self):
        assert sorter.measure_stage_latencies([128], 0) == []

    def test_row_schema(self):
        rows = sorter.measure_stage_latencies([24, 40], 2, seed=0)
        assert len(rows) == 8
        assert {r["image_px"] for r in rows} == {24, 40}
        assert {r["stage"] for r in rows} == {"grab-sim", "preprocess",
                                              "inference", "save"}
        for r in rows:
            assert r["reps"] == 2
            assert 0.0 <= r["p50_ms"] <= r["p99_ms"]
            assert r["mean_ms"] >= 0.0


class TestWriters:
    def test_decision_log_round_trip(self, tmp_path):
        stream = label_stream([1, 0, 1])
        decisions, report, pulses = sorter.run_sort(
            stream, OracleClassifier(), 1, 0.5, TimingModel(), StorageLine())
        p = tmp_path / "decisions.csv"
        sorter.write_decision_log(decisions, p)
        with open(p, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert rows[0]["accepted"] == "true" and rows[1]["accepted"] == "false"
        assert [int(r["id"]) for r in rows] == [0, 1, 2]
        assert float(rows[2]["latency_ms"]) == decisions[2].latency_ms

        sorter.write_run_report(report, tmp_path / "report.csv")
        with open(tmp_path / "report.csv", newline="") as fh:
            kv = {r["key"]: r["value"] for r in csv.DictReader(fh)}
        assert set(kv) == set(vars(report))
        assert int(kv["n_sorted"]) == report.n_sorted

        sorter.write_pulse_events(pulses, tmp_path / "pulses.csv")
        with open(tmp_path / "pulses.csv", newline="") as fh:
            prow = list(csv.DictReader(fh))
        assert len(prow) == report.n_sorted
        assert float(prow[0]["t_start_ms"]) == pulses[0].t_start_ms

    def test_sweep_and_latency_tables(self, tmp_path):
        stream = label_stream([1, 0, 2, 1])
        rows = sorter.threshold_sweep(stream, OracleClassifier(), 1,
                                      [0.0, 0.9])
        sorter.write_sweep_table(rows, tmp_path / "sweep.csv")
        with open(tmp_path / "sweep.csv", newline="") as fh:
            got = list(csv.DictReader(fh))
        assert [float(r["theta"]) for r in got] == [0.0, 0.9]

        lat = sorter.measure_stage_latencies([24], 1)
        sorter.write_latency_table(lat, tmp_path / "latency.csv")
        with open(tmp_path / "latency.csv", newline="") as fh:
            got = list(csv.DictReader(fh))
        assert len(got) == 4 and got[0]["image_px"] == "24"
