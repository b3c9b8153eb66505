"""Virtual-clock simulation of the real-time sorting loop.

Photodetector triggering, deadline-bound classification, deflection
pulse events, and a FIFO storage line. All pipeline timing runs on a
virtual clock advanced by modeled latencies, so runs are deterministic;
only measure_stage_latencies touches the wall clock.

Rate conventions: a false positive is an accepted droplet whose true
class is not the target, counted as a fraction of sorted droplets; a
false negative is a missed true target, counted as a fraction of all
screened droplets.
"""

from __future__ import annotations

import collections
import csv
import io
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import cnn
from .imgproc import Frame
from .synth import GroundTruth, ObjectKind, label_of


@dataclass(frozen=True)
class PhotodetectorTrace:
    sample_rate: float  # samples per second
    samples: np.ndarray
    t0_ms: float = 0.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace contains non-finite samples")


@dataclass(frozen=True)
class TriggerConfig:
    threshold: float
    refractory_ms: float = 5.0

    def __post_init__(self):
        if self.refractory_ms < 0:
            raise ValueError("refractory_ms must be non-negative")


@dataclass(frozen=True)
class DropletEvent:
    droplet_id: int
    t_trigger_ms: float
    true_label: int
    ground_truth: GroundTruth | None = None
    frame: Frame | None = None


@dataclass(frozen=True)
class TimingModel:
    grab_ms: float = 1.0
    infer_ms: float = 5.0
    deadline_ms: float = 12.0
    pulse_ms: float = 15.0
    pulse_freq_hz: float = 10_000.0  # metadata on the pulse record only
    imaging_to_junction_offset_um: float = 450.0
    # speed is unstated upstream; default makes offset/speed = deadline
    droplet_speed_um_per_ms: float = 37.5
    save_ms: float = 22.0

    def __post_init__(self):
        if self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be positive")

    def junction_headroom_ms(self) -> float:
        return self.imaging_to_junction_offset_um / self.droplet_speed_um_per_ms


@dataclass(frozen=True)
class SortDecision:
    droplet_id: int
    predicted_class: int
    confidence: float
    accepted: bool
    latency_ms: float
    timed_out: bool
    t_trigger_ms: float
    true_label: int

    def __post_init__(self):
        if self.timed_out and self.accepted:
            raise ValueError("a timed-out droplet can never be accepted")


@dataclass(frozen=True)
class PulseEvent:
    droplet_id: int
    t_start_ms: float
    duration_ms: float
    freq_hz: float


class StorageLine:
    """Bounded FIFO of sorted droplet ids; oldest is pushed out when full."""

    def __init__(self, capacity: int = 30):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items: collections.deque[int] = collections.deque()

    def push(self, droplet_id: int) -> int | None:
        self._items.append(droplet_id)
        if len(self._items) > self.capacity:
            return self._items.popleft()
        return None

    def pop(self) -> int:
        if not self._items:
            raise IndexError("storage line is empty")
        return self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def contents(self) -> tuple[int, ...]:
        return tuple(self._items)


def store(line: StorageLine, droplet_id: int) -> int | None:
    """Append to the storage line; returns the evicted id if any."""
    return line.push(droplet_id)


@dataclass(frozen=True)
class RunReport:
    n_screened: int
    n_sorted: int
    fp_count: int
    fn_count: int
    fp_of_sorted: float
    fn_of_screened: float
    purity_before: float
    purity_after: float
    enrichment: float
    achieved_rate_hz: float
    latency_mean_ms: float
    latency_p99_ms: float
    timeout_count: int
    pulse_overlap_count: int = 0


@dataclass(frozen=True)
class ClassifierOutput:
    prediction: cnn.Prediction
    infer_ms: float | None = None  # None -> TimingModel constant
    accept: bool | None = None  # None -> argmax/threshold rule


def _one_hot_prediction(n_classes: int, cls: int, confidence: float = 1.0):
    probs = np.full(n_classes, (1.0 - confidence) / (n_classes - 1))
    probs[cls] = confidence
    return cnn.Prediction(probs=probs, argmax=cls, confidence=float(probs[cls]))


class OracleClassifier:
    """Predicts the true label with full confidence."""

    def __init__(self, n_classes: int = 3, infer_ms: float | None = None):
        self.n_classes = n_classes
        self.infer_ms = infer_ms

    def __call__(self, event: DropletEvent) -> ClassifierOutput:
        return ClassifierOutput(
            prediction=_one_hot_prediction(self.n_classes, event.true_label),
            infer_ms=self.infer_ms)


class KindOracleClassifier:
    """Predicts the empty/single/multiple class of one object kind,
    read straight from ground-truth counts."""

    def __init__(self, kind: ObjectKind, n_classes: int = 3,
                 infer_ms: float | None = None):
        self.kind = kind
        self.n_classes = n_classes
        self.infer_ms = infer_ms

    def __call__(self, event: DropletEvent) -> ClassifierOutput:
        if event.ground_truth is None:
            raise ValueError(
                f"droplet {event.droplet_id} carries no ground truth")
        cls = label_of(event.ground_truth, self.kind)
        return ClassifierOutput(
            prediction=_one_hot_prediction(self.n_classes, cls),
            infer_ms=self.infer_ms)


class ErrorStubClassifier:
    """Accepts true targets w.p. sensitivity, others w.p. false_accept.

    Decisions come out as explicit accept flags with matching one-hot
    predictions; draws are seeded and consumed in stream order.
    """

    def __init__(self, target_class: int, sensitivity: float,
                 false_accept: float, seed: int, n_classes: int = 3,
                 infer_ms: float | None = None):
        if not 0 <= sensitivity <= 1 or not 0 <= false_accept <= 1:
            raise ValueError("rates must lie in [0, 1]")
        self.target_class = target_class
        self.sensitivity = sensitivity
        self.false_accept = false_accept
        self.n_classes = n_classes
        self.infer_ms = infer_ms
        self._rng = np.random.default_rng(seed)

    def __call__(self, event: DropletEvent) -> ClassifierOutput:
        u = self._rng.random()
        if event.true_label == self.target_class:
            accept = u < self.sensitivity
        else:
            accept = u < self.false_accept
        cls = self.target_class if accept else (
            event.true_label if event.true_label != self.target_class
            else (self.target_class + 1) % self.n_classes)
        return ClassifierOutput(
            prediction=_one_hot_prediction(self.n_classes, cls),
            infer_ms=self.infer_ms, accept=accept)


class CnnClassifier:
    """Wraps a trained network; optional preprocess maps Frame -> array."""

    def __init__(self, params: cnn.Params, cfg: cnn.NetworkConfig,
                 preprocess: Callable | None = None,
                 infer_ms: float | None = None):
        self.params = params
        self.cfg = cfg
        self.preprocess = preprocess
        self.infer_ms = infer_ms

    def __call__(self, event: DropletEvent) -> ClassifierOutput:
        if event.frame is None:
            raise ValueError(f"droplet {event.droplet_id} carries no frame")
        image = self.preprocess(event.frame) if self.preprocess else event.frame
        pred = cnn.forward(self.params, self.cfg, image)
        return ClassifierOutput(prediction=pred, infer_ms=self.infer_ms)


class TwoModelAndClassifier:
    """Deflects only when both wrapped classifiers accept (their own
    targets and thresholds); reported prediction is the first model's."""

    def __init__(self, first, first_target: int, first_theta: float,
                 second, second_target: int, second_theta: float,
                 infer_ms: float | None = None):
        self.first, self.second = first, second
        self.first_target, self.second_target = first_target, second_target
        self.first_theta, self.second_theta = first_theta, second_theta
        self.infer_ms = infer_ms

    @staticmethod
    def _accepts(out: ClassifierOutput, target: int, theta: float) -> bool:
        if out.accept is not None:
            return out.accept
        p = out.prediction
        return p.argmax == target and p.confidence >= theta

    def __call__(self, event: DropletEvent) -> ClassifierOutput:
        out_a = self.first(event)
        out_b = self.second(event)
        both = cnn.combine_and(
            self._accepts(out_a, self.first_target, self.first_theta),
            self._accepts(out_b, self.second_target, self.second_theta))
        return ClassifierOutput(prediction=out_a.prediction,
                                infer_ms=self.infer_ms, accept=both)


def synthesize_trace(pass_times_ms: Sequence[float], *, amplitude: float = 1.0,
                     width_ms: float = 2.0, noise_sigma: float = 0.0,
                     sample_rate: float = 50_000.0, duration_ms: float | None = None,
                     refractory_hint_ms: float = 5.0,
                     seed=0) -> PhotodetectorTrace:
    """Rectangular excursions above a zero baseline, one per droplet."""
    times = list(pass_times_ms)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("pass times must be strictly increasing")
    for a, b in zip(times, times[1:]):
        if b - a < refractory_hint_ms:
            warnings.warn(f"droplet passes at {a} and {b} ms are closer than "
                          f"the {refractory_hint_ms} ms refractory window")
    if duration_ms is None:
        duration_ms = (times[-1] + width_ms + 5.0) if times else 10.0
    n = int(round(duration_ms * sample_rate / 1000.0)) + 1
    samples = np.zeros(n)
    for t in times:
        i0 = int(round(t * sample_rate / 1000.0))
        i1 = int(round((t + width_ms) * sample_rate / 1000.0))
        samples[max(0, i0):min(n, i1)] += amplitude
    if noise_sigma > 0:
        samples += np.random.default_rng(seed).normal(0, noise_sigma, n)
    return PhotodetectorTrace(sample_rate=sample_rate, samples=samples)


def detect_triggers(trace: PhotodetectorTrace, cfg: TriggerConfig) -> list[float]:
    """Trigger times (ms) at rising threshold crossings, with refractory."""
    above = trace.samples > cfg.threshold
    rising = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    if above.size and above[0]:
        rising = np.concatenate([[0], rising])
    ms_per_sample = 1000.0 / trace.sample_rate
    out: list[float] = []
    for i in rising:
        t = trace.t0_ms + i * ms_per_sample
        if not out or t - out[-1] >= cfg.refractory_ms:
            out.append(t)
    return out


def compute_rates(decisions: Sequence[SortDecision],
                  true_labels: Mapping[int, int],
                  target_class: int) -> RunReport:
    """Rates per the sorted-fraction FP and screened-fraction FN rules."""
    for d in decisions:
        if d.droplet_id not in true_labels:
            raise ValueError(f"no ground truth for droplet {d.droplet_id}")
    n = len(decisions)
    sorted_ds = [d for d in decisions if d.accepted]
    n_sorted = len(sorted_ds)
    fp = sum(1 for d in sorted_ds if true_labels[d.droplet_id] != target_class)
    fn = sum(1 for d in decisions
             if not d.accepted and true_labels[d.droplet_id] == target_class)
    n_true = sum(1 for d in decisions
                 if true_labels[d.droplet_id] == target_class)
    purity_before = n_true / n if n else 0.0
    purity_after = (n_sorted - fp) / n_sorted if n_sorted else 0.0
    enrichment = purity_after / purity_before if purity_before > 0 else 0.0
    lat = np.array([d.latency_ms for d in decisions]) if n else np.zeros(1)
    if n >= 2:
        span = decisions[-1].t_trigger_ms - decisions[0].t_trigger_ms
        rate = 1000.0 * (n - 1) / span if span > 0 else 0.0
    else:
        rate = 0.0
    return RunReport(
        n_screened=n, n_sorted=n_sorted, fp_count=fp, fn_count=fn,
        fp_of_sorted=fp / n_sorted if n_sorted else 0.0,
        fn_of_screened=fn / n if n else 0.0,
        purity_before=purity_before, purity_after=purity_after,
        enrichment=enrichment, achieved_rate_hz=rate,
        latency_mean_ms=float(lat.mean()), latency_p99_ms=float(np.percentile(lat, 99)),
        timeout_count=sum(1 for d in decisions if d.timed_out),
    )


def run_sort(stream: Sequence[DropletEvent], classifier, target_class: int,
             theta: float, timing: TimingModel,
             storage: StorageLine) -> tuple[list[SortDecision], RunReport,
                                            list[PulseEvent]]:
    """Simulate the loop over a time-ordered droplet stream.

    Per droplet the virtual clock advances by grab plus inference time;
    past the deadline the decision is a timed-out reject. Accepted
    droplets emit a deflection pulse and enter the storage FIFO.
    """
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")
    decisions: list[SortDecision] = []
    pulses: list[PulseEvent] = []
    truths: dict[int, int] = {}
    last_t = -np.inf
    for event in stream:
        if event.t_trigger_ms <= last_t:
            raise ValueError(
                f"droplet {event.droplet_id} out of order "
                f"({event.t_trigger_ms} ms after {last_t} ms)")
        last_t = event.t_trigger_ms
        if event.droplet_id in truths:
            raise ValueError(f"duplicate droplet id {event.droplet_id}")
        truths[event.droplet_id] = event.true_label

        out = classifier(event)
        infer = timing.infer_ms if out.infer_ms is None else out.infer_ms
        latency = timing.grab_ms + infer
        pred = out.prediction
        if latency > timing.deadline_ms:
            accepted, timed_out = False, True
        else:
            timed_out = False
            if out.accept is not None:
                accepted = out.accept
            else:
                accepted = (pred.argmax == target_class
                            and pred.confidence >= theta)
        decisions.append(SortDecision(
            droplet_id=event.droplet_id, predicted_class=pred.argmax,
            confidence=pred.confidence, accepted=accepted,
            latency_ms=latency, timed_out=timed_out,
            t_trigger_ms=event.t_trigger_ms, true_label=event.true_label))
        if accepted:
            pulses.append(PulseEvent(
                droplet_id=event.droplet_id,
                t_start_ms=event.t_trigger_ms + latency,
                duration_ms=timing.pulse_ms, freq_hz=timing.pulse_freq_hz))
            storage.push(event.droplet_id)

    overlaps = sum(1 for a, b in zip(pulses, pulses[1:])
                   if b.t_start_ms < a.t_start_ms + a.duration_ms)
    report = replace(compute_rates(decisions, truths, target_class),
                     pulse_overlap_count=overlaps)
    return decisions, report, pulses


def threshold_sweep(stream: Sequence[DropletEvent], classifier,
                    target_class: int, thetas: Sequence[float]) -> list[dict]:
    """Counts at each theta on one frozen set of predictions."""
    if any(b < a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("thetas must be sorted ascending")
    preds = [(classifier(e).prediction, e.true_label) for e in stream]
    n = len(preds)
    rows = []
    for theta in thetas:
        accepted = [(p.argmax == target_class and p.confidence >= theta, y)
                    for p, y in preds]
        n_sorted = sum(1 for a, _ in accepted if a)
        fp = sum(1 for a, y in accepted if a and y != target_class)
        fn = sum(1 for a, y in accepted if not a and y == target_class)
        rows.append({"theta": theta, "fp_count": fp, "fn_count": fn,
                     "sorted_count": n_sorted,
                     "fp_of_sorted": fp / n_sorted if n_sorted else 0.0,
                     "fn_of_screened": fn / n if n else 0.0})
    return rows


def measure_stage_latencies(image_sizes: Sequence[int], repetitions: int,
                            seed: int = 0, out_dir=None) -> list[dict]:
    """Wall-clock per-stage timings (grab-sim, preprocess, inference, save).

    Networks use randomly initialized weights; the arithmetic cost is
    identical to a trained model's. Returns one row per size and stage
    with mean/p50/p99 milliseconds.
    """
    from . import imgproc  # local import keeps module load light
    from .pgmio import write_pgm

    if repetitions <= 0:
        return []
    rng = np.random.default_rng(seed)
    rows = []
    for size in image_sizes:
        kernel = 15 if size >= 106 else max(3, (size // 8) | 1)
        cfg = cnn.NetworkConfig(
            input_px=size,
            conv_layers=(cnn.ConvSpec(kernel, 8), cnn.ConvSpec(kernel, 16),
                         cnn.ConvSpec(kernel, 32)))
        params = cnn.init_params(cfg, seed)
        raw = rng.uniform(0, 255, (size, size))
        stage_samples = {s: [] for s in ("grab-sim", "preprocess",
                                         "inference", "save")}
        for _ in range(repetitions):
            t0 = time.perf_counter()
            grabbed = raw.copy()
            t1 = time.perf_counter()
            frame = imgproc.Frame(pixels=grabbed, um_per_px=1.0)
            norm = imgproc.normalize(frame)
            t2 = time.perf_counter()
            cnn.forward(params, cfg, norm.pixels)
            t3 = time.perf_counter()
            if out_dir is not None:
                write_pgm(Path(out_dir) / f"bench_{size}.pgm", grabbed)
            else:
                buf = io.BytesIO()
                buf.write(b"P5\n%d %d\n255\n" % (size, size))
                buf.write(np.clip(grabbed, 0, 255).astype(np.uint8).tobytes())
            t4 = time.perf_counter()
            stage_samples["grab-sim"].append(t1 - t0)
            stage_samples["preprocess"].append(t2 - t1)
            stage_samples["inference"].append(t3 - t2)
            stage_samples["save"].append(t4 - t3)
        for stage, samples in stage_samples.items():
            ms = np.array(samples) * 1000.0
            rows.append({"image_px": size, "stage": stage,
                         "mean_ms": float(ms.mean()),
                         "p50_ms": float(np.percentile(ms, 50)),
                         "p99_ms": float(np.percentile(ms, 99)),
                         "reps": repetitions})
    return rows


def _bool_str(v: bool) -> str:
    return "true" if v else "false"


def write_decision_log(decisions: Sequence[SortDecision], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t_trigger_ms", "class", "confidence", "accepted",
                    "latency_ms", "timed_out", "true_label"])
        for d in decisions:
            w.writerow([d.droplet_id, repr(d.t_trigger_ms), d.predicted_class,
                        repr(d.confidence), _bool_str(d.accepted),
                        repr(d.latency_ms), _bool_str(d.timed_out),
                        d.true_label])


def write_run_report(report: RunReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for key, value in vars(report).items():
            w.writerow([key, repr(value) if isinstance(value, float) else value])


def write_pulse_events(pulses: Sequence[PulseEvent], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t_start_ms", "duration_ms", "freq_hz"])
        for p in pulses:
            w.writerow([p.droplet_id, repr(p.t_start_ms), repr(p.duration_ms),
                        repr(p.freq_hz)])


def write_sweep_table(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "fp_count", "fn_count", "sorted_count",
                    "fp_of_sorted", "fn_of_screened"])
        for r in rows:
            w.writerow([repr(float(r["theta"])), r["fp_count"], r["fn_count"],
                        r["sorted_count"], repr(r["fp_of_sorted"]),
                        repr(r["fn_of_screened"])])


def write_latency_table(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_px", "stage", "mean_ms", "p50_ms", "p99_ms", "reps"])
        for r in rows:
            w.writerow([r["image_px"], r["stage"], repr(r["mean_ms"]),
                        repr(r["p50_ms"]), repr(r["p99_ms"]), r["reps"]])
