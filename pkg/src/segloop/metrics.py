"""Efficiency accounting: pixel f-scores, human vs wall-clock time, manual
extrapolation, speedup ratios, and annotation-rate timelines.

All functions are pure over in-memory event lists; callers snapshot the
store's log first. Times in minutes, timestamps in epoch milliseconds.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeMismatchError

TRAIN_KINDS = ("train_start", "train_end")
# events that can finalize structures for rate/count purposes
STRUCTURE_KINDS = ("stroke", "superpixel_select", "accept_tile")

_EIGHT = np.ones((3, 3), dtype=int)


def f_score(pred: np.ndarray, gt: np.ndarray):
    """Pixel f-score with precision and recall. Defined as 1.0 when both
    masks are empty; symmetric in its arguments."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    f = 2.0 * tp / (2.0 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return f, precision, recall


def _check_markers(events):
    open_ts = None
    intervals = []
    for ev in events:
        if ev.kind == "train_start":
            if open_ts is not None:
                raise DataError("train_start inside an open training interval")
            open_ts = ev.timestamp_ms
        elif ev.kind == "train_end":
            if open_ts is None:
                raise DataError("train_end without train_start")
            intervals.append((open_ts, ev.timestamp_ms))
            open_ts = None
    if open_ts is not None:
        raise DataError("unclosed training interval")
    return intervals


def _idle_training_intervals(events):
    """Training intervals with no human event strictly inside. An interval
    the annotator kept working through counts fully as human time."""
    intervals = _check_markers(events)
    human_ts = [e.timestamp_ms for e in events if e.kind not in TRAIN_KINDS]
    idle = []
    for a, b in intervals:
        if not any(a < t < b for t in human_ts):
            idle.append((a, b))
    return idle


def human_and_total_time(events) -> tuple[float, float]:
    """(QA_t, total_t) in minutes. Total spans first to last event; human
    time subtracts training intervals the annotator sat out."""
    if len(events) < 2:
        return 0.0, 0.0
    ts = [e.timestamp_ms for e in events]
    total_ms = max(ts) - min(ts)
    idle_ms = sum(b - a for a, b in _idle_training_intervals(events))
    return (total_ms - idle_ms) / 60000.0, total_ms / 60000.0


def speedup(m_t: float, qa_t: float) -> float:
    if m_t <= 0 or qa_t <= 0:
        raise DataError(f"times must be positive, got M_t={m_t}, QA_t={qa_t}")
    return m_t / qa_t


def speedup_label(theta: float) -> str:
    """Integer display form, round-half-to-even (the raw ratio is reported
    alongside, never replaced)."""
    return f"{round(theta)}X"


def manual_time_extrapolation(sample_structures: int, sample_minutes: float,
                              total_structures: int) -> float:
    if sample_structures <= 0 or sample_minutes <= 0:
        raise DataError("sample must be positive to extrapolate")
    return total_structures * (sample_minutes / sample_structures)


def _human_clock(events):
    """Map each event to its human-time coordinate in ms: a clock that
    freezes across training intervals nobody annotated through."""
    idle = _idle_training_intervals(events)
    t0 = min(e.timestamp_ms for e in events)

    def coord(ts):
        frozen = sum(min(b, ts) - a for a, b in idle if ts > a)
        return (ts - t0) - frozen

    return coord


def rate_timeline(events, bucket_minutes: float = 5.0):
    """Structures finalized per human-minute, bucketed. Entries are
    (bucket_start_minutes, structures_per_minute); a final partial bucket
    divides by the human time it actually covers."""
    if not events:
        return []
    coord = _human_clock(events)
    bucket_ms = bucket_minutes * 60000.0
    counts: dict[int, int] = {}
    for ev in events:
        if ev.kind in STRUCTURE_KINDS:
            n = int(ev.payload.get("structures", 0))
            if n:
                b = int(coord(ev.timestamp_ms) // bucket_ms)
                counts[b] = counts.get(b, 0) + n
    if not counts:
        return []
    h_total = coord(max(e.timestamp_ms for e in events))
    series = []
    for b in range(max(counts) + 1):
        covered_ms = min(bucket_ms, h_total - b * bucket_ms)
        if covered_ms <= 0:
            covered_ms = bucket_ms  # events at the exact end instant
        rate = counts.get(b, 0) / (covered_ms / 60000.0)
        series.append((b * bucket_minutes, rate))
    return series


def new_structures(accepted_mask: np.ndarray, counted_centroids):
    """8-connected components of the accepted mask that are genuinely new.
    A component containing a previously counted centroid is a re-edit, not a
    new structure. Returns centroids (row, col, rounded) to add to the
    caller's ledger."""
    labeled, n = ndimage.label(np.asarray(accepted_mask, bool),
                               structure=_EIGHT)
    taken = set(counted_centroids)
    fresh = []
    for i in range(1, n + 1):
        comp = labeled == i
        if any(comp[r, c] for r, c in taken
               if 0 <= r < comp.shape[0] and 0 <= c < comp.shape[1]):
            continue
        r, c = ndimage.center_of_mass(comp)
        fresh.append((int(round(r)), int(round(c))))
    return fresh


@dataclass
class EfficiencyReport:
    m_t: float          # extrapolated manual minutes
    qa_t: float         # human minutes
    total_t: float      # wall-clock minutes including training
    theta_t: float      # m_t / qa_t
    rate_series: list   # (bucket_start_min, structures_per_min)
    structure_count: int

    def validate(self) -> "EfficiencyReport":
        if self.qa_t > self.total_t + 1e-9:
            raise DataError("human time exceeds total time")
        if self.theta_t <= 0:
            raise DataError("speedup must be positive")
        return self

    def as_text(self) -> str:
        rows = [
            ("structures annotated", f"{self.structure_count}"),
            ("manual time M_t (min)", f"{self.m_t:.1f}"),
            ("human time QA_t (min)", f"{self.qa_t:.1f}"),
            ("total time (min)", f"{self.total_t:.1f}"),
            ("speedup theta_t", f"{self.theta_t:.2f} ({speedup_label(self.theta_t)})"),
        ]
        width = max(len(k) for k, _ in rows)
        out = [f"{k.ljust(width)}  {v}" for k, v in rows]
        if self.rate_series:
            out.append("rate (structures/min) by human-time bucket:")
            for start, rate in self.rate_series:
                out.append(f"  {start:7.1f} min  {rate:6.2f}")
        return "\n".join(out) + "\n"

    def as_csv(self) -> str:
        buf = io.StringIO()
        buf.write("m_t,qa_t,total_t,theta_t,structure_count\n")
        buf.write(f"{self.m_t:.4f},{self.qa_t:.4f},{self.total_t:.4f},"
                  f"{self.theta_t:.4f},{self.structure_count}\n")
        buf.write("bucket_start_min,structures_per_min\n")
        for start, rate in self.rate_series:
            buf.write(f"{start:.2f},{rate:.4f}\n")
        return buf.getvalue()


def efficiency_report(events, sample_structures: int,
                      sample_minutes: float) -> EfficiencyReport:
    """Assemble the full report from an event log plus a measured manual
    annotation sample (the basis for extrapolation)."""
    qa_t, total_t = human_and_total_time(events)
    structure_count = sum(int(e.payload.get("structures", 0))
                          for e in events if e.kind in STRUCTURE_KINDS)
    m_t = manual_time_extrapolation(sample_structures, sample_minutes,
                                    structure_count)
    theta = speedup(m_t, qa_t) if qa_t > 0 else float("nan")
    if qa_t <= 0:
        raise DataError("log too short to report efficiency")
    return EfficiencyReport(m_t=m_t, qa_t=qa_t, total_t=total_t,
                            theta_t=theta, rate_series=rate_timeline(events),
                            structure_count=structure_count).validate()
