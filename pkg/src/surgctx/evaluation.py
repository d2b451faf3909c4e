"""Segmentation IOU, context timelines, segment-matched context IOU and reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .context import STATE_NAMES, ContextState
from .geometry import ObjectClass
from .masks import DimensionMismatchError, as_mask, mask_iou


class RateMismatchError(ValueError):
    pass


# -- timelines --------------------------------------------------------------------

@dataclass
class Timeline:
    """Context states sampled at a uniform rate.

    ``frames`` are indices into the source video (``video_rate`` Hz); one entry
    every ``video_rate / rate`` frames.
    """

    frames: np.ndarray
    states: np.ndarray
    rate: float = 3.0
    video_rate: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.states = np.asarray(self.states, dtype=np.int64).reshape(len(self.frames), len(STATE_NAMES))
        if len(self.frames) > 1:
            steps = np.diff(self.frames)
            if np.any(steps <= 0):
                raise ValueError("timeline frame indices must be strictly increasing")
            if np.any(steps != steps[0]):
                raise ValueError("timeline entries are not uniformly spaced")

    @classmethod
    def from_states(cls, frames: Iterable[int], states: Iterable[Sequence[int]], rate: float = 3.0,
                    video_rate: float = 30.0) -> "Timeline":
        frames = list(frames)
        states = [tuple(s) for s in states]
        return cls(np.array(frames, dtype=np.int64),
                   np.array(states, dtype=np.int64).reshape(len(frames), len(STATE_NAMES)), rate, video_rate)

    @property
    def step(self) -> int:
        if len(self.frames) > 1:
            return int(self.frames[1] - self.frames[0])
        return max(1, int(round(self.video_rate / self.rate)))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> ContextState:
        return ContextState(*(int(v) for v in self.states[i]))

    def __iter__(self):
        for f, s in zip(self.frames, self.states):
            yield int(f), ContextState(*(int(v) for v in s))

    def column(self, variable) -> np.ndarray:
        return self.states[:, _state_index(variable)]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Timeline) and self.rate == other.rate
                and self.video_rate == other.video_rate
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.states, other.states))


def _state_index(variable) -> int:
    if isinstance(variable, (int, np.integer)):
        if not 0 <= variable < len(STATE_NAMES):
            raise IndexError(variable)
        return int(variable)
    return STATE_NAMES.index(str(variable).upper())


class StateSegment(NamedTuple):
    variable: str
    value: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


def segmentize(t: Timeline, variable) -> list[StateSegment]:
    """Maximal constant runs of one state variable, as half-open frame ranges."""
    k = _state_index(variable)
    name = STATE_NAMES[k]
    col = t.states[:, k]
    if len(col) == 0:
        return []
    step = t.step
    cuts = np.flatnonzero(np.diff(col)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(col)]])
    return [StateSegment(name, int(col[s]), int(t.frames[s]), int(t.frames[e - 1]) + step)
            for s, e in zip(starts, ends)]


def _overlap(a: StateSegment, b: StateSegment) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def segment_iou(a: StateSegment, b: StateSegment) -> float:
    inter = _overlap(a, b)
    union = a.length + b.length - inter
    return inter / union if union else 0.0


def match_segments(pred: Sequence[StateSegment], gt: Sequence[StateSegment]) -> list[float]:
    """Temporal IOU for each ground-truth segment under greedy one-to-one matching.

    Candidate pairs share a value and overlap; they are taken largest overlap
    first, ties going to the earlier predicted segment. Unmatched ground-truth
    segments score 0.
    """
    candidates = []
    for gi, g in enumerate(gt):
        for pi, p in enumerate(pred):
            if p.value == g.value:
                ov = _overlap(p, g)
                if ov > 0:
                    candidates.append((-ov, p.start, g.start, pi, gi))
    candidates.sort()
    used_p, scores = set(), [0.0] * len(gt)
    used_g = set()
    for _, _, _, pi, gi in candidates:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        scores[gi] = segment_iou(pred[pi], gt[gi])
    return scores


def _check_aligned(pred: Timeline, gt: Timeline) -> None:
    if pred.rate != gt.rate or pred.video_rate != gt.video_rate:
        raise RateMismatchError(f"timeline rates differ: {pred.rate} Hz vs {gt.rate} Hz")
    if len(pred) != len(gt):
        raise ValueError(f"timelines cover different spans: {len(pred)} vs {len(gt)} entries")


def context_state_iou(pred: Timeline, gt: Timeline) -> dict[str, float]:
    """Mean matched-segment IOU per state variable plus their average under ``"mean"``.

    The two timelines are compared entry by entry, so they must share rate and
    length; the predicted frame indices are re-based onto the ground truth's.
    """
    _check_aligned(pred, gt)
    pred = Timeline(gt.frames, pred.states, gt.rate, gt.video_rate)
    out = {}
    for name in STATE_NAMES:
        scores = match_segments(segmentize(pred, name), segmentize(gt, name))
        out[name] = float(np.mean(scores)) if scores else 1.0
    out["mean"] = float(np.mean([out[n] for n in STATE_NAMES]))
    return out


def resample(t: Timeline, target_rate: float) -> Timeline:
    """Nearest-sample resampling; categorical codes are never interpolated."""
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if target_rate == t.rate:
        return Timeline(t.frames.copy(), t.states.copy(), t.rate, t.video_rate)
    if len(t) == 0:
        return Timeline(t.frames, t.states, target_rate, t.video_rate)
    ratio = t.rate / target_rate
    if ratio > 1:
        k = int(round(ratio))
        if not math.isclose(k, ratio):
            raise RateMismatchError(f"{target_rate} Hz does not divide {t.rate} Hz")
        return Timeline(t.frames[::k], t.states[::k], target_rate, t.video_rate)
    k = int(round(1 / ratio))
    if not math.isclose(k, 1 / ratio) or t.step % k:
        raise RateMismatchError(f"cannot upsample {t.rate} Hz to {target_rate} Hz on integer frames")
    new_step = t.step // k
    frames = np.arange(t.frames[0], t.frames[-1] + t.step, new_step)
    # nearest source sample, ties to the earlier one
    src = np.clip(np.ceil((frames - t.frames[0]) / t.step - 0.5).astype(np.int64), 0, len(t) - 1)
    return Timeline(frames, t.states[src], target_rate, t.video_rate)


# -- segmentation IOU -----------------------------------------------------------------

def mean_iou(preds: Sequence, gts: Sequence) -> float:
    """Mean per-frame IOU, skipping frames where both masks are empty (NaN if none remain)."""
    if len(preds) != len(gts):
        raise DimensionMismatchError(f"{len(preds)} predicted masks vs {len(gts)} ground-truth masks")
    scores = []
    for p, g in zip(preds, gts):
        p, g = as_mask(p), as_mask(g)
        if not p.any() and not g.any():
            continue
        scores.append(mask_iou(p, g))
    return float(np.mean(scores)) if scores else math.nan


def class_mean_iou(preds: Mapping, gts: Mapping) -> dict[ObjectClass, float]:
    """Per-class :func:`mean_iou` over aligned frame lists."""
    preds = {ObjectClass.parse(k): v for k, v in preds.items()}
    gts = {ObjectClass.parse(k): v for k, v in gts.items()}
    if set(preds) != set(gts):
        raise ValueError(f"class sets differ: {sorted(preds)} vs {sorted(gts)}")
    return {c: mean_iou(preds[c], gts[c]) for c in sorted(gts)}


# -- CSV ----------------------------------------------------------------------------

TIMELINE_HEADER = ["frame", *STATE_NAMES]


def write_timeline_csv(path, t: Timeline) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(timeline_to_csv(t))


def timeline_to_csv(t: Timeline) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMELINE_HEADER)
    for f, s in zip(t.frames, t.states):
        w.writerow([int(f), *(int(v) for v in s)])
    return buf.getvalue()


def read_timeline_csv(path, rate: float | None = None, video_rate: float = 30.0) -> Timeline:
    """Read ``frame,S1..S5``; rows are sorted by frame. Rate is inferred from spacing if not given."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != TIMELINE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TIMELINE_HEADER)}")
    body = sorted((tuple(int(v) for v in r) for r in rows[1:] if r), key=lambda r: r[0])
    frames = [r[0] for r in body]
    states = [r[1:] for r in body]
    if rate is None:
        step = frames[1] - frames[0] if len(frames) > 1 else int(video_rate)
        rate = video_rate / step
    return Timeline.from_states(frames, states, rate, video_rate)


# -- reports -------------------------------------------------------------------------

@dataclass
class Metrics:
    class_iou: dict = field(default_factory=dict)
    context_iou: dict = field(default_factory=dict)
    timings: list = field(default_factory=list)
    task: str = ""


@dataclass
class Report:
    text: str
    csv: dict[str, str]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.txt"]
        paths[0].write_text(self.text)
        for name, body in self.csv.items():
            p = out / f"{name}.csv"
            p.write_text(body)
            paths.append(p)
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else f"{v:.3f}"
    return str(v)


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


TIMING_HEADER = ["batch", "batch_size", "deadline_ms", "segmentation_ms", "segmentation_sum_ms",
                 "context_ms", "total_ms", "deadline_met", "failed"]


def emit_report(metrics: Metrics) -> Report:
    """Render per-class IOU, per-state context IOU and batch timings as text and CSV."""
    class_rows = [[ObjectClass.parse(c).slug, v] for c, v in metrics.class_iou.items()]
    ctx = metrics.context_iou
    ctx_header = ["task", *STATE_NAMES, "mean"]
    ctx_rows = [[metrics.task or "-", *(ctx[n] for n in ctx_header[1:])]] if ctx else []
    timing_rows = []
    for i, t in enumerate(metrics.timings):
        timing_rows.append([i, t.batch_size, t.deadline_ms, t.segmentation_ms, t.segmentation_sum_ms,
                            t.context_ms, t.total_ms, int(t.deadline_met), int(t.failed)])
    text = "\n\n".join([
        "Segmentation IOU per class\n" + _table(["class", "mean_iou"], class_rows),
        "Context IOU per state\n" + _table(ctx_header, ctx_rows),
        "Batch timing\n" + _table(TIMING_HEADER, timing_rows),
    ]) + "\n"
    return Report(text, {
        "class_iou": _csv(["class", "mean_iou"], class_rows),
        "context_iou": _csv(ctx_header, ctx_rows),
        "timing": _csv(TIMING_HEADER, timing_rows),
    })
