"""Batched runtime pipeline: per-class segmentation workers plus last-frame context."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .context import ContextState, RuleSet, STATE_NAMES, infer_context, scene_from_masks
from .evaluation import Timeline
from .geometry import ObjectClass
from .memory import INSERT_EVERY, Encoder, MemoryBank, segment_batch

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZES = (5, 10, 15, 20, 25)


@dataclass(frozen=True)
class BatchConfig:
    batch_size: int = 10
    source_rate: float = 30.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.source_rate <= 0:
            raise ValueError("source_rate must be positive")

    @property
    def deadline_ms(self) -> float:
        """Time until the next batch has arrived."""
        return self.batch_size / self.source_rate * 1000.0

    @property
    def context_rate(self) -> float:
        return self.source_rate / self.batch_size


@dataclass
class StageTiming:
    batch_size: int
    deadline_ms: float
    segmentation_ms: float
    context_ms: float
    segmentation_sum_ms: float = 0.0
    failed: bool = False

    @property
    def total_ms(self) -> float:
        return self.segmentation_ms + self.context_ms

    @property
    def deadline_met(self) -> bool:
        return not self.failed and self.total_ms <= self.deadline_ms


@dataclass
class Worker:
    """Segments one object class; owns its memory bank exclusively."""

    class_id: ObjectClass
    bank: MemoryBank
    encoder: Encoder
    every: int = INSERT_EVERY
    global_index: bool = True

    def segment(self, frames: Sequence, base_index: int) -> tuple[list[np.ndarray], float]:
        t0 = time.perf_counter()
        masks = segment_batch(self.bank, frames, base_index, self.encoder, self.every, self.global_index)
        return masks, (time.perf_counter() - t0) * 1000.0


@dataclass
class RunResult:
    timeline: Timeline
    timings: list[StageTiming]
    masks: dict[ObjectClass, list[np.ndarray]] = field(default_factory=dict)
    failed_batches: list[int] = field(default_factory=list)


def _batches(frames: Iterable, size: int):
    batch = []
    for f in frames:
        batch.append(f)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def run(frames: Iterable, cfg: BatchConfig, workers: Mapping[ObjectClass, Worker] | Sequence[Worker],
        rules: RuleSet, start_index: int = 0, parallel: bool = True, keep_masks: bool = True,
        jaws: Callable[[int], Mapping] | None = None,
        clock: Callable[[], float] = time.perf_counter) -> RunResult:
    """Stream frames through the workers in non-overlapping windows.

    After every window the context of its last frame is inferred and appended
    to the timeline; a short trailing window is segmented and timed but adds
    no timeline entry. A window whose segmentation or context step raises is
    marked failed and repeats the previous context state.
    """
    if not isinstance(workers, Mapping):
        workers = {w.class_id: w for w in workers}
    if not workers:
        raise ValueError("no segmentation workers configured")
    for cls, w in workers.items():
        if w.bank.empty:
            raise ValueError(f"{ObjectClass.parse(cls).slug}: memory bank is not initialised")

    pool = ThreadPoolExecutor(max_workers=len(workers)) if parallel and len(workers) > 1 else None
    frames_out, states, timings, failed = [], [], [], []
    kept = {cls: [] for cls in workers}
    last = ContextState()
    index = start_index
    try:
        for bi, batch in enumerate(_batches(frames, cfg.batch_size)):
            base = index
            index += len(batch)
            last_frame = base + len(batch) - 1
            ok = True
            t0 = clock()
            per_class, seg_sum = {}, 0.0
            try:
                if pool is not None:
                    futures = {cls: pool.submit(w.segment, batch, base) for cls, w in workers.items()}
                    results = {cls: fut.result() for cls, fut in futures.items()}
                else:
                    results = {cls: w.segment(batch, base) for cls, w in workers.items()}
                for cls, (masks, ms) in results.items():
                    per_class[cls] = masks
                    seg_sum += ms
            except Exception:
                log.exception("segmentation failed for batch %d (frames %d-%d)", bi, base, last_frame)
                ok = False
            t1 = clock()
            if ok:
                try:
                    scene = scene_from_masks({c: m[-1] for c, m in per_class.items()}, last_frame, rules,
                                             jaws(last_frame) if jaws else None)
                    last = infer_context(scene, rules)
                except Exception:
                    log.exception("context inference failed for batch %d", bi)
                    ok = False
            t2 = clock()
            if ok and keep_masks:
                for cls, masks in per_class.items():
                    kept[cls].extend(masks)
            if not ok:
                failed.append(bi)
            if len(batch) == cfg.batch_size:
                # a short trailing window would break the timeline's fixed rate
                frames_out.append(last_frame)
                states.append(last)
            timings.append(StageTiming(len(batch), cfg.deadline_ms, (t1 - t0) * 1000.0, (t2 - t1) * 1000.0,
                                       seg_sum, failed=not ok))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    timeline = Timeline.from_states(frames_out, states, cfg.context_rate, cfg.source_rate) if frames_out \
        else Timeline(np.empty(0, np.int64), np.empty((0, len(STATE_NAMES)), np.int64), cfg.context_rate,
                      cfg.source_rate)
    return RunResult(timeline, timings, kept if keep_masks else {}, failed)


def check_deadlines(timings: Sequence[StageTiming], cfg: BatchConfig | None = None) -> dict:
    """Deadline hit rate and stage time statistics for a finished run."""
    if not timings:
        return {"batches": 0, "failed": 0, "fraction_met": 1.0, "violations": [],
                "max_total_ms": 0.0, "mean_total_ms": 0.0, "max_segmentation_ms": 0.0,
                "mean_segmentation_ms": 0.0, "max_context_ms": 0.0, "mean_context_ms": 0.0}
    deadline = [cfg.deadline_ms if cfg else t.deadline_ms for t in timings]
    met = [not t.failed and t.total_ms <= d for t, d in zip(timings, deadline)]
    seg = np.array([t.segmentation_ms for t in timings])
    ctx = np.array([t.context_ms for t in timings])
    tot = seg + ctx
    return {
        "batches": len(timings),
        "failed": sum(t.failed for t in timings),
        "fraction_met": float(np.mean(met)),
        "violations": [i for i, m in enumerate(met) if not m],
        "max_total_ms": float(tot.max()), "mean_total_ms": float(tot.mean()),
        "max_segmentation_ms": float(seg.max()), "mean_segmentation_ms": float(seg.mean()),
        "max_context_ms": float(ctx.max()), "mean_context_ms": float(ctx.mean()),
    }


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line; returns ``(slope, intercept, r_squared)``."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
