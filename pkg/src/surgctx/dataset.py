"""On-disk trial layout and run configuration.

A trial directory looks like::

    <trial>/manifest.txt            key=value lines (task, video_rate, context_rate, ...)
    <trial>/frames/00000.png        grayscale frames, 5-digit zero-padded index
    <trial>/masks/<class>/00000.png per-class binary masks (0/255)
    <trial>/features/00000.fmap     optional precomputed key feature maps
    <trial>/jaws.csv                optional jaw-end annotations
    <trial>/context.csv             context timeline, frame,S1..S5
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .context import DEFAULT_THRESHOLDS, TASK_CLASSES, Task
from .geometry import ObjectClass, Point
from .masks import read_image, read_mask, write_image, write_mask
from .memory import InitMode

DEFAULT_VIDEO_RATE = 30.0
DEFAULT_CONTEXT_RATE = 3.0

_INDEXED = re.compile(r"^(\d+)\.(png|pgm|fmap)$", re.IGNORECASE)


class DataError(ValueError):
    """Input data is missing or inconsistent."""


def frame_name(index: int, ext: str = "png") -> str:
    return f"{index:05d}.{ext}"


def indexed_files(directory, ext: str = "png") -> dict[int, Path]:
    """``{frame index: path}`` for files named by index, in index order."""
    d = Path(directory)
    if not d.is_dir():
        return {}
    out = {}
    for p in d.iterdir():
        m = _INDEXED.match(p.name)
        if m and m.group(2).lower() == ext:
            out[int(m.group(1))] = p
    return dict(sorted(out.items()))


@dataclass
class Manifest:
    task: Task = Task.SUTURING
    video_rate: float = DEFAULT_VIDEO_RATE
    context_rate: float = DEFAULT_CONTEXT_RATE
    n_frames: int = 0
    width: int = 0
    height: int = 0
    seed: int | None = None

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name}={v.value if isinstance(v, Task) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"manifest line without '=': {line!r}")
            raw[key.strip()] = value.strip()
        kinds = {"task": Task, "video_rate": float, "context_rate": float, "n_frames": int,
                 "width": int, "height": int, "seed": int}
        out = {}
        for key, value in raw.items():
            if key in kinds:
                try:
                    out[key] = kinds[key](value)
                except ValueError as e:
                    raise DataError(f"manifest {key}={value!r}: {e}") from None
        return cls(**out)


class Trial:
    """Paths and readers for one trial directory."""

    def __init__(self, root):
        self.root = Path(root)

    frames_dir = property(lambda self: self.root / "frames")
    masks_root = property(lambda self: self.root / "masks")
    features_dir = property(lambda self: self.root / "features")
    manifest_path = property(lambda self: self.root / "manifest.txt")
    context_path = property(lambda self: self.root / "context.csv")
    jaws_path = property(lambda self: self.root / "jaws.csv")

    def mask_dir(self, cls) -> Path:
        return self.masks_root / ObjectClass.parse(cls).slug

    def manifest(self) -> Manifest:
        if self.manifest_path.exists():
            return Manifest.loads(self.manifest_path.read_text())
        return Manifest()

    def write_manifest(self, m: Manifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(m.dumps())

    def frame_paths(self) -> dict[int, Path]:
        return indexed_files(self.frames_dir)

    def read_frame(self, index: int) -> np.ndarray:
        return read_image(self.frames_dir / frame_name(index))

    def write_frame(self, index: int, image) -> None:
        write_image(self.frames_dir / frame_name(index), image)

    def mask_classes(self) -> list[ObjectClass]:
        if not self.masks_root.is_dir():
            return []
        out = []
        for d in sorted(self.masks_root.iterdir()):
            if d.is_dir():
                try:
                    out.append(ObjectClass.parse(d.name))
                except ValueError:
                    continue
        return sorted(out)

    def mask_paths(self, cls) -> dict[int, Path]:
        return indexed_files(self.mask_dir(cls))

    def read_mask(self, cls, index: int) -> np.ndarray:
        return read_mask(self.mask_dir(cls) / frame_name(index))

    def write_mask(self, cls, index: int, m) -> None:
        write_mask(self.mask_dir(cls) / frame_name(index), m)

    def feature_path(self, index: int) -> Path:
        return self.features_dir / frame_name(index, "fmap")

    def read_jaws(self) -> dict[int, dict[ObjectClass, tuple[Point, Point]]]:
        return read_jaws_csv(self.jaws_path) if self.jaws_path.exists() else {}


JAWS_HEADER = ["frame", "class", "x1", "y1", "x2", "y2"]


def write_jaws_csv(path, jaws: dict[int, dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(JAWS_HEADER)
        for f in sorted(jaws):
            for cls, (a, b) in sorted(jaws[f].items()):
                w.writerow([f, ObjectClass.parse(cls).slug, *(f"{v:.4f}" for v in (a[0], a[1], b[0], b[1]))])


def read_jaws_csv(path) -> dict[int, dict[ObjectClass, tuple[Point, Point]]]:
    out: dict[int, dict] = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != JAWS_HEADER:
        raise DataError(f"{path}: expected header {','.join(JAWS_HEADER)}")
    for r in rows[1:]:
        if not r:
            continue
        f, cls = int(r[0]), ObjectClass.parse(r[1])
        x1, y1, x2, y2 = (float(v) for v in r[2:6])
        out.setdefault(f, {})[cls] = (Point(x1, y1), Point(x2, y2))
    return out


# -- run configuration -----------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a segment/context/bench run needs, serialisable to JSON."""

    task: Task = Task.SUTURING
    classes: tuple[ObjectClass, ...] = ()
    init_mode: InitMode = InitMode.GT_FF
    init_image: str | None = None
    init_mask: str | None = None
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    batch_size: int = 10
    video_rate: float = DEFAULT_VIDEO_RATE
    context_rate: float = DEFAULT_CONTEXT_RATE
    encoder: str = "toy"
    stride: int = 16
    capacity: int | None = 6
    trial: str | None = None
    out: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.task = Task(self.task)
        self.init_mode = InitMode(self.init_mode)
        self.classes = tuple(ObjectClass.parse(c) for c in self.classes) or TASK_CLASSES[self.task]
        unknown = set(self.thresholds) - set(DEFAULT_THRESHOLDS)
        if unknown:
            raise ValueError(f"unknown thresholds: {sorted(unknown)}")
        self.thresholds = {**DEFAULT_THRESHOLDS, **{k: float(v) for k, v in self.thresholds.items()}}
        if self.encoder not in ("toy", "external"):
            raise ValueError(f"encoder must be 'toy' or 'external', not {self.encoder!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be positive")
        extra = set(self.classes) - set(TASK_CLASSES[self.task])
        if extra:
            names = ", ".join(c.slug for c in sorted(extra))
            raise ValueError(f"classes {names} do not belong to {self.task.value}")

    def check_paths(self) -> None:
        for name in ("init_image", "init_mask", "trial"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise DataError(f"{name.replace('_', '-')} path does not exist: {p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        d["init_mode"] = self.init_mode.value
        d["classes"] = [c.slug for c in self.classes]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))
