"""Command-line driver: synth, segment, context, eval and bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 deadline violation
(``bench --strict``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .context import TASK_CLASSES, Task, infer_context, load_rules, scene_from_masks
from .dataset import DataError, Manifest, RunConfig, Trial, write_jaws_csv
from .evaluation import (
    TIMING_HEADER, Metrics, RateMismatchError, Timeline, context_state_iou, emit_report, read_timeline_csv,
    resample, write_timeline_csv,
)
from .geometry import ObjectClass
from .masks import DimensionMismatchError, mask_iou, read_image, read_labels, split_labels
from .memory import ExternalKeyEncoder, Frame, InitMode, InitPair, ToyEncoder, init_bank, read_feature_map
from .pipeline import DEFAULT_BATCH_SIZES, BatchConfig, Worker, check_deadlines, linear_fit, run
from .synth import Script, ScriptError, TrajectoryError, generate, script_for

log = logging.getLogger("surgctx")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEADLINE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared pieces -------------------------------------------------------------------

def _thresholds(args) -> dict:
    out = {}
    for flag, key in (("hold_threshold", "hold"), ("open_threshold", "open"), ("min_area", "min_area")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def build_config(args, manifest: Manifest | None = None) -> RunConfig:
    """Flags over an optional ``--config`` file over the trial manifest."""
    base = {}
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        base = RunConfig.loads(p.read_text()).to_dict()
    elif manifest is not None:
        base = {"task": manifest.task.value, "video_rate": manifest.video_rate,
                "context_rate": manifest.context_rate}
    flags = {
        "task": getattr(args, "task", None), "init_mode": getattr(args, "init_mode", None),
        "init_image": getattr(args, "init_image", None), "init_mask": getattr(args, "init_mask", None),
        "batch_size": getattr(args, "batch_size", None), "context_rate": getattr(args, "rate", None),
        "encoder": getattr(args, "encoder", None), "stride": getattr(args, "stride", None),
        "capacity": getattr(args, "capacity", None), "trial": getattr(args, "trial", None),
        "out": getattr(args, "out", None), "seed": getattr(args, "seed", None),
    }
    merged = {**base, **{k: v for k, v in flags.items() if v is not None}}
    if getattr(args, "task", None) and not getattr(args, "config", None):
        merged.pop("classes", None)
    merged["thresholds"] = {**base.get("thresholds", {}), **_thresholds(args)}
    try:
        cfg = RunConfig.from_dict(merged)
    except ValueError as e:
        raise UsageError(str(e)) from None
    cfg.check_paths()
    if getattr(args, "save_config", None):
        Path(args.save_config).write_text(cfg.dumps())
    return cfg


def _rules(cfg: RunConfig, rules_path=None):
    rules = load_rules(rules_path) if rules_path else load_rules(cfg.task)
    if rules.task is not cfg.task:
        raise UsageError(f"rule file is for {rules.task.value}, not {cfg.task.value}")
    return rules.with_thresholds(**cfg.thresholds)


def _open_trial(path) -> Trial:
    if path is None:
        raise UsageError("--trial is required")
    t = Trial(path)
    if not t.root.is_dir():
        raise DataError(f"trial directory not found: {t.root}")
    return t


def _make_encoder(cfg: RunConfig, height: int, width: int):
    cls = ExternalKeyEncoder if cfg.encoder == "external" else ToyEncoder
    try:
        return cls(height, width, stride=cfg.stride, dtype=np.float32)
    except ValueError as e:
        raise DataError(str(e)) from None


_INIT_HELP = {
    InitMode.GT_FF: "gt-ff seeds from the test video's first ground-truth mask: provide "
                    "masks/<class>/00000.png in the trial, or pass --init-image and --init-mask",
    InitMode.TRAIN_FF: "train-ff seeds from an exemplar of the training data: pass --init-image "
                       "and --init-mask (a label PNG with class ids as pixel values)",
    InitMode.DEEPLAB_FF: "deeplab-ff seeds from a baseline segmenter's output: pass the video's first "
                         "frame as --init-image and the baseline label PNG as --init-mask",
}


def _init_pairs(cfg: RunConfig, trial: Trial, frames: dict) -> tuple[dict[ObjectClass, np.ndarray], object, int]:
    """Initial masks per class, the init image, and the first frame to segment."""
    if cfg.init_image or cfg.init_mask:
        if not (cfg.init_image and cfg.init_mask):
            raise DataError("missing init pair: " + _INIT_HELP[cfg.init_mode])
        image = read_image(cfg.init_image)
        labels = split_labels(read_labels(cfg.init_mask), cfg.classes)
        key_path = Path(cfg.init_image).with_suffix(".fmap")
        if cfg.encoder == "external":
            if not key_path.exists():
                raise DataError(f"external encoder needs the init key map at {key_path}")
            image = Frame(image, read_feature_map(key_path))
        start = 1 if cfg.init_mode is InitMode.GT_FF else 0
        return labels, image, start
    if cfg.init_mode is not InitMode.GT_FF:
        raise DataError("missing init pair: " + _INIT_HELP[cfg.init_mode])
    first = next(iter(frames))
    masks = {}
    for cls in cfg.classes:
        p = trial.mask_dir(cls) / f"{first:05d}.png"
        if p.exists():
            masks[cls] = trial.read_mask(cls, first)
    if not masks:
        raise DataError("missing init pair: " + _INIT_HELP[InitMode.GT_FF])
    return masks, _load_frame(cfg, trial, first, frames[first]), first + 1


def _load_frame(cfg: RunConfig, trial: Trial, index: int, path: Path):
    img = read_image(path)
    if cfg.encoder == "external":
        fp = trial.feature_path(index)
        if not fp.exists():
            raise DataError(f"external encoder: no feature map {fp}")
        return Frame(img, read_feature_map(fp))
    return img


def _workers(cfg, enc, init_masks, init_image, init_index):
    workers = {}
    for cls in cfg.classes:
        m = init_masks.get(cls)
        if m is None or not np.any(m):
            log.warning("%s: no object in the initial mask; class skipped", cls.slug)
            continue
        pair = InitPair(cfg.init_mode, init_image, m, init_index if cfg.init_mode is InitMode.GT_FF else None)
        workers[cls] = Worker(cls, init_bank(pair, enc, cfg.capacity), enc)
    if not workers:
        raise DataError("the initial masks contain none of the task's object classes")
    return workers


def _timing_rows(timings, extra=()):
    rows = []
    for i, t in enumerate(timings):
        rows.append([*extra, i, t.batch_size, f"{t.deadline_ms:.3f}", f"{t.segmentation_ms:.3f}",
                     f"{t.segmentation_sum_ms:.3f}", f"{t.context_ms:.3f}", f"{t.total_ms:.3f}",
                     int(t.deadline_met), int(t.failed)])
    return rows


def _write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    if args.script:
        p = Path(args.script)
        if not p.exists():
            raise DataError(f"script not found: {p}")
        script = Script.load(p)
    else:
        script = script_for(args.task or Task.SUTURING, seconds=args.seconds)
    video = generate(script, seed=args.seed or 0)
    name = args.name or f"{script.task.value}_seed{args.seed or 0}"
    trial = Trial(Path(args.out) / name)
    rate = args.rate or 3.0
    trial.write_manifest(Manifest(script.task, script.fps, rate, video.n_frames, script.width,
                                  script.height, args.seed or 0))
    (trial.root / "script.json").write_text(script.dumps())
    jaws = {}
    for f in range(video.n_frames):
        trial.write_frame(f, video.image(f))
        for cls, m in video.masks(f).items():
            trial.write_mask(cls, f, m)
        jaws[f] = video.jaws(f)
    write_jaws_csv(trial.jaws_path, jaws)
    write_timeline_csv(trial.context_path, resample(video.gt_context, rate))
    print(trial.root)
    return EXIT_OK


def cmd_segment(args) -> int:
    trial = _open_trial(args.trial)
    cfg = build_config(args, trial.manifest())
    if cfg.out is None:
        raise UsageError("--out is required (predictions never overwrite the input trial)")
    frames = trial.frame_paths()
    if not frames:
        raise DataError(f"no frames found in {trial.frames_dir}")
    init_masks, init_image, start = _init_pairs(cfg, trial, frames)
    first = read_image(next(iter(frames.values())))
    h, w = first.shape
    enc = _make_encoder(cfg, h, w)
    init_index = start - 1 if cfg.init_mode is InitMode.GT_FF else None
    workers = _workers(cfg, enc, init_masks, init_image, init_index)
    indices = [i for i in frames if i >= start]
    if indices != list(range(start, start + len(indices))):
        raise DataError("frame indices are not consecutive")
    rules = _rules(cfg, args.rules)
    jaws = trial.read_jaws()
    bc = BatchConfig(cfg.batch_size, cfg.video_rate)
    stream = (_load_frame(cfg, trial, i, frames[i]) for i in indices)
    res = run(stream, bc, workers, rules, start_index=start, jaws=lambda f: jaws.get(f))
    out = Trial(cfg.out)
    if cfg.init_mode is InitMode.GT_FF and start > 0:
        for cls in workers:
            out.write_mask(cls, start - 1, init_masks[cls])
    for cls, masks in res.masks.items():
        for i, m in zip(indices, masks):
            out.write_mask(cls, i, m)
    write_timeline_csv(out.root / "context_runtime.csv", res.timeline)
    _write_csv(out.root / "timing.csv", TIMING_HEADER, _timing_rows(res.timings))
    summary = check_deadlines(res.timings, bc)
    print(f"segmented {len(indices)} frames x {len(workers)} classes; "
          f"deadline met on {summary['fraction_met']:.0%} of {summary['batches']} batches")
    return EXIT_OK


def cmd_context(args) -> int:
    trial = _open_trial(args.trial)
    manifest = trial.manifest()
    cfg = build_config(args, manifest)
    rules = _rules(cfg, args.rules)
    step = cfg.video_rate / cfg.context_rate
    if step < 1 or not math.isclose(step, round(step)):
        raise UsageError(f"--rate {cfg.context_rate} does not divide the {cfg.video_rate} Hz video")
    step = int(round(step))
    present = [c for c in cfg.classes if trial.mask_paths(c)]
    for c in cfg.classes:
        if c not in present:
            log.warning("no %s masks in %s; treating the object as absent", c.slug, trial.masks_root)
    n = manifest.n_frames
    for c in present:
        n = max(n, max(trial.mask_paths(c)) + 1)
    n = max(n, max(trial.frame_paths(), default=-1) + 1)
    if n == 0:
        raise DataError(f"{trial.root}: no frames or masks to infer context from")
    if not present:
        log.warning("no masks at all: the timeline is all zeros")
    jaws = trial.read_jaws()
    paths = {c: trial.mask_paths(c) for c in present}
    frames, states = [], []
    for f in range(0, n, step):
        masks = {c: trial.read_mask(c, f) for c in present if f in paths[c]}
        scene = scene_from_masks(masks, f, rules, jaws.get(f))
        frames.append(f)
        states.append(infer_context(scene, rules))
    t = Timeline.from_states(frames, states, cfg.context_rate, cfg.video_rate)
    out = Path(args.out) if args.out else trial.context_path
    write_timeline_csv(out, t)
    print(out)
    return EXIT_OK


def _score_masks(pred: Trial, gt: Trial) -> dict[ObjectClass, float]:
    classes = gt.mask_classes()
    out = {}
    for cls in classes:
        gp, pp = gt.mask_paths(cls), pred.mask_paths(cls)
        if not pp:
            raise DataError(f"prediction has no {cls.slug} masks")
        if len(gp) != len(pp) or set(gp) != set(pp):
            raise DataError(f"{cls.slug}: {len(pp)} predicted masks vs {len(gp)} ground-truth masks "
                            "with differing frame indices")
        scores = []
        for i in sorted(gp):
            p, g = pred.read_mask(cls, i), gt.read_mask(cls, i)
            if p.shape != g.shape:
                raise DataError(f"{cls.slug} frame {i}: mask sizes differ")
            if p.any() or g.any():
                scores.append(mask_iou(p, g))
        out[cls] = float(np.mean(scores)) if scores else math.nan
    return out


def cmd_eval(args) -> int:
    if not args.pred or not args.gt:
        raise UsageError("--pred and --gt are required")
    pred, gt = _open_trial(args.pred), _open_trial(args.gt)
    manifest = gt.manifest()
    class_iou = _score_masks(pred, gt) if gt.mask_classes() else {}
    ctx = {}
    pc = Path(args.pred_context) if args.pred_context else pred.context_path
    if gt.context_path.exists() and pc.exists():
        g = read_timeline_csv(gt.context_path, video_rate=manifest.video_rate)
        p = read_timeline_csv(pc, video_rate=manifest.video_rate)
        ctx = context_state_iou(p, g)
    if not class_iou and not ctx:
        raise DataError("nothing to evaluate: no ground-truth masks or context timelines found")
    report = emit_report(Metrics(class_iou, ctx, [], (args.task or manifest.task.value)))
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.text)
    return EXIT_OK


BENCH_HEADER = ["batch_size", "batches", "deadline_ms", "mean_segmentation_ms", "mean_context_ms",
                "mean_total_ms", "max_total_ms", "fraction_met"]


def cmd_bench(args) -> int:
    sizes = tuple(args.sizes) if args.sizes else DEFAULT_BATCH_SIZES
    if any(s < 1 for s in sizes):
        raise UsageError("batch sizes must be positive")
    if args.trial:
        trial = _open_trial(args.trial)
        cfg = build_config(args, trial.manifest())
        paths = trial.frame_paths()
        if not paths:
            raise DataError(f"no frames found in {trial.frames_dir}")
        first = next(iter(paths))
        init_masks = {c: trial.read_mask(c, first) for c in cfg.classes if trial.mask_paths(c).get(first)}
        if not init_masks:
            raise DataError("missing init pair: " + _INIT_HELP[InitMode.GT_FF])
        frame_at = lambda i: _load_frame(cfg, trial, i, paths[i])  # noqa: E731
        n_frames = len(paths)
        jaws_all = trial.read_jaws()
        jaws = jaws_all.get
        init_image = frame_at(first)
    else:
        cfg = build_config(args)
        script = script_for(cfg.task, seconds=args.seconds)
        video = generate(script, seed=cfg.seed)
        first, n_frames = 0, video.n_frames
        init_masks = video.masks(0)
        frame_at = video.image
        jaws = video.jaws
        init_image = video.image(0)
    rules = _rules(cfg, args.rules)
    h, w = np.asarray(getattr(init_image, "image", init_image)).shape[:2]
    rows, timing_rows, totals = [], [], []
    violations = 0
    for size in sizes:
        need = size * args.batches
        if first + 1 + need > n_frames:
            raise DataError(f"batch size {size} x {args.batches} batches needs {need + 1} frames, "
                            f"only {n_frames} available")
        enc = _make_encoder(cfg, h, w)
        workers = _workers(cfg, enc, init_masks, init_image, first)
        bc = BatchConfig(size, cfg.video_rate)
        stream = (frame_at(i) for i in range(first + 1, first + 1 + need))
        res = run(stream, bc, workers, rules, start_index=first + 1, keep_masks=False, jaws=jaws)
        s = check_deadlines(res.timings, bc)
        violations += len(s["violations"])
        rows.append([size, s["batches"], f"{bc.deadline_ms:.3f}", f"{s['mean_segmentation_ms']:.3f}",
                     f"{s['mean_context_ms']:.3f}", f"{s['mean_total_ms']:.3f}", f"{s['max_total_ms']:.3f}",
                     f"{s['fraction_met']:.3f}"])
        timing_rows.extend(_timing_rows(res.timings, extra=(size,)))
        totals.append(s["mean_total_ms"])
        print(f"batch {size:>3}: mean {s['mean_total_ms']:8.1f} ms  max {s['max_total_ms']:8.1f} ms  "
              f"deadline {bc.deadline_ms:6.1f} ms  met {s['fraction_met']:.0%}")
    if cfg.out:
        out = Path(cfg.out)
        _write_csv(out / "bench.csv", BENCH_HEADER, rows)
        _write_csv(out / "timing.csv", ["size", *TIMING_HEADER], timing_rows)
    if len(sizes) > 2:
        slope, intercept, r2 = linear_fit(sizes, totals)
        print(f"linear fit: {slope:.2f} ms/frame + {intercept:.1f} ms, R^2 = {r2:.3f}")
    print(f"deadline violations: {violations}")
    if args.strict and violations:
        return EXIT_DEADLINE
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------

def _sizes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surgctx", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"surgctx {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, trial=True):
        sp.add_argument("--task", choices=[t.value for t in Task])
        sp.add_argument("--config", help="RunConfig JSON; flags override its values")
        sp.add_argument("--save-config", help="write the resolved RunConfig JSON here")
        sp.add_argument("--rules", help="rule set JSON replacing the bundled one")
        sp.add_argument("--hold-threshold", type=float)
        sp.add_argument("--open-threshold", type=float)
        sp.add_argument("--min-area", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if trial:
            sp.add_argument("--trial", help="trial directory")

    def engine(sp):
        sp.add_argument("--init-mode", choices=[m.value for m in InitMode])
        sp.add_argument("--init-image")
        sp.add_argument("--init-mask", help="label PNG whose pixel values are class ids")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--encoder", choices=["toy", "external"])
        sp.add_argument("--stride", type=int)
        sp.add_argument("--capacity", type=int, help="memory bank size including the initial pair")

    s = sub.add_parser("synth", help="generate a scripted synthetic trial")
    s.add_argument("--task", choices=[t.value for t in Task])
    s.add_argument("--script", help="script JSON; overrides --task")
    s.add_argument("--seconds", type=float, default=60.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rate", type=float, help="context rate of the written timeline (default 3 Hz)")
    s.add_argument("--name", help="trial directory name")
    s.add_argument("--out", help="dataset root")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", help="segment a trial's frames into per-class masks")
    common(s)
    engine(s)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("context", help="infer the context timeline from a trial's masks")
    common(s)
    s.add_argument("--rate", type=float, help="output rate in Hz (default from the manifest)")
    s.set_defaults(func=cmd_context)

    s = sub.add_parser("eval", help="score predicted masks and context against ground truth")
    s.add_argument("--pred", help="predicted trial directory")
    s.add_argument("--gt", help="ground-truth trial directory")
    s.add_argument("--pred-context", help="predicted context CSV (default <pred>/context.csv)")
    s.add_argument("--task", choices=[t.value for t in Task])
    s.add_argument("--out", help="directory for report.txt and CSV tables")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time the runtime pipeline over batch sizes")
    common(s)
    engine(s)
    s.add_argument("--sizes", type=_sizes, help="comma-separated batch sizes (default 5,10,15,20,25)")
    s.add_argument("--batches", type=int, default=6, help="batches timed per size")
    s.add_argument("--seconds", type=float, default=10.0, help="length of the synthetic video")
    s.add_argument("--strict", action="store_true", help="exit 3 on any deadline violation")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        if args.command is None:
            raise UsageError("a command is required (synth, segment, context, eval, bench)")
        return args.func(args)
    except UsageError as e:
        print(f"surgctx: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, DimensionMismatchError, RateMismatchError, ScriptError,
            TrajectoryError, ValueError, OSError) as e:
        print(f"surgctx: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
