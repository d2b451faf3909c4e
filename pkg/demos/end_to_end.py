"""Segment a synthetic suturing clip and infer its context at 3 Hz.

    python3 demos/end_to_end.py [seconds]
"""

import sys

import numpy as np

from surgctx.context import Task, load_rules
from surgctx.evaluation import Timeline, class_mean_iou, context_state_iou, resample
from surgctx.memory import InitMode, InitPair, ToyEncoder, init_bank
from surgctx.pipeline import BatchConfig, Worker, check_deadlines, run
from surgctx.synth import generate, script_for


def main(seconds=6.0):
    vid = generate(script_for(Task.SUTURING, seconds=seconds), seed=0)
    enc = ToyEncoder(vid.height, vid.width, dtype=np.float32)
    first = vid.image(0)
    workers = {}
    for cls, m in vid.masks(0).items():
        bank = init_bank(InitPair(InitMode.GT_FF, first, m, 0), enc, capacity=6)
        workers[cls] = Worker(cls, bank, enc)

    frames = (vid.image(f) for f in range(1, vid.n_frames))
    res = run(frames, BatchConfig(10), workers, load_rules(Task.SUTURING), start_index=1, jaws=vid.jaws)

    gt = {cls: [vid.masks(f)[cls] for f in range(1, vid.n_frames)] for cls in workers}
    for cls, iou in class_mean_iou(res.masks, gt).items():
        print(f"{cls.slug:>14}  mask IOU {iou:.3f}")

    # the runtime timeline samples the last frame of each batch: 10, 20, ...
    gt3 = resample(vid.gt_context, 3.0)
    n = len(res.timeline)
    truth = Timeline(gt3.frames[1:n + 1], gt3.states[1:n + 1], 3.0)
    for k, v in context_state_iou(res.timeline, truth).items():
        print(f"{k:>14}  context IOU {v:.3f}")

    s = check_deadlines(res.timings)
    print(f"{s['batches']} batches, mean {s['mean_total_ms']:.0f} ms, deadline met {s['fraction_met']:.0%}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 6.0)
