"""How much needle-mask quality matters for each context variable.

Infers context from ground-truth masks, then again after eroding the needle
masks by a growing margin, and prints the per-state temporal IOU.
"""

import numpy as np
from scipy import ndimage

from surgctx.context import Task, infer_context, load_rules, scene_from_masks
from surgctx.evaluation import Timeline, context_state_iou
from surgctx.geometry import ObjectClass
from surgctx.synth import generate, script_for


def timeline(vid, rules, margin):
    frames, states = [], []
    for f in range(0, vid.n_frames, 10):
        masks = dict(vid.masks(f))
        if margin:
            n = masks[ObjectClass.NEEDLE]
            masks[ObjectClass.NEEDLE] = ndimage.distance_transform_edt(n) > margin
        frames.append(f)
        states.append(infer_context(scene_from_masks(masks, f, rules, vid.jaws(f)), rules))
    return Timeline.from_states(frames, states, 3.0)


if __name__ == "__main__":
    vid = generate(script_for(Task.SUTURING, seconds=60), seed=0)
    rules = load_rules(Task.SUTURING)
    idx = np.arange(0, vid.n_frames, 10)
    truth = Timeline(idx, vid.gt_context.states[idx], 3.0)
    print("erosion   S1     S2     S3     S4     S5")
    for margin in (0.0, 0.5, 1.0, 2.0):
        iou = context_state_iou(timeline(vid, rules, margin), truth)
        print(f"{margin:5.1f} px " + " ".join(f"{iou[k]:.3f}" for k in ("S1", "S2", "S3", "S4", "S5")))
