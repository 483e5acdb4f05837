"""Tracking evaluation.

Two protocols:

* ope_evaluate: one-pass evaluation. Track once from the first box with
  no resets; report per-frame IOU, the success curve (fraction of
  frames with IOU >= threshold, sampled every 0.05), its AUC, and the
  same curve restricted to occluded frames.

* vot_evaluate: accuracy/robustness with reinitialization. A frame with
  zero overlap is a drop; the tracker is reinitialized from the truth
  ``reinit_gap`` frames later and the skipped frames are excluded from
  accuracy. Robustness maps drop frequency to [0,1]:

      robustness = exp(-30 * drops / frames)

  This stand-in formula is printed in every output header because the
  benchmark convention it approximates is not uniquely defined;
  comparisons should rely on orderings, not its absolute value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, iou

ROBUSTNESS_NOTE = "robustness = exp(-30 * drops / frames)"


@dataclass
class EvalResult:
    name: str
    per_frame_iou: np.ndarray
    occluded_mask: np.ndarray               # bool per evaluated frame
    accuracy: float                         # mean IOU over evaluated frames
    drops: int
    robustness: float
    thresholds: np.ndarray
    success: np.ndarray                     # fraction with IOU >= threshold
    auc: float
    success_occluded: np.ndarray | None = None
    auc_occluded: float | None = None
    flags: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return 0.5 * (self.accuracy + self.robustness)


def success_curve(ious: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return np.zeros_like(thresholds)
    return np.array([(ious >= t).mean() for t in thresholds])


def auc_of(thresholds: np.ndarray, success: np.ndarray) -> float:
    return float(np.trapezoid(success, thresholds))


def ope_evaluate(pred_boxes, truth_boxes, occluded=None, name: str = "tracker",
                 threshold_step: float = 0.05) -> EvalResult:
    """Score an already-produced track against the truth."""
    pred_boxes = list(pred_boxes)
    truth_boxes = list(truth_boxes)
    if len(pred_boxes) != len(truth_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions vs "
                         f"{len(truth_boxes)} truth boxes")
    if occluded is None:
        occluded = [False] * len(pred_boxes)
    occluded = np.asarray(list(occluded), dtype=bool)
    if occluded.shape[0] != len(pred_boxes):
        raise ValueError("occlusion mask length mismatch")

    ious = np.array([iou(p, t) for p, t in zip(pred_boxes, truth_boxes)])
    thresholds = np.arange(0.0, 1.0 + 1e-9, threshold_step)
    succ = success_curve(ious, thresholds)
    drops = int(np.sum(ious == 0.0))
    n = max(1, len(ious))
    result = EvalResult(
        name=name,
        per_frame_iou=ious,
        occluded_mask=occluded,
        accuracy=float(ious.mean()) if len(ious) else 0.0,
        drops=drops,
        robustness=float(np.exp(-30.0 * drops / n)),
        thresholds=thresholds,
        success=succ,
        auc=auc_of(thresholds, succ),
    )
    if occluded.any():
        occ = ious[occluded]
        result.success_occluded = success_curve(occ, thresholds)
        result.auc_occluded = auc_of(thresholds, result.success_occluded)
    return result


def vot_evaluate(tracker, frames, truth_boxes, occluded=None,
                 reinit_gap: int = 5, name: str = "tracker",
                 threshold_step: float = 0.05) -> EvalResult:
    """Run ``tracker`` (init/step interface) with failure reinitialization."""
    frames = list(frames)
    truth_boxes = list(truth_boxes)
    if len(frames) != len(truth_boxes):
        raise ValueError("frames/truth length mismatch")
    if occluded is None:
        occluded = [False] * len(frames)

    evaluated_ious = []
    evaluated_occ = []
    drops = 0
    tracker.init(frames[0], truth_boxes[0])
    t = 1
    while t < len(frames):
        box = tracker.step(frames[t])
        val = iou(box, truth_boxes[t])
        evaluated_ious.append(val)
        evaluated_occ.append(occluded[t])
        if val == 0.0:
            drops += 1
            t += reinit_gap  # skipped frames are excluded from accuracy
            if t < len(frames):
                tracker.init(frames[t], truth_boxes[t])
        t += 1

    ious = np.array(evaluated_ious)
    occ = np.array(evaluated_occ, dtype=bool)
    n_frames = max(1, len(frames) - 1)
    thresholds = np.arange(0.0, 1.0 + 1e-9, threshold_step)
    succ = success_curve(ious, thresholds)
    result = EvalResult(
        name=name,
        per_frame_iou=ious,
        occluded_mask=occ,
        accuracy=float(ious.mean()) if len(ious) else 0.0,
        drops=drops,
        robustness=float(np.exp(-30.0 * drops / n_frames)),
        thresholds=thresholds,
        success=succ,
        auc=auc_of(thresholds, succ),
    )
    if occ.any():
        result.success_occluded = success_curve(ious[occ], thresholds)
        result.auc_occluded = auc_of(thresholds, result.success_occluded)
    return result


class GroundTruthPlayback:
    """Oracle 'tracker' that replays the truth; accuracy 1.0 by construction."""

    def __init__(self, truth_boxes):
        self.truth = list(truth_boxes)
        self._t = 0

    def init(self, frame, box):
        # Locate our position by searching for the given box; evaluation
        # protocols always reinitialize from a truth box.
        for i, b in enumerate(self.truth):
            if b == box:
                self._t = i
                return
        self._t = 0

    def step(self, frame):
        self._t += 1
        return self.truth[min(self._t, len(self.truth) - 1)]


def baseline_static(frames, init_box: BoundingBox) -> list:
    """The do-nothing baseline: the initial box for every later frame."""
    return [init_box] * (len(list(frames)) - 1)


def merge_results(results, name: str, threshold_step: float = 0.05) -> EvalResult:
    """Pool per-sequence OPE results into one aggregate curve."""
    results = list(results)
    if not results:
        raise ValueError("no results to merge")
    ious = np.concatenate([r.per_frame_iou for r in results])
    occ = np.concatenate([r.occluded_mask for r in results])
    drops = int(sum(r.drops for r in results))
    thresholds = np.arange(0.0, 1.0 + 1e-9, threshold_step)
    succ = success_curve(ious, thresholds)
    merged = EvalResult(
        name=name, per_frame_iou=ious, occluded_mask=occ,
        accuracy=float(ious.mean()) if len(ious) else 0.0,
        drops=drops,
        robustness=float(np.exp(-30.0 * drops / max(1, len(ious)))),
        thresholds=thresholds, success=succ, auc=auc_of(thresholds, succ),
    )
    if occ.any():
        merged.success_occluded = success_curve(ious[occ], thresholds)
        merged.auc_occluded = auc_of(thresholds, merged.success_occluded)
    return merged


def evaluate_sequences(params, sequences, reset_interval: int = 32,
                       name: str = "tracker", with_baseline: bool = True,
                       threshold_step: float = 0.05):
    """OPE the tracker over every sequence; returns merged EvalResults.

    The first returned result is the tracker; when ``with_baseline`` a
    static-box baseline result follows.
    """
    from .tracker import track_sequence
    per_seq, base_seq = [], []
    for seq in sequences:
        pred = track_sequence(params, seq.frames, seq.truth[0],
                              reset_interval=reset_interval)
        per_seq.append(ope_evaluate(pred, seq.truth[1:], seq.occluded[1:],
                                    threshold_step=threshold_step))
        if with_baseline:
            base = baseline_static(seq.frames, seq.truth[0])
            base_seq.append(ope_evaluate(base, seq.truth[1:], seq.occluded[1:],
                                         threshold_step=threshold_step))
    results = [merge_results(per_seq, name, threshold_step)]
    if with_baseline:
        results.append(merge_results(base_seq, "static_baseline", threshold_step))
    return results


def compare(results, out_dir: Path | None = None):
    """Tabulate named results; row order is stable (sorted by name).

    Writes summary.csv and success_curve.csv under ``out_dir`` when
    given. Methods with no occluded frames get empty occluded columns.
    """
    rows = []
    for r in sorted(results, key=lambda r: r.name):
        rows.append({
            "method": r.name,
            "accuracy": f"{r.accuracy:.6f}",
            "drops": str(r.drops),
            "robustness": f"{r.robustness:.6f}",
            "average": f"{r.average:.6f}",
            "auc": f"{r.auc:.6f}",
            "auc_occluded": "" if r.auc_occluded is None else f"{r.auc_occluded:.6f}",
        })
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "summary.csv", "w", newline="") as f:
            f.write(f"# {ROBUSTNESS_NOTE}\n")
            w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
        with open(out_dir / "success_curve.csv", "w", newline="") as f:
            f.write("method,threshold,fraction\n")
            for r in sorted(results, key=lambda r: r.name):
                for t, s in zip(r.thresholds, r.success):
                    f.write(f"{r.name},{t:.2f},{s:.6f}\n")
    return rows
