"""Affordance metrics: top-1 and multi-label classification, localisation and distance.

Definitions used throughout:

* direction accuracy: ground-truth-present (frame, class) pairs predicted
  present, over all ground-truth-present pairs (recall over directions).
* image accuracy: frames whose predicted presence set equals the truth set.
* attention offset and distance error: averaged over (frame, class) pairs
  that are present in both prediction and truth.
* top-1: the predicted class is the highest-scoring one; the true class is
  the present class with the smallest remaining distance (the nearest
  affordance). Frames without any present class are left out.
* precision/recall with an empty denominator are reported as 1.0 (no error
  of that kind was possible).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .annotation import CompleteAffordance
from .labels import CLASSES, K

HEADER = ("direction accuracy = recall over ground-truth drivable directions; "
          "image accuracy = exact match of the predicted direction set; "
          "offsets and distance errors over classes present in both prediction and truth")


class FrameMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    accuracy: float
    confusion: tuple[tuple[int, int], tuple[int, int]]   # [[TN, FP], [FN, TP]]
    support: int
    distance_l1: float
    matched: int


@dataclass(frozen=True)
class MetricsReport:
    n_frames: int
    top1_confusion: np.ndarray
    top1_accuracy: float
    per_class: dict
    direction_accuracy: float
    image_accuracy: float
    attention_offset: tuple[float, float]
    distance_l1: float
    matched_pairs: int

    def to_dict(self) -> dict:
        return {
            "definitions": HEADER,
            "n_frames": self.n_frames,
            "top1_confusion": self.top1_confusion.tolist(),
            "top1_accuracy": self.top1_accuracy,
            "direction_accuracy": self.direction_accuracy,
            "image_accuracy": self.image_accuracy,
            "attention_offset": {"u": _nan_none(self.attention_offset[0]), "v": _nan_none(self.attention_offset[1])},
            "distance_l1": _nan_none(self.distance_l1),
            "matched_pairs": self.matched_pairs,
            "per_class": {name: {k: (_nan_none(v) if isinstance(v, float) else v)
                                 for k, v in asdict(m).items()} for name, m in self.per_class.items()},
        }


def _nan_none(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def _ratio(num, den, empty=1.0):
    return float(num) / den if den else empty


def _mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


def attention_offset(pred_center, true_center, D: int = 16) -> tuple[int, int]:
    """Absolute grid-cell offsets between two pixel centers."""
    du = abs(math.floor(pred_center[0] / D) - math.floor(true_center[0] / D))
    dv = abs(math.floor(pred_center[1] / D) - math.floor(true_center[1] / D))
    return int(du), int(dv)


def top1_truth(rec: CompleteAffordance) -> int | None:
    best = None
    for k, c in enumerate(rec.classes):
        if c.present:
            d = c.distance if c.distance is not None else math.inf
            if best is None or d < best[0]:
                best = (d, k)
    return None if best is None else best[1]


def evaluate(predictions: Sequence[CompleteAffordance], truth: Sequence[CompleteAffordance],
             D: int = 16) -> MetricsReport:
    pred = {p.frame_id: p for p in predictions}
    true = {t.frame_id: t for t in truth}
    if len(pred) != len(predictions) or len(true) != len(truth):
        raise FrameMismatchError("duplicate frame ids")
    if pred.keys() != true.keys():
        missing = sorted(true.keys() - pred.keys())[:5]
        extra = sorted(pred.keys() - true.keys())[:5]
        raise FrameMismatchError(f"frame ids differ: missing predictions {missing}, unknown {extra}")

    conf = np.zeros((K, K), dtype=np.int64)
    binary = np.zeros((K, 2, 2), dtype=np.int64)
    exact = 0
    du, dv = [], []
    dist_err = [[] for _ in range(K)]
    for fid in sorted(true):
        p, t = pred[fid], true[fid]
        i = top1_truth(t)
        if i is not None:
            conf[i, int(np.argmax([c.score for c in p.classes]))] += 1
        exact += p.present_set == t.present_set
        for k in range(K):
            pk, tk = p.classes[k], t.classes[k]
            binary[k, int(tk.present), int(pk.present)] += 1
            if pk.present and tk.present:
                a, b = attention_offset(pk.attention_center, tk.attention_center, D)
                du.append(a)
                dv.append(b)
                dist_err[k].append(abs(pk.distance - tk.distance))

    n = len(true)
    per_class = {}
    for k, a in enumerate(CLASSES):
        (tn, fp), (fn, tp) = binary[k]
        per_class[a.value] = ClassMetrics(
            precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn),
            accuracy=_ratio(tp + tn, n), confusion=((int(tn), int(fp)), (int(fn), int(tp))),
            support=int(tp + fn), distance_l1=_mean(dist_err[k]), matched=len(dist_err[k]))
    tp_all = int(binary[:, 1, 1].sum())
    pos_all = int(binary[:, 1, :].sum())
    return MetricsReport(
        n_frames=n, top1_confusion=conf, top1_accuracy=_ratio(np.trace(conf), conf.sum()),
        per_class=per_class, direction_accuracy=_ratio(tp_all, pos_all),
        image_accuracy=_ratio(exact, n), attention_offset=(_mean(du), _mean(dv)),
        distance_l1=_mean([e for errs in dist_err for e in errs]), matched_pairs=len(du))


def format_report(rep: MetricsReport) -> str:
    def f(x, pct=True):
        if isinstance(x, float) and math.isnan(x):
            return "n/a"
        return f"{100 * x:.1f}" if pct else f"{x:.2f}"

    names = [a.value for a in CLASSES]
    lines = [f"# {HEADER}", f"frames: {rep.n_frames}", "",
             "Top-1 confusion (rows: truth, columns: prediction)",
             "          " + "".join(f"{n:>10}" for n in names)]
    for name, row in zip(names, rep.top1_confusion):
        lines.append(f"{name:>10}" + "".join(f"{v:>10d}" for v in row))
    lines += [f"Top-1 accuracy (%): {f(rep.top1_accuracy)}", "",
              f"{'class':>10}{'support':>10}{'prec %':>10}{'recall %':>10}{'acc %':>10}{'L1 (m)':>10}"]
    for name in names:
        m = rep.per_class[name]
        lines.append(f"{name:>10}{m.support:>10d}{f(m.precision):>10}{f(m.recall):>10}"
                     f"{f(m.accuracy):>10}{f(m.distance_l1, False):>10}")
    lines += ["",
              f"direction-level accuracy (%): {f(rep.direction_accuracy)}",
              f"image-level accuracy (%):     {f(rep.image_accuracy)}",
              f"attention offset (grid u / v): {f(rep.attention_offset[0], False)} / {f(rep.attention_offset[1], False)}",
              f"distance L1 (m):              {f(rep.distance_l1, False)}"]
    return "\n".join(lines) + "\n"


def bar_data(rep: MetricsReport) -> list[dict]:
    """Per-class bars for plotting: one record per (class, metric)."""
    out = []
    for name, m in rep.per_class.items():
        for metric in ("precision", "recall", "accuracy"):
            out.append({"class": name, "metric": metric, "value": getattr(m, metric)})
    return out


def write_report(rep: MetricsReport, text_path, json_path, bars_path=None) -> None:
    with open(text_path, "w") as fh:
        fh.write(format_report(rep))
    with open(json_path, "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if bars_path is not None:
        with open(bars_path, "w") as fh:
            fh.write("class,metric,value\n")
            for r in bar_data(rep):
                fh.write(f"{r['class']},{r['metric']},{r['value']!r}\n")
