"""Span inference, temporal IoU and the R@1 / mIoU report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag

MUS = (0.3, 0.5, 0.7)
HIST_BINS = 10


@dataclass
class Prediction:
    video_id: str
    i_start: int
    i_end: int
    t_start: float
    t_end: float
    score: float

    def to_json(self) -> str:
        return json.dumps({"video_id": self.video_id, "t_start": self.t_start,
                           "t_end": self.t_end, "score": self.score})


@dataclass
class EvalReport:
    ious: list[float]
    r1: dict[float, float]
    miou: float
    histogram: list[int]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "count": len(self.ious),
            "miou": self.miou,
            **{f"r1@{mu}": v for mu, v in self.r1.items()},
            "histogram": {"edges": [round(i / HIST_BINS, 1) for i in range(HIST_BINS + 1)],
                          "counts": self.histogram},
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def histogram_text(self, width: int = 40) -> str:
        """Plain-text bar chart of sample counts per IoU bin."""
        peak = max(self.histogram) or 1
        rows = []
        for i, c in enumerate(self.histogram):
            lo, hi = i / HIST_BINS, (i + 1) / HIST_BINS
            bracket = "]" if i == HIST_BINS - 1 else ")"
            bar = "#" * round(width * c / peak)
            rows.append(f"[{lo:.1f},{hi:.1f}{bracket} {c:6d} {bar}")
        return "\n".join(rows)


def infer_span(p_start, p_end, mask=None) -> tuple[int, int]:
    """Maximise ``p_start[a] * p_end[b]`` subject to ``a <= b`` over valid positions.

    Ties go to the smallest ``a`` and then the smallest ``b`` (row-major
    first occurrence of the maximum).
    """
    ps = np.asarray(p_start, dtype=np.float64)
    pe = np.asarray(p_end, dtype=np.float64)
    n = ps.shape[0]
    valid = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid position to place a span")
    joint = np.outer(ps, pe)
    allowed = np.triu(np.ones((n, n), dtype=bool)) & valid[:, None] & valid[None, :]
    joint = np.where(allowed, joint, -np.inf)
    flat = int(np.argmax(joint))
    return flat // n, flat % n


def infer_spans(p_start, p_end, mask) -> np.ndarray:
    """Batched :func:`infer_span`; returns ``(B, 2)`` indices."""
    return np.array([infer_span(a, b, m) for a, b, m in zip(p_start, p_end, mask)], dtype=np.int64)


def iou(pred: Sequence[float], gt: Sequence[float]) -> float:
    ps, pe = pred
    gs, ge = gt
    if ps > pe or gs > ge:
        raise ValueError(f"inverted interval: pred={tuple(pred)}, gt={tuple(gt)}")
    union = max(pe, ge) - min(ps, gs)
    if union == 0:
        return 1.0
    return max(0.0, (min(pe, ge) - max(ps, gs)) / union)


def aggregate(ious: Iterable[float], mus: Sequence[float] = MUS) -> EvalReport:
    """R@1 uses a strict ``IoU > mu``; the last histogram bin is closed at 1.0."""
    vals = np.asarray(list(ious), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot aggregate an empty IoU list")
    r1 = {mu: float(np.mean(vals > mu)) for mu in mus}
    bins = np.minimum((vals * HIST_BINS).astype(int), HIST_BINS - 1)
    hist = np.bincount(bins, minlength=HIST_BINS).tolist()
    return EvalReport(vals.tolist(), r1, float(vals.mean()), hist)


def predict(model, dataset, batch_size: int = 64) -> list[Prediction]:
    """Eval-mode forward over ``dataset`` (no shuffling), one prediction per sample."""
    model.eval()
    out = []
    with ag.no_grad():
        for batch in dataset.batches(batch_size):
            trace = model.forward(batch)
            ps, pe = trace.p_start.data, trace.p_end.data
            spans = infer_spans(ps, pe, batch.video_mask)
            for row, (a, b) in enumerate(spans):
                idx = batch.meta["index"][row]
                t0, t1 = dataset.index_to_time(idx, a), dataset.index_to_time(idx, b)
                out.append(Prediction(dataset.video_ids[idx], int(a), int(b), t0, t1,
                                      float(ps[row, a] * pe[row, b])))
    return out


def score_predictions(predictions: Sequence[Prediction], dataset) -> EvalReport:
    if len(predictions) != len(dataset):
        raise ValueError(f"{len(predictions)} predictions for {len(dataset)} samples")
    ious = [iou((p.t_start, p.t_end), dataset.gt_times(i)) for i, p in enumerate(predictions)]
    return aggregate(ious)


def evaluate_model(model, dataset, batch_size: int = 64) -> EvalReport:
    return score_predictions(predict(model, dataset, batch_size), dataset)


def write_predictions(path, predictions: Sequence[Prediction]) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(p.to_json() + "\n")


def read_predictions(path) -> list[Prediction]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out.append(Prediction(r["video_id"], -1, -1, float(r["t_start"]), float(r["t_end"]),
                                  float(r["score"])))
    return out
