"""Standard metric-depth error and accuracy measures.

Split-level numbers are pixel-pooled: per-pixel terms from every image are
summed with ``math.fsum`` (exactly rounded, so the result does not depend on
ordering or chunking) and reduced once.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .camera import resize_nearest
from .codec import DepthMap

METRIC_NAMES = ("rel", "rmse", "delta1", "delta2", "delta3", "log10", "sq_rel", "rms_log")


@dataclass(frozen=True)
class EvalProtocol:
    min_depth: float = 0.5
    max_depth: float = 10.0
    resize_pred_to_gt: bool = True

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError(f"need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}")


@dataclass
class MetricReport:
    rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    log10: float
    sq_rel: float
    rms_log: float
    n_pixels: int

    def to_dict(self, protocol: EvalProtocol | None = None) -> dict:
        d = asdict(self)
        if protocol is not None:
            d["protocol"] = asdict(protocol)
        return d

    def to_json(self, protocol: EvalProtocol | None = None) -> str:
        return json.dumps(self.to_dict(protocol), indent=1)


def csv_rows(reports: dict[str, MetricReport]) -> str:
    """One CSV row per named split."""
    buf = io.StringIO()
    names = [f.name for f in fields(MetricReport)]
    w = csv.writer(buf)
    w.writerow(["split", *names])
    for split, r in reports.items():
        w.writerow([split, *(getattr(r, n) for n in names)])
    return buf.getvalue()


class EmptyEvaluationError(ValueError):
    pass


def _as_depth(x) -> DepthMap:
    return x if isinstance(x, DepthMap) else DepthMap.dense(x)


def _pixel_terms(pred, gt, protocol: EvalProtocol) -> dict[str, np.ndarray]:
    pred, gt = _as_depth(pred), _as_depth(gt)
    p = pred.values
    if p.shape != gt.values.shape:
        if not protocol.resize_pred_to_gt:
            raise ValueError(f"prediction {p.shape} and ground truth {gt.values.shape} differ in shape")
        p = resize_nearest(p, *gt.values.shape)
    g = gt.values
    mask = gt.valid_mask & (g >= protocol.min_depth) & (g <= protocol.max_depth)
    p, g = p[mask], g[mask]
    p_log = np.maximum(p, protocol.min_depth)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    diff = p - g
    return {
        "abs_rel": np.abs(diff) / g,
        "sq": diff**2,
        "sq_rel": diff**2 / g,
        "log10": np.abs(np.log10(p_log) - np.log10(g)),
        "log_sq": (np.log(p_log) - np.log(g)) ** 2,
        "ratio": ratio,
    }


def _reduce(terms: list[dict[str, np.ndarray]]) -> MetricReport:
    n = sum(len(t["sq"]) for t in terms)
    if n == 0:
        raise EmptyEvaluationError("no ground-truth pixels inside the evaluation range")

    def mean(key):
        return math.fsum(itertools.chain.from_iterable(t[key].tolist() for t in terms)) / n

    def delta(i):
        return sum(int((t["ratio"] < 1.25**i).sum()) for t in terms) / n

    return MetricReport(
        rel=mean("abs_rel"),
        rmse=math.sqrt(mean("sq")),
        delta1=delta(1),
        delta2=delta(2),
        delta3=delta(3),
        log10=mean("log10"),
        sq_rel=mean("sq_rel"),
        rms_log=math.sqrt(mean("log_sq")),
        n_pixels=n,
    )


def evaluate_pair(pred, gt, protocol: EvalProtocol = EvalProtocol()) -> MetricReport:
    return _reduce([_pixel_terms(pred, gt, protocol)])


def evaluate_split(preds: Sequence, gts: Sequence, protocol: EvalProtocol = EvalProtocol()) -> MetricReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    if not preds:
        raise ValueError("empty split")
    return _reduce([_pixel_terms(p, g, protocol) for p, g in zip(preds, gts)])
