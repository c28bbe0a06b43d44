"""Dice over composite regions, leave-one-subject-out CV and method comparison."""
from __future__ import annotations

import csv
import io
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np
from scipy.stats import binomtest

from .grid import LabelMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegionSpec:
    name: str
    members: tuple

    def __post_init__(self):
        members = tuple(sorted({int(m) for m in self.members}))
        if not members:
            raise ValueError(f"region {self.name!r} has no member classes")
        if members[0] < 0:
            raise ValueError(f"region {self.name!r} has a negative class id")
        object.__setattr__(self, "members", members)

    def check(self, n_classes: int):
        if self.members[-1] >= n_classes:
            raise ValueError(f"region {self.name!r} names class {self.members[-1]} but there are {n_classes}")

    def mask(self, labels: LabelMap | np.ndarray) -> np.ndarray:
        arr = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
        return np.isin(arr, self.members)


def default_regions() -> list[RegionSpec]:
    from .synthgen import REGIONS
    return [RegionSpec(name, members) for name, members in REGIONS.items()]


def dice_masks(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice(gt: LabelMap, pred: LabelMap, region: RegionSpec) -> float:
    if gt.shape != pred.shape:
        raise ValueError(f"label map shapes differ: {gt.shape} vs {pred.shape}")
    region.check(max(gt.n_classes, pred.n_classes))
    return dice_masks(region.mask(gt), region.mask(pred))


# --- cross-validation ----------------------------------------------------------------------

@dataclass
class Method:
    """``train(train_set, cache)`` returns an object with ``predict(img, cache) -> (LabelMap, ProbabilityMap)``."""

    name: str
    train: Callable


def sign_test(a, b) -> float:
    """Two-sided paired sign test; ties are dropped."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    return float(binomtest(int((d > 0).sum()), int(d.size), 0.5).pvalue)


@dataclass
class CvReport:
    methods: list
    regions: list
    n_folds: int
    scores: dict = field(default_factory=dict)     # (method, region, fold) -> dice
    failures: dict = field(default_factory=dict)   # (method, fold) -> message

    @property
    def ok(self) -> bool:
        return not self.failures

    def fold_scores(self, method: str, region: str) -> np.ndarray:
        return np.array([self.scores[(method, region, f)] for f in range(self.n_folds)
                         if (method, region, f) in self.scores])

    def mean(self, method: str, region: str) -> float:
        s = self.fold_scores(method, region)
        return float(s.mean()) if s.size else math.nan

    def std(self, method: str, region: str) -> float:
        s = self.fold_scores(method, region)
        return float(s.std(ddof=1)) if s.size > 1 else 0.0 if s.size else math.nan

    def paired(self, a: str, b: str, region: str) -> float:
        folds = [f for f in range(self.n_folds)
                 if (a, region, f) in self.scores and (b, region, f) in self.scores]
        return sign_test([self.scores[(a, region, f)] for f in folds],
                         [self.scores[(b, region, f)] for f in folds])

    def fold_status(self, method: str, fold: int) -> str:
        return "failed" if (method, fold) in self.failures else "ok"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "region", "fold", "dice"])
        for m in self.methods:
            for r in self.regions:
                for f in range(self.n_folds):
                    v = self.scores.get((m, r, f))
                    w.writerow([m, r, f, "failed" if v is None else repr(v)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"{r}_{s}" for r in self.regions for s in ("mean", "std")])
        for m in self.methods:
            w.writerow([m] + [f"{v:.6f}" for r in self.regions for v in (self.mean(m, r), self.std(m, r))])
        return buf.getvalue()

    def pvalue_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method_a", "method_b", "region", "p_value"])
        for a, b in combinations(self.methods, 2):
            for r in self.regions:
                w.writerow([a, b, r, f"{self.paired(a, b, r):.6g}"])
        return buf.getvalue()

    def table(self) -> str:
        """Aligned text table: one row per method, mean (std) Dice in percent per region."""
        width = max(len("Method"), *(len(m) for m in self.methods))
        head = "Method".ljust(width) + "".join(f"{r:>16}" for r in self.regions)
        lines = [head, "-" * len(head)]
        for m in self.methods:
            cells = "".join(f"{100 * self.mean(m, r):>9.2f} ({100 * self.std(m, r):4.1f})" for r in self.regions)
            lines.append(m.ljust(width) + cells)
        if self.failures:
            lines.append(f"failed folds: {len(self.failures)}")
        return "\n".join(lines)


def _dedupe(methods: list[Method]) -> list[Method]:
    seen, out = set(), []
    for m in methods:
        if m.name in seen:
            log.warning("duplicate method %r ignored", m.name)
            continue
        seen.add(m.name)
        out.append(m)
    return out


_JOB = {}


def _run_fold(fold: int):
    dataset, methods, regions, on_prediction = (_JOB[k] for k in ("dataset", "methods", "regions", "hook"))
    from .dmt import FitCache
    cache = FitCache()
    train = [d for i, d in enumerate(dataset) if i != fold]
    img, gt = dataset[fold]
    scores, failures = {}, {}
    for m in methods:
        try:
            model = m.train(train, cache)
            labels, probs = model.predict(img, cache)
        except Exception as exc:  # a failed fold is recorded, the run goes on
            log.error("method %s failed on fold %d: %s", m.name, fold, exc)
            failures[(m.name, fold)] = f"{type(exc).__name__}: {exc}"
            continue
        if on_prediction is not None:
            on_prediction(m.name, fold, labels, probs)
        for r in regions:
            scores[(m.name, r.name, fold)] = dice(gt, labels, r)
    log.info("fold %d done (%d cached fits reused)", fold, cache.hits)
    return scores, failures


def run_cv(dataset, methods: list[Method], regions: list[RegionSpec], jobs: int = 1,
           on_prediction=None) -> CvReport:
    """Leave-one-subject-out CV: every method is trained on all but one subject and scored on it.

    Fits that coincide between methods in a fold (same kind, parameters, seed,
    training set and context) are computed once.
    """
    if len(dataset) < 2:
        raise ValueError("cross-validation needs at least 2 subjects")
    methods = _dedupe(methods)
    n_classes = dataset[0][1].n_classes
    for r in regions:
        r.check(n_classes)
    report = CvReport([m.name for m in methods], [r.name for r in regions], len(dataset))
    _JOB.update(dataset=dataset, methods=methods, regions=regions, hook=on_prediction)
    try:
        folds = range(len(dataset))
        if jobs > 1 and on_prediction is None:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                results = list(pool.map(_run_fold, folds))
        else:
            results = [_run_fold(f) for f in folds]
    finally:
        _JOB.clear()
    for scores, failures in results:
        report.scores.update(scores)
        report.failures.update(failures)
    return report
