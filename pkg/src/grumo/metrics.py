"""Depth errors, sparsification curves (AUSE / AURG) and normalized UCE."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

METRICS = ("absrel", "rmse", "delta")
DEFAULT_STEPS = 49        # fractions 0, 0.02, ..., 0.98
DEFAULT_BINS = 100
MAX_FRACTION = 98         # percent


@dataclass(frozen=True)
class PixelRecords:
    gt: np.ndarray
    pred: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if not (self.gt.shape == self.pred.shape == self.u.shape) or self.gt.ndim != 1:
            raise ValueError("records need equal-length 1-d arrays")

    def __len__(self):
        return self.gt.size

    @classmethod
    def from_maps(cls, gt, pred, u, mask=None) -> "PixelRecords":
        """Flatten rasters, keeping mask-true pixels with positive finite depth."""
        gt, pred, u = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (gt, pred, u))
        keep = (gt > 0) & np.isfinite(gt) & np.isfinite(pred) & np.isfinite(u)
        if mask is not None:
            keep &= np.asarray(mask, dtype=bool).reshape(-1)
        return cls(gt[keep], pred[keep], u[keep])

    @classmethod
    def concat(cls, recs) -> "PixelRecords":
        recs = list(recs)
        return cls(*(np.concatenate([getattr(r, k) for r in recs]) for k in ("gt", "pred", "u")))


def pixel_errors(rec: PixelRecords, kind: str) -> np.ndarray:
    if len(rec) == 0:
        raise ValueError("no pixels")
    d, p = rec.gt, rec.pred
    if kind == "absrel":
        return np.abs(p - d) / d
    if kind == "rmse":
        return (p - d) ** 2
    if kind == "delta":
        return (np.maximum(p / d, d / p) >= 1.25).astype(np.float64)
    raise ValueError(f"unknown metric {kind!r}")


def subset_metric(err, kind: str) -> float:
    err = np.asarray(err, dtype=np.float64)
    if err.size == 0:
        raise ValueError("empty subset")
    m = float(np.mean(err))
    return float(np.sqrt(m)) if kind == "rmse" else m


def removal_counts(n: int, steps: int) -> np.ndarray:
    """floor(phi_t * n) for phi_t = t * 0.98 / steps, in exact integer arithmetic."""
    t = np.arange(steps + 1, dtype=np.int64)
    return (t * MAX_FRACTION * n) // (100 * steps)


def _descending(v):
    # stable sort on negated values: ties keep ascending pixel index
    return np.argsort(-np.asarray(v, dtype=np.float64), kind="stable")


@dataclass
class SparsificationResult:
    kind: str
    fractions: np.ndarray
    oracle: np.ndarray
    actual: np.ndarray
    random: np.ndarray
    ause: float = field(init=False)
    aurg: float = field(init=False)

    def __post_init__(self):
        self.ause = float(np.mean(self.actual - self.oracle))
        self.aurg = float(np.mean(self.random - self.actual))


def sparsification(rec: PixelRecords, kind: str, steps: int = DEFAULT_STEPS) -> SparsificationResult:
    n = len(rec)
    if steps < 2:
        raise ValueError("steps must be >= 2")
    steps = min(steps, n)
    if steps < 1:
        raise ValueError("no pixels")
    err = pixel_errors(rec, kind)
    counts = removal_counts(n, steps)
    fractions = np.arange(steps + 1) * (MAX_FRACTION / 100 / steps)
    e_oracle = err[_descending(err)]
    e_actual = err[_descending(rec.u)]
    oracle = np.array([subset_metric(e_oracle[k:], kind) for k in counts])
    actual = np.array([subset_metric(e_actual[k:], kind) for k in counts])
    random = np.full(steps + 1, subset_metric(err, kind))
    return SparsificationResult(kind, fractions, oracle, actual, random)


def aggregate_sparsification(results) -> SparsificationResult:
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    r0 = results[0]
    for r in results[1:]:
        if r.kind != r0.kind:
            raise ValueError(f"metric kinds differ: {r0.kind} vs {r.kind}")
        if r.fractions.shape != r0.fractions.shape or not np.array_equal(r.fractions, r0.fractions):
            raise ValueError("fraction grids differ")
    mean = lambda k: np.mean([getattr(r, k) for r in results], axis=0)  # noqa: E731
    return SparsificationResult(r0.kind, r0.fractions.copy(), mean("oracle"), mean("actual"), mean("random"))


def _minmax(a):
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def nuce(rec: PixelRecords, bins: int = DEFAULT_BINS) -> float:
    """Calibration error after min-max normalizing squared errors and scores.

    Normalized values are rounded to float32, the precision uncertainty maps
    are stored in, before binning and averaging.
    """
    if len(rec) == 0:
        raise ValueError("no pixels")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    e = _minmax((rec.pred - rec.gt) ** 2).astype(np.float32).astype(np.float64)
    u = _minmax(np.asarray(rec.u, dtype=np.float64)).astype(np.float32).astype(np.float64)
    # bin m holds edges[m] <= e < edges[m+1]; the last bin is closed on the right
    edges = np.arange(bins + 1) / bins
    idx = np.minimum(np.searchsorted(edges, e, side="right") - 1, bins - 1)
    n = e.size
    count = np.bincount(idx, minlength=bins)
    se = np.bincount(idx, weights=e, minlength=bins)
    su = np.bincount(idx, weights=u, minlength=bins)
    nz = count > 0
    gap = np.abs(se[nz] / count[nz] - su[nz] / count[nz])
    return float(np.sum(count[nz] / n * gap))


def spearman(u, err) -> float:
    u, err = np.asarray(u).reshape(-1), np.asarray(err).reshape(-1)
    if u.size < 2 or np.all(u == u[0]) or np.all(err == err[0]):
        return 0.0   # undefined for constant input
    r = stats.spearmanr(u, err).statistic
    return float(r) if np.isfinite(r) else 0.0


@dataclass
class MethodReport:
    method: str
    curves: dict            # kind -> aggregated SparsificationResult
    per_image: dict         # kind -> list of per-image results
    nuce: float
    depth: dict             # kind -> mean per-image full-set metric
    n_images: int
    coverage: float
    image_ids: list = field(default_factory=list)


def evaluate_method(method: str, items, steps: int = DEFAULT_STEPS, bins: int = DEFAULT_BINS) -> MethodReport:
    """``items``: iterable of (image_id, gt, pred, u, mask) rasters."""
    per_image = {k: [] for k in METRICS}
    recs, ids, valid, total = [], [], 0, 0
    for img_id, gt, pred, u, mask in items:
        r = PixelRecords.from_maps(gt, pred, u, mask)
        total += np.asarray(gt).size
        valid += len(r)
        if len(r) == 0:
            continue
        recs.append(r)
        ids.append(str(img_id))
        for k in METRICS:
            per_image[k].append(sparsification(r, k, steps))
    if not recs:
        raise ValueError(f"method {method}: no valid pixels")
    curves = {k: aggregate_sparsification(v) for k, v in per_image.items()}
    depth = {k: float(np.mean([r.random[0] for r in per_image[k]])) for k in METRICS}
    return MethodReport(method, curves, per_image, nuce(PixelRecords.concat(recs), bins), depth,
                        len(recs), valid / total, ids)
