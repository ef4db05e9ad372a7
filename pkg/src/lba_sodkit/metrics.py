"""Salient-object evaluation metrics: MAE, S-measure, F-measure and
E-measure (curves, max, mean, adaptive), plus dataset aggregation.

Saliency maps are float arrays in [0, 1]; masks are boolean. Curves are
sampled at the 256 thresholds ``t / 255`` and a pixel counts as positive when
``s >= threshold``. The ``max`` and ``mean`` summaries of a curve are taken
over the rows with a positive threshold: at ``t = 0`` every pixel is
positive, so that row carries no information about the map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

ALPHA = 0.5
BETA2 = 0.3
N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0
ALIGN_EPS = 1e-8
EPS = np.finfo(np.float64).eps
# weight of the dispersion term in the object score
OBJECT_LAMBDA = 0.5

FLAG_EMPTY_GT = "empty_gt"
FLAG_FULL_GT = "full_gt"
FLAG_EMPTY_ADAPTIVE = "empty_adaptive_prediction"


def _check_pair(s: np.ndarray, g: np.ndarray) -> None:
    if s.shape != g.shape:
        raise ShapeError(f"saliency {s.shape} and mask {g.shape} differ")
    if s.ndim != 2:
        raise ShapeError(f"expected 2-D maps, got {s.ndim}-D")


def normalize_saliency(s: np.ndarray) -> np.ndarray:
    """Bring a prediction into [0, 1]: 8-bit maps are divided by 255, other
    maps whose range leaves [0, 1] are min-max rescaled."""
    s = np.asarray(s)
    if s.dtype == np.uint8:
        return s.astype(np.float64) / 255.0
    s = s.astype(np.float64)
    lo, hi = float(s.min()), float(s.max())
    if lo < 0.0 or hi > 1.0:
        s = (s - lo) / (hi - lo + EPS)
    return s


def as_mask(g: np.ndarray) -> np.ndarray:
    """Boolean mask; 8-bit masks are split at 128, others must be 0/1."""
    g = np.asarray(g)
    if g.dtype == np.bool_:
        return g
    if g.dtype == np.uint8:
        return g >= 128
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("mask is not binary")
    return g.astype(bool)


# ---------------------------------------------------------------------------
# MAE

def mae(s: np.ndarray, g: np.ndarray) -> float:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeError(f"shapes {s.shape} and {g.shape} differ")
    return float(np.mean(np.abs(s - g)))


# ---------------------------------------------------------------------------
# S-measure

def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = float(x.mean())
    return 2.0 * mean / (mean * mean + 1.0 + 2.0 * OBJECT_LAMBDA * _std(x) + EPS)


def object_similarity(s: np.ndarray, g: np.ndarray) -> float:
    mu = float(g.mean())
    fg = _object_score(s[g])
    bg = _object_score(1.0 - s[~g])
    return mu * fg + (1.0 - mu) * bg


def _nearest_boundaries(total: int, count: int) -> tuple[int, ...]:
    """Pixel boundaries nearest the centroid line ``total / count + 0.5``.

    Exact integer arithmetic; a tie returns both neighbours so that a
    mirrored mask gets the mirrored split.
    """
    den = 2 * count
    q, r = divmod(2 * total + count, den)
    if 2 * r < den:
        return (q,)
    if 2 * r > den:
        return (q + 1,)
    return (q, q + 1)


def split_points(g: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Candidate region splits (rows, cols) at the foreground centroid; the
    top-left block of a split ``(r, c)`` holds rows ``[0, r)`` and cols ``[0, c)``."""
    rows, cols = np.nonzero(g)
    n = len(rows)
    return _nearest_boundaries(int(rows.sum()), n), _nearest_boundaries(int(cols.sum()), n)


def block_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """SSIM-like agreement of a prediction block ``x`` with mask block ``y``."""
    n = x.size
    if n == 0:
        return 0.0
    mx, my = float(x.mean()), float(y.mean())
    denom = n - 1 if n > 1 else 1
    dx, dy = x - mx, y - my
    vx = float(np.sum(dx * dx)) / denom
    vy = float(np.sum(dy * dy)) / denom
    cxy = float(np.sum(dx * dy)) / denom
    num = 4.0 * mx * my * cxy
    den = (mx * mx + my * my) * (vx + vy)
    if num != 0.0:
        return num / den
    return 1.0 if den == 0.0 else 0.0


def region_similarity(s: np.ndarray, g: np.ndarray) -> float:
    """Area-weighted block agreement over the four centroid quadrants,
    averaged over tied split candidates."""
    h, w = g.shape
    gf = g.astype(np.float64)
    rows, cols = split_points(g)
    scores = []
    for r in rows:
        for c in cols:
            total = 0.0
            for rs in (slice(0, r), slice(r, h)):
                for cs in (slice(0, c), slice(c, w)):
                    block = s[rs, cs]
                    if block.size:
                        total += block.size / (h * w) * block_similarity(block, gf[rs, cs])
            scores.append(total)
    return float(np.mean(scores))


def s_measure(s: np.ndarray, g: np.ndarray, alpha: float = ALPHA) -> float:
    s = np.asarray(s, dtype=np.float64)
    g = as_mask(g)
    _check_pair(s, g)
    mu = float(g.mean())
    if mu == 0.0:
        return float(1.0 - s.mean())
    if mu == 1.0:
        return float(s.mean())
    value = alpha * object_similarity(s, g) + (1.0 - alpha) * region_similarity(s, g)
    return float(np.clip(value, 0.0, 1.0))


# ---------------------------------------------------------------------------
# thresholded curves

def adaptive_threshold(s: np.ndarray) -> float:
    return min(2.0 * float(np.mean(s)), 1.0)


def confusion_counts(s: np.ndarray, g: np.ndarray, thresholds: np.ndarray = THRESHOLDS):
    """(tp, fp) per threshold and the foreground count, via cumulative histograms."""
    # number of thresholds each pixel clears
    level = np.searchsorted(thresholds, s.ravel(), side="right")
    gm = g.ravel()
    nt = len(thresholds)
    fg_hist = np.bincount(level[gm], minlength=nt + 1)
    bg_hist = np.bincount(level[~gm], minlength=nt + 1)
    # a pixel at level k is positive for thresholds 0..k-1
    tp = np.cumsum(fg_hist[::-1])[::-1][1:]
    fp = np.cumsum(bg_hist[::-1])[::-1][1:]
    return tp.astype(np.int64), fp.astype(np.int64), int(gm.sum())


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f_from_counts(tp, fp, n_fg, beta2: float = BETA2):
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, np.full_like(np.asarray(tp, dtype=np.float64), n_fg))
    f = _ratio((1.0 + beta2) * precision * recall, beta2 * precision + recall)
    return precision, recall, f


def e_from_counts(tp, fp, n_fg, n):
    """Mean enhanced alignment for binary predictions described by counts."""
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if n_fg == 0:
        return 1.0 - (tp + fp) / n
    if n_fg == n:
        return (tp + fp) / n
    fn = n_fg - tp
    tn = n - n_fg - fp
    m_fm = (tp + fp) / n
    m_gt = n_fg / n
    total = np.zeros_like(tp)
    for count, fm, gt in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        a = gt - m_gt
        b = fm - m_fm
        phi = 2.0 * a * b / (a * a + b * b + ALIGN_EPS)
        total = total + count * (phi + 1.0) ** 2 / 4.0
    return total / n


@dataclass
class Curve256:
    """Per-threshold precision, recall, F and E values."""
    threshold: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    e: np.ndarray

    COLUMNS = ("threshold", "precision", "recall", "f", "e")

    def as_array(self) -> np.ndarray:
        return np.stack([getattr(self, c) for c in self.COLUMNS], axis=1)

    @classmethod
    def mean(cls, curves: list["Curve256"]) -> "Curve256":
        stacked = np.mean([c.as_array() for c in curves], axis=0)
        return cls(*stacked.T.copy())


def _summary(values: np.ndarray) -> tuple[float, float]:
    informative = values[1:]
    return float(informative.max()), float(informative.mean())


def f_measure_suite(s: np.ndarray, g: np.ndarray, beta2: float = BETA2) -> dict:
    s = np.asarray(s, dtype=np.float64)
    g = as_mask(g)
    _check_pair(s, g)
    tp, fp, n_fg = confusion_counts(s, g)
    precision, recall, f = f_from_counts(tp, fp, n_fg, beta2)
    f_max, f_mean = _summary(f)
    pos = s >= adaptive_threshold(s)
    _, _, f_adp = f_from_counts(np.sum(pos & g), np.sum(pos & ~g), n_fg, beta2)
    return {"precision": precision, "recall": recall, "curve": f,
            "f_max": f_max, "f_mean": f_mean, "f_adp": float(f_adp),
            "empty_gt": n_fg == 0, "empty_adaptive": not pos.any()}


def e_measure_suite(s: np.ndarray, g: np.ndarray) -> dict:
    s = np.asarray(s, dtype=np.float64)
    g = as_mask(g)
    _check_pair(s, g)
    tp, fp, n_fg = confusion_counts(s, g)
    e = e_from_counts(tp, fp, n_fg, g.size)
    e_max, e_mean = _summary(e)
    pos = s >= adaptive_threshold(s)
    e_adp = e_from_counts(np.sum(pos & g), np.sum(pos & ~g), n_fg, g.size)
    return {"curve": e, "e_max": e_max, "e_mean": e_mean, "e_adp": float(e_adp)}


# ---------------------------------------------------------------------------
# reports

SCALARS = ("mae", "s_alpha", "f_max", "f_mean", "f_adp", "e_max", "e_mean", "e_adp")


@dataclass
class MetricReport:
    mae: float
    s_alpha: float
    f_max: float
    f_mean: float
    f_adp: float
    e_max: float
    e_mean: float
    e_adp: float
    curves: Curve256
    # for a dataset report: mean over images of each image's own curve maximum
    f_max_per_image: float = 0.0
    e_max_per_image: float = 0.0
    flags: list[str] = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in SCALARS}

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in SCALARS])


def evaluate_pair(s: np.ndarray, g: np.ndarray, alpha: float = ALPHA,
                  beta2: float = BETA2) -> MetricReport:
    """All eight metrics and both curves for one prediction/mask pair."""
    s = normalize_saliency(s)
    g = as_mask(g)
    _check_pair(s, g)
    fs = f_measure_suite(s, g, beta2)
    es = e_measure_suite(s, g)
    flags = []
    if fs["empty_gt"]:
        flags.append(FLAG_EMPTY_GT)
    elif g.all():
        flags.append(FLAG_FULL_GT)
    if fs["empty_adaptive"]:
        flags.append(FLAG_EMPTY_ADAPTIVE)
    curves = Curve256(THRESHOLDS.copy(), fs["precision"], fs["recall"], fs["curve"], es["curve"])
    return MetricReport(
        mae=mae(s, g), s_alpha=s_measure(s, g, alpha),
        f_max=fs["f_max"], f_mean=fs["f_mean"], f_adp=fs["f_adp"],
        e_max=es["e_max"], e_mean=es["e_mean"], e_adp=es["e_adp"],
        curves=curves, f_max_per_image=fs["f_max"], e_max_per_image=es["e_max"],
        flags=flags)


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Dataset report: means of every scalar and curve column, with the max
    summaries read off the mean curves."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    curves = Curve256.mean([r.curves for r in reports])
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in SCALARS}
    f_max, f_mean = _summary(curves.f)
    e_max, e_mean = _summary(curves.e)
    mean.update(f_max=f_max, e_max=e_max)
    return MetricReport(
        **mean, curves=curves,
        f_max_per_image=float(np.mean([r.f_max_per_image for r in reports])),
        e_max_per_image=float(np.mean([r.e_max_per_image for r in reports])))
