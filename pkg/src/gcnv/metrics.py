"""Segmentation metrics, the quality-efficiency polygon area and paired significance tests.

Surfaces are the foreground voxels with at least one background 6-neighbour
(outside the grid counts as background). Distances are Euclidean in voxel
units.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, defaults

# -- overlap ------------------------------------------------------------------------------


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")
    return a, b


def overlap_metrics(pred, truth):
    """(Dice, IoU) of two binary masks; both empty counts as perfect agreement."""
    a, b = _check_pair(pred, truth)
    a, b = a.astype(bool), b.astype(bool)
    inter = int(np.count_nonzero(a & b))
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sa + sb), inter / (sa + sb - inter)


# -- surface distances ------------------------------------------------------------------------


def surface_voxels(mask):
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = np.ones_like(m)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            inner &= np.roll(padded, shift, axis=axis)[core]
    return np.argwhere(m & ~inner)


def surface_metrics(pred, truth, nsd_tolerance=defaults.NSD_TOLERANCE, percentile=defaults.HD_PERCENTILE):
    """(HD95, NSD) from the two directed surface-distance sets."""
    a, b = _check_pair(pred, truth)
    if not a.any() or not b.any():
        raise ValueError("surface metrics are undefined for an empty mask")
    sa, sb = surface_voxels(a), surface_voxels(b)
    da = _kernels.nearest_distances(sa.astype(np.float64), sb.astype(np.float64))
    db = _kernels.nearest_distances(sb.astype(np.float64), sa.astype(np.float64))
    hd = float(np.percentile(np.concatenate([da, db]), percentile))
    nsd = 0.5 * (float(np.mean(da <= nsd_tolerance)) + float(np.mean(db <= nsd_tolerance)))
    return hd, nsd


@dataclass
class MetricReport:
    dice: dict
    iou: dict
    hd95: dict
    nsd: dict

    def means(self):
        out = {}
        for name in ("dice", "iou", "hd95", "nsd"):
            vals = [v for v in getattr(self, name).values() if v is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def records(self):
        rows = [
            {"class": c, "dice": self.dice[c], "iou": self.iou[c], "hd95": self.hd95[c], "nsd": self.nsd[c]}
            for c in self.dice
        ]
        return rows + [{"class": "mean", **self.means()}]

    def to_json(self):
        return json.dumps(self.records(), indent=2) + "\n"

    def to_csv(self):
        lines = ["class,dice,iou,hd95,nsd"]
        for r in self.records():
            lines.append(",".join("" if r[k] is None else str(r[k]) for k in ("class", "dice", "iou", "hd95", "nsd")))
        return "\n".join(lines) + "\n"


def metric_report(pred_labels, truth_labels, classes, nsd_tolerance=defaults.NSD_TOLERANCE):
    """Per-class metrics for integer label maps; surface metrics are None where a mask is empty."""
    p, t = _check_pair(pred_labels, truth_labels)
    dice, iou, hd, nsd = {}, {}, {}, {}
    for c in classes:
        a, b = p == c, t == c
        dice[c], iou[c] = overlap_metrics(a, b)
        if a.any() and b.any():
            hd[c], nsd[c] = surface_metrics(a, b, nsd_tolerance)
        else:
            hd[c] = nsd[c] = None
    return MetricReport(dice, iou, hd, nsd)


# -- quality-efficiency polygon -------------------------------------------------------------------

HIGHER, LOWER = "higher", "lower"


@dataclass
class PolygonSpec:
    """Axes in drawing order as (name, "higher" | "lower"), and per-method values in that order."""

    axes: list
    values: dict

    def __post_init__(self):
        self.axes = [(str(n), str(d)) for n, d in self.axes]
        if len(self.axes) < 3:
            raise ValueError(f"a polygon needs at least 3 axes, got {len(self.axes)}")
        for name, d in self.axes:
            if d not in (HIGHER, LOWER):
                raise ValueError(f"axis {name!r}: direction must be 'higher' or 'lower', got {d!r}")
        if not self.values:
            raise ValueError("no methods given")
        for method, vals in self.values.items():
            if len(vals) != len(self.axes):
                raise ValueError(f"method {method!r} has {len(vals)} values for {len(self.axes)} axes")

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(a) for a in d["axes"]], {k: list(map(float, v)) for k, v in d["values"].items()})


@dataclass
class QEAResult:
    axes: list
    radii: dict
    areas: dict = field(default_factory=dict)

    def ranking(self):
        return sorted(self.areas, key=lambda m: -self.areas[m])

    def to_json(self):
        return json.dumps(
            {
                "axes": [name for name, _ in self.axes],
                "radii": {m: [float(r) for r in v] for m, v in self.radii.items()},
                "areas": self.areas,
                "ranking": self.ranking(),
            },
            indent=2,
        ) + "\n"


def polygon_area(radii):
    """Area of the closed polygon with radii ``r_i`` on K equally spaced axes."""
    r = np.asarray(radii, dtype=np.float64)
    k = len(r)
    return 0.5 * math.sin(2.0 * math.pi / k) * float(np.sum(r * np.roll(r, -1)))


def qea(spec):
    """Min-max normalise each axis across methods (best -> 1) and take polygon areas.

    The area depends on axis order, which is the order given in ``spec.axes``.
    """
    methods = list(spec.values)
    table = np.array([spec.values[m] for m in methods], dtype=np.float64)
    radii = np.empty_like(table)
    for j, (name, direction) in enumerate(spec.axes):
        col = table[:, j]
        lo, hi = col.min(), col.max()
        if not hi > lo:
            raise ValueError(f"axis {name!r} is degenerate: every method has value {lo}")
        radii[:, j] = (col - lo) / (hi - lo) if direction == HIGHER else (hi - col) / (hi - lo)
    res = QEAResult(spec.axes, {m: radii[i] for i, m in enumerate(methods)})
    res.areas = {m: polygon_area(radii[i]) for i, m in enumerate(methods)}
    return res


# -- Wilcoxon signed-rank + Holm ---------------------------------------------------------------------


@dataclass
class WilcoxonResult:
    n: int
    statistic: float
    p_value: float
    method: str

    @property
    def conclusive(self):
        return self.method != "inconclusive"


def midranks(values):
    """Ranks 1..n with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def exact_signed_rank_p(ranks, w_plus):
    """Two-sided p from the full 2^n sign-flip null distribution of W+."""
    # midranks are multiples of 1/2, so doubling makes every comparison exact
    dist = np.rint(2.0 * _kernels.signed_rank_sums(np.asarray(ranks, dtype=np.float64))).astype(np.int64)
    w2 = int(round(2.0 * w_plus))
    total = len(dist)
    lower = np.count_nonzero(dist <= w2) / total
    upper = np.count_nonzero(dist >= w2) / total
    return min(1.0, 2.0 * min(lower, upper))


def wilcoxon_signed_rank(x, y, exact_max_n=defaults.WILCOXON_EXACT_MAX_N, min_n=defaults.WILCOXON_MIN_N):
    """Paired two-sided test; zero differences are dropped before ranking."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n < min_n:
        return WilcoxonResult(n, float("nan"), float("nan"), "inconclusive")
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        return WilcoxonResult(n, w_plus, exact_signed_rank_p(ranks, w_plus), "exact")
    _, counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return WilcoxonResult(n, w_plus, min(1.0, math.erfc(abs(z) / math.sqrt(2.0))), "normal")


def holm_adjust(p_values):
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adj[i] = running
    return adj


@dataclass
class Comparison:
    name: str
    test: WilcoxonResult
    adjusted_p: float = float("nan")
    significant: bool = False


def wilcoxon_holm(pairs, alpha=defaults.SIGNIFICANCE):
    """Test each ``{name: (x, y)}`` comparison, then Holm-correct the conclusive ones."""
    results = [Comparison(name, wilcoxon_signed_rank(x, y)) for name, (x, y) in pairs.items()]
    family = [r for r in results if r.test.conclusive]
    if family:
        for r, a in zip(family, holm_adjust([r.test.p_value for r in family])):
            r.adjusted_p = float(a)
            r.significant = bool(a < alpha)
    return results


def significance_table(results):
    lines = ["comparison,n,statistic,p_value,method,adjusted_p,significant"]
    for r in results:
        lines.append(f"{r.name},{r.test.n},{r.test.statistic},{r.test.p_value},{r.test.method},{r.adjusted_p},{r.significant}")
    return "\n".join(lines) + "\n"
