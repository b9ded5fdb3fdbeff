"""Any-overlap matching of detections to ground truth and PR sweeps."""

from dataclasses import dataclass, field

import numpy as np

from .postprocess import PIXEL, BBox, detect

DEFAULT_THETAS = tuple(np.round(np.arange(1, 100) / 100.0, 2))


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    # verdicts[i] is the index of the ground-truth box detection i matched, or None.
    verdicts: list = field(default_factory=list)


@dataclass(frozen=True)
class PRPoint:
    theta: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def _box(d):
    return d.bbox if hasattr(d, "bbox") else d


def intersection_area(a, b):
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    return w * h if w > 0 and h > 0 else 0


def match(detections, gts):
    """Greedy one-to-one matching on intersection area.

    A pair is eligible when the boxes share at least one pixel.  Pairs are
    taken in descending intersection area (ties: detection order, then
    ground-truth order); each box is used at most once.
    """
    boxes = [_box(d) for d in detections]
    gts = [_box(g) for g in gts]
    for b in boxes + gts:
        if b.frame != PIXEL:
            raise ValueError("match: boxes must be in the input-pixel frame")
    pairs = []
    for i, d in enumerate(boxes):
        for j, g in enumerate(gts):
            a = intersection_area(d, g)
            if a > 0:
                pairs.append((-a, i, j))
    pairs.sort()
    verdicts = [None] * len(boxes)
    used = set()
    for _, i, j in pairs:
        if verdicts[i] is None and j not in used:
            verdicts[i] = j
            used.add(j)
    tp = len(used)
    return MatchResult(tp=tp, fp=len(boxes) - tp, fn=len(gts) - tp, verdicts=verdicts)


def precision_recall(m):
    """``(precision, recall)``; an empty denominator counts as 1.0."""
    precision = m.tp / (m.tp + m.fp) if m.tp + m.fp else 1.0
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else 1.0
    return precision, recall


def aggregate(results):
    """Micro-average a sequence of per-image MatchResults into one."""
    results = list(results)
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    return MatchResult(tp, fp, fn, [])


def pr_curve(saliency_maps, gts, thetas=DEFAULT_THETAS, output_stride=8, min_area=1):
    """Sweep ``thetas`` over precomputed saliency maps.

    ``saliency_maps`` and ``gts`` are parallel per-image sequences; counts
    are pooled over the whole set for each threshold.
    """
    thetas = [float(t) for t in thetas]
    if any(b < a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("thetas must be sorted ascending")
    if len(saliency_maps) != len(gts):
        raise ValueError("one ground-truth list per saliency map is required")
    points = []
    for theta in thetas:
        total = aggregate(
            match(detect(s, theta, output_stride, min_area), g) for s, g in zip(saliency_maps, gts)
        )
        p, r = precision_recall(total)
        points.append(PRPoint(theta, p, r, total.tp, total.fp, total.fn))
    return points


def count_fasteners(detections):
    return len(detections)


def best_point(points, key="f1"):
    """PR point with the highest F1 (ties: lower theta)."""
    def f1(pt):
        s = pt.precision + pt.recall
        return 2 * pt.precision * pt.recall / s if s else 0.0
    return max(points, key=lambda pt: (f1(pt), -pt.theta))


def pr_to_csv(points):
    lines = ["theta,tp,fp,fn,precision,recall"]
    for p in points:
        lines.append(f"{p.theta:.4f},{p.tp},{p.fp},{p.fn},{p.precision:.6f},{p.recall:.6f}")
    return "\n".join(lines) + "\n"


def plot_pr(curves, path):
    """Write an SVG of one or more ``{label: [PRPoint, ...]}`` curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, pts in curves.items():
        ax.plot([p.recall for p in pts], [p.precision for p in pts], marker=".", label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
