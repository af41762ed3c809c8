"""Evaluation metrics, aggregation and analysis reports.

Set metrics (Jaccard, F1) are computed per record at a probability threshold;
ranking quality is average precision over the per-medication probabilities.
Center heterogeneity is summarized with pairwise Jensen-Shannon divergence of
prescription distributions (base-2 logs, so values lie in [0, 1]).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MultiCenterDataset, prescription_distribution


def jaccard(true_set, predicted_set) -> float:
    """|intersection| / |union|; two empty sets agree perfectly (1.0)."""
    t, p = set(true_set), set(predicted_set)
    if not t and not p:
        return 1.0
    return len(t & p) / len(t | p)


def f1(true_set, predicted_set) -> float:
    """Harmonic mean of set precision and recall; both empty -> 1.0."""
    t, p = set(true_set), set(predicted_set)
    if not t and not p:
        return 1.0
    hits = len(t & p)
    if hits == 0:
        return 0.0
    precision = hits / len(p)
    recall = hits / len(t)
    return 2.0 * precision * recall / (precision + recall)


def average_precision(labels, probabilities) -> float:
    """Area under the precision-recall steps of the ranked label list.

    Items are ranked by descending probability with ties broken by index,
    so the result is deterministic. Requires at least one positive label.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probabilities, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError("labels and probabilities must be matching 1-D vectors")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.lexsort((np.arange(y.size), -p))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


def precision_recall_product_sum(labels, probabilities) -> float:
    """Sum of precision*recall over every prediction rank cutoff.

    A non-standard ranking score kept for comparison; average_precision is
    the canonical ranking metric in this package.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probabilities, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("needs at least one positive label")
    order = np.lexsort((np.arange(y.size), -p))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx]:
            hits += 1
        total += (hits / rank) * (hits / n_pos)
    return total


def jsd(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs, bounded in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a: np.ndarray, b: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def jsd_matrix(dataset: MultiCenterDataset) -> np.ndarray:
    """Symmetric pairwise prescription-distribution JSD, zero diagonal."""
    centers = dataset.centers
    dists = [prescription_distribution(dataset, c) for c in centers]
    n = len(centers)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = jsd(dists[i], dists[j])
    return out


@dataclass
class GroupThresholds:
    """Record-count boundaries for small / medium / large center groups."""

    small_max: int = 1000
    medium_max: int = 2000

    def validate(self) -> None:
        if not (0 < self.small_max < self.medium_max):
            raise ValueError("need 0 < small_max < medium_max")

    def group_of(self, record_count: int) -> str:
        if record_count <= self.small_max:
            return "small"
        if record_count <= self.medium_max:
            return "medium"
        return "large"


GROUP_NAMES = ("small", "medium", "large")
METRIC_NAMES = ("prauc", "jaccard", "f1")


@dataclass
class EvalResult:
    """Per-record metric triples rolled up per center, per group and overall."""

    per_record: list[dict] = field(default_factory=list)
    per_center: dict[str, dict[str, float]] = field(default_factory=dict)
    per_group: dict[str, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)
    skipped_prauc: int = 0

    @staticmethod
    def from_records(rows: list[dict], center_sizes: dict[str, int],
                     groups: GroupThresholds, skipped_prauc: int = 0) -> "EvalResult":
        result = EvalResult(per_record=rows, skipped_prauc=skipped_prauc)
        by_center: dict[str, list[dict]] = {}
        for row in rows:
            by_center.setdefault(row["center"], []).append(row)
        for center in sorted(by_center):
            result.per_center[center] = {
                m: float(np.mean([r[m] for r in by_center[center] if r[m] is not None]))
                for m in METRIC_NAMES
            }
        for group in GROUP_NAMES:
            members = [c for c in result.per_center
                       if groups.group_of(center_sizes[c]) == group]
            if members:
                result.per_group[group] = {
                    m: float(np.mean([result.per_center[c][m] for c in members]))
                    for m in METRIC_NAMES
                }
        result.overall = {
            m: float(np.mean([r[m] for r in rows if r[m] is not None]))
            for m in METRIC_NAMES
        }
        return result


def threshold_set(probabilities: np.ndarray, threshold: float) -> set[int]:
    return {int(i) for i in np.nonzero(probabilities > threshold)[0]}


def score_record(true_meds, probabilities: np.ndarray, threshold: float) -> dict:
    """Jaccard/F1 of the thresholded set plus ranking AP for one record."""
    predicted = threshold_set(probabilities, threshold)
    true_set = set(true_meds)
    labels = np.zeros(probabilities.size)
    labels[list(true_set)] = 1.0
    return {
        "jaccard": jaccard(true_set, predicted),
        "f1": f1(true_set, predicted),
        "prauc": average_precision(labels, probabilities) if true_set else None,
    }


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_overall_csv(path, results: dict[str, EvalResult]) -> None:
    rows = [[model, _fmt(res.overall.get("prauc")), _fmt(res.overall.get("jaccard")),
             _fmt(res.overall.get("f1"))]
            for model, res in sorted(results.items())]
    write_csv(path, ["model", "prauc", "jaccard", "f1"], rows)


def write_group_csv(path, results: dict[str, EvalResult],
                    baseline: str | None = None) -> None:
    """Per-group metric table with a Jaccard improvement ratio vs a baseline."""
    rows = []
    for model, res in sorted(results.items()):
        for group in GROUP_NAMES:
            if group not in res.per_group:
                continue
            vals = res.per_group[group]
            improvement = None
            if baseline and baseline in results and model != baseline:
                base = results[baseline].per_group.get(group)
                if base and base["jaccard"] > 0:
                    improvement = (vals["jaccard"] - base["jaccard"]) / base["jaccard"]
            rows.append([model, group, _fmt(vals["prauc"]), _fmt(vals["jaccard"]),
                         _fmt(vals["f1"]), _fmt(improvement)])
    write_csv(path, ["model", "group", "prauc", "jaccard", "f1",
                     "improvement-vs-baseline"], rows)


def write_jsd_csv(path, matrix: np.ndarray, centers) -> None:
    rows = [[centers[i]] + [f"{matrix[i, j]:.8f}" for j in range(len(centers))]
            for i in range(len(centers))]
    write_csv(path, ["center"] + list(centers), rows)


def write_summary_csv(path, summary_rows: list[dict]) -> None:
    header = ["center", "records", "mean_diagnoses", "mean_procedures",
              "mean_medications"]
    rows = [[row["center"], row["records"], _fmt(row["mean_diagnoses"]),
             _fmt(row["mean_procedures"]), _fmt(row["mean_medications"])]
            for row in summary_rows]
    write_csv(path, header, rows)


def write_heatmap_ppm(path, matrix: np.ndarray, cell_px: int = 32,
                      vmax: float = 1.0) -> None:
    """Render a matrix as a binary PPM image, cell_px pixels per cell.

    Dependency-free and byte-deterministic; intensity maps [0, vmax] onto a
    blue-to-red ramp.
    """
    m = np.asarray(matrix, dtype=np.float64)
    h, w = m.shape
    scaled = np.clip(m / vmax if vmax > 0 else m, 0.0, 1.0)
    img = np.zeros((h * cell_px, w * cell_px, 3), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            v = scaled[i, j]
            color = (int(255 * v), int(64 * (1 - abs(2 * v - 1))), int(255 * (1 - v)))
            img[i * cell_px:(i + 1) * cell_px, j * cell_px:(j + 1) * cell_px] = color
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w * cell_px} {h * cell_px}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_histogram_ppm(path, values, cell_px: int = 8, height_px: int = 120) -> None:
    """Render per-center counts as a simple bar chart in PPM format."""
    vals = np.asarray(list(values), dtype=np.float64)
    vmax = vals.max() if vals.size and vals.max() > 0 else 1.0
    width = max(int(vals.size) * cell_px, 1)
    img = np.full((height_px, width, 3), 255, dtype=np.uint8)
    for i, v in enumerate(vals):
        bar = int(round((v / vmax) * (height_px - 1)))
        img[height_px - bar:, i * cell_px:(i + 1) * cell_px] = (70, 90, 180)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height_px}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def report(results: dict[str, EvalResult], matrix: np.ndarray | None,
           summary_rows: list[dict] | None, out_dir, centers=None,
           baseline: str | None = None, images: bool = False) -> None:
    """Emit the evaluation/analysis CSV files (and optional images)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if results:
        write_overall_csv(out / "overall.csv", results)
        write_group_csv(out / "groups.csv", results, baseline=baseline)
    if matrix is not None and centers is not None:
        write_jsd_csv(out / "jsd.csv", matrix, centers)
        if images:
            write_heatmap_ppm(out / "jsd_heatmap.ppm", matrix)
    if summary_rows is not None:
        write_summary_csv(out / "center_summary.csv", summary_rows)
        if images:
            write_histogram_ppm(out / "record_counts.ppm",
                                [row["records"] for row in summary_rows])
