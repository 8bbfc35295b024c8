from .galleries_scoring import ScorePair
from .safeguards import require_same_shape, require_unit_interval
from .tools import atomic_write_text
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from scipy import ndimage
from typing import NamedTuple
import csv
import io
import numpy as np

IOU_THRESHOLD: float = 0.3
FPR_LIMIT: float = 0.3
METRIC_NAMES: tuple[str, ...] = ("i_auroc", "p_auroc", "aupro_paper", "aupro_standard")
MEAN_ROW = "mean"

# 8-connectivity.
CONNECTIVITY = np.ones((3, 3), dtype=int)


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for its input (e.g. a single label class)."""


def auroc(
    scores: Sequence[float] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    metric: str = "AUROC",
) -> float:
    """
    Area under the ROC curve by threshold sweep and trapezoidal integration.

    Thresholds are the distinct scores; a sample is predicted positive when its
    score is >= the threshold. Tied scores move together, so the result equals
    the Mann-Whitney statistic with ties counted 1/2.

    Args:
        scores: Real scores.
        labels: Binary labels, 1 for anomalous.
        metric (str, optional): Name used in error messages.

    Returns:
        float: The area in [0, 1].

    Raises:
        ValueError: If the lengths differ.
        UndefinedMetricError: If only one label class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{metric}: {scores.size} scores but {labels.size} labels")
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError(f"{metric} is undefined: labels hold a single class")

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(sorted_scores)), labels.size - 1]
    tps = np.cumsum(sorted_labels)[last_of_run]
    fps = last_of_run + 1 - tps
    tpr = np.r_[0, tps] / positives
    fpr = np.r_[0, fps] / negatives
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def _stack(
    maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(maps) != len(gt_masks):
        raise ValueError(f"Got {len(maps)} maps for {len(gt_masks)} masks")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    gt_masks = [np.asarray(g).astype(bool) for g in gt_masks]
    for m, g in zip(maps, gt_masks):
        require_same_shape([m.shape, g.shape], ["map", "gt_mask"])
    return maps, gt_masks


def p_auroc(maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """
    Pixel-level AUROC over every pixel of every map.

    Raises:
        UndefinedMetricError: If there is no defect pixel or no normal pixel.
    """
    maps, gt_masks = _stack(maps, gt_masks)
    if not maps:
        raise UndefinedMetricError("P-AUROC is undefined: no maps")
    return auroc(
        np.concatenate([m.ravel() for m in maps]),
        np.concatenate([g.ravel() for g in gt_masks]),
        metric="P-AUROC",
    )


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """
    8-connected regions of a binary mask, ordered by their first pixel in raster order.

    Returns:
        list[np.ndarray]: One boolean mask per region.
    """
    labelled, count = ndimage.label(np.asarray(mask).astype(bool), structure=CONNECTIVITY)
    return [labelled == k for k in range(1, count + 1)]


def _count_at_least(sorted_values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return sorted_values.size - np.searchsorted(sorted_values, thresholds, side="left")


class _Region(NamedTuple):
    image: int
    scores: np.ndarray  # sorted ascending


def _regions(maps: list[np.ndarray], gt_masks: list[np.ndarray]) -> list[_Region]:
    regions = []
    for i, (m, g) in enumerate(zip(maps, gt_masks)):
        for region in connected_components(g):
            regions.append(_Region(i, np.sort(m[region])))
    return regions


def aupro_paper(
    maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], tau: float = IOU_THRESHOLD
) -> float:
    """
    Per-region IoU overlap, thresholded at tau, integrated over the threshold axis [0, 1].

    For a threshold f, the prediction of region R_k is P_k(f) = 1[map >= f] on the
    region's image with the image's other ground-truth regions removed;
    PRO(f) is the fraction of regions with IoU(R_k, P_k(f)) >= tau. PRO is a
    step function of f, constant on (s_{j-1}, s_j] between consecutive distinct
    scores, so the integral is the exact sum (s_j - s_{j-1}) * PRO(s_j) with s_0 = 0.

    Args:
        maps: Score maps with values in [0, 1].
        gt_masks: Binary ground-truth masks.
        tau (float, optional): IoU threshold.

    Returns:
        float: The area in [0, 1].

    Raises:
        UndefinedMetricError: If there is no ground-truth region.
        ValueError: If a map leaves [0, 1] or shapes differ.
    """
    maps, gt_masks = _stack(maps, gt_masks)
    for m in maps:
        require_unit_interval(m, "score map")
    regions = _regions(maps, gt_masks)
    if not regions:
        raise UndefinedMetricError("AUPRO (IoU) is undefined: no ground-truth regions")

    thresholds = np.unique(np.concatenate([m.ravel() for m in maps]))
    background = [np.sort(m[~g]) for m, g in zip(maps, gt_masks)]
    hits = np.zeros(thresholds.size)
    for region in regions:
        inside = _count_at_least(region.scores, thresholds)
        predicted = _count_at_least(background[region.image], thresholds) + inside
        union = region.scores.size + predicted - inside
        hits += inside / union >= tau
    pro = hits / len(regions)
    widths = np.diff(np.r_[0.0, thresholds])
    return float(np.sum(widths * pro))


def aupro_standard(
    maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], fpr_limit: float = FPR_LIMIT
) -> float:
    """
    Mean per-region recall as a function of the global false positive rate,
    integrated over [0, fpr_limit] and normalised by fpr_limit.

    The curve is the step function taking, at each FPR x, the per-region
    overlap of the lowest threshold whose FPR does not exceed x.

    Raises:
        UndefinedMetricError: If there is no ground-truth region or no normal pixel.
    """
    maps, gt_masks = _stack(maps, gt_masks)
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    regions = _regions(maps, gt_masks)
    if not regions:
        raise UndefinedMetricError("AUPRO (FPR) is undefined: no ground-truth regions")
    normal = np.sort(np.concatenate([m[~g] for m, g in zip(maps, gt_masks)]))
    if normal.size == 0:
        raise UndefinedMetricError("AUPRO (FPR) is undefined: no normal pixels")

    thresholds = np.unique(np.concatenate([m.ravel() for m in maps]))[::-1]
    fpr = _count_at_least(normal, thresholds) / normal.size
    pro = np.mean(
        [_count_at_least(r.scores, thresholds) / r.scores.size for r in regions], axis=0
    )
    fpr = np.r_[0.0, fpr]
    pro = np.maximum.accumulate(np.r_[0.0, pro])
    edges = np.minimum(np.r_[fpr, np.inf], fpr_limit)
    return float(np.sum(pro * np.diff(edges)) / fpr_limit)


@dataclass(frozen=True)
class MetricsReport:
    class_name: str
    i_auroc: float
    p_auroc: float
    aupro_paper: float
    aupro_standard: float
    n_images: int
    n_regions: int

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


class EvalTarget(NamedTuple):
    id: str
    class_name: str
    label: int
    gt_mask: np.ndarray


def evaluate_class(
    class_name: str, scores: Sequence[ScorePair], targets: Sequence[EvalTarget]
) -> MetricsReport:
    """
    Metrics of one class.

    Raises:
        UndefinedMetricError: Naming the metric and class when it is undefined.
    """
    maps = [s.s_px for s in scores]
    masks = [t.gt_mask for t in targets]
    try:
        i_value = auroc([s.s_im for s in scores], [t.label for t in targets], "I-AUROC")
        p_value = p_auroc(maps, masks)
        paper = aupro_paper(maps, masks)
        standard = aupro_standard(maps, masks)
    except UndefinedMetricError as e:
        raise UndefinedMetricError(f"class '{class_name}': {e}") from e
    n_regions = sum(len(connected_components(m)) for m in masks)
    return MetricsReport(class_name, i_value, p_value, paper, standard, len(targets), n_regions)


def evaluate_run(
    scores: Mapping[str, ScorePair], targets: Sequence[EvalTarget]
) -> list[MetricsReport]:
    """
    Per-class reports, in sorted class order, followed by the mean row.

    Args:
        scores (Mapping[str, ScorePair]): Score pairs by sample id.
        targets (Sequence[EvalTarget]): Every test sample's label and mask.

    Returns:
        list[MetricsReport]: Class rows then a "mean" row (arithmetic mean of the
        class metrics, summed counts).

    Raises:
        ValueError: If a test sample has no score.
        UndefinedMetricError: If a metric is undefined for a class.
    """
    missing = [t.id for t in targets if t.id not in scores]
    if missing:
        raise ValueError(f"Missing scores for test samples: {', '.join(missing[:5])}")
    by_class: dict[str, list[EvalTarget]] = defaultdict(list)
    for target in targets:
        by_class[target.class_name].append(target)
    rows = [
        evaluate_class(name, [scores[t.id] for t in group], group)
        for name, group in sorted(by_class.items())
    ]
    if not rows:
        raise ValueError("No test samples to evaluate")
    mean = MetricsReport(
        MEAN_ROW,
        *(float(np.mean([getattr(r, name) for r in rows])) for name in METRIC_NAMES),
        n_images=sum(r.n_images for r in rows),
        n_regions=sum(r.n_regions for r in rows),
    )
    return rows + [mean]


@dataclass(frozen=True)
class ResultRow:
    """One CSV row: a class (or the mean) of one grid cell."""

    class_name: str
    missing_type: str
    eta: float
    ablation: str
    i_auroc: float
    p_auroc: float
    aupro_paper: float
    aupro_standard: float

    @classmethod
    def from_report(
        cls, report: MetricsReport, missing_type: str, eta: float, ablation: str
    ) -> "ResultRow":
        return cls(report.class_name, missing_type, eta, ablation, *report.metrics().values())


CSV_COLUMNS = ("class",) + tuple(f.name for f in fields(ResultRow))[1:]


def report_csv(rows: Sequence[ResultRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        values = asdict(row)
        writer.writerow(
            [values["class_name"], row.missing_type, f"{row.eta:g}", row.ablation]
            + [f"{values[name]:.6f}" for name in METRIC_NAMES]
        )
    return buffer.getvalue()


def write_report_csv(path: str | Path, rows: Sequence[ResultRow]) -> None:
    atomic_write_text(path, report_csv(rows))


def read_report_csv(path: str | Path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            ResultRow(
                item["class"],
                item["missing_type"],
                float(item["eta"]),
                item["ablation"],
                *(float(item[name]) for name in METRIC_NAMES),
            )
            for item in csv.DictReader(f)
        ]


@dataclass(frozen=True)
class SampleScore:
    """Image score of one test sample with its ground truth and availability."""

    id: str
    class_name: str
    label: int
    defect_type: str
    m_rgb: int
    m_3d: int
    s_im: float


SCORE_COLUMNS = ("id", "class", "label", "defect_type", "m_rgb", "m_3d", "s_im")


def scores_csv(rows: Sequence[SampleScore]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for row in rows:
        writer.writerow(
            [row.id, row.class_name, row.label, row.defect_type, row.m_rgb, row.m_3d]
            + [f"{row.s_im:.8f}"]
        )
    return buffer.getvalue()


def write_scores_csv(path: str | Path, rows: Sequence[SampleScore]) -> None:
    atomic_write_text(path, scores_csv(rows))


def read_scores_csv(path: str | Path) -> list[SampleScore]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            SampleScore(
                item["id"],
                item["class"],
                int(item["label"]),
                item["defect_type"],
                int(item["m_rgb"]),
                int(item["m_3d"]),
                float(item["s_im"]),
            )
            for item in csv.DictReader(f)
        ]


def defect_type_auroc(rows: Sequence[SampleScore], defect_type: str) -> float:
    """
    I-AUROC of the normals against one defect type, averaged over classes.

    Classes without normals or without that defect type are left out.

    Raises:
        UndefinedMetricError: If no class holds both.
    """
    by_class: dict[str, list[SampleScore]] = defaultdict(list)
    for row in rows:
        if row.label == 0 or row.defect_type == defect_type:
            by_class[row.class_name].append(row)
    values = [
        auroc([r.s_im for r in group], [r.label for r in group], "I-AUROC")
        for _, group in sorted(by_class.items())
        if 0 < sum(r.label for r in group) < len(group)
    ]
    if not values:
        raise UndefinedMetricError(f"I-AUROC: no class has normals and '{defect_type}' defects")
    return float(np.mean(values))


@dataclass(frozen=True)
class AblationDelta:
    missing_type: str
    eta: float
    metric: str
    delta_scl: float
    delta_full: float


def ablation_deltas(rows: Sequence[ResultRow]) -> list[AblationDelta]:
    """
    Increments over the no-CPL/no-SCL baseline on the mean rows.

    delta_scl = (no-scl) - (no-cpl-scl) is the effect of untrained prompts, which
    are dropped, so it reads 0 for the presets; delta_full = (full) - (no-cpl-scl)
    is the effect of prompts trained contrastively. Cells lacking
    one of the three ablations are skipped. Repeated cells (seeds) are averaged.
    """
    table: dict[tuple[str, float, str], list[ResultRow]] = defaultdict(list)
    for row in rows:
        if row.class_name == MEAN_ROW:
            table[(row.missing_type, row.eta, row.ablation)].append(row)

    def value(key: tuple[str, float, str], metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in table[key]]))

    deltas = []
    for missing_type, eta in sorted({(k[0], k[1]) for k in table}):
        keys = {a: (missing_type, eta, a) for a in ("full", "no-scl", "no-cpl-scl")}
        if any(k not in table for k in keys.values()):
            continue
        for metric in METRIC_NAMES:
            base = value(keys["no-cpl-scl"], metric)
            deltas.append(
                AblationDelta(
                    missing_type,
                    eta,
                    metric,
                    value(keys["no-scl"], metric) - base,
                    value(keys["full"], metric) - base,
                )
            )
    return deltas


def rate_trend(
    rows: Sequence[ResultRow], metric: str = "i_auroc", ablation: str = "full"
) -> dict[str, list[tuple[float, float]]]:
    """
    Mean-row metric per missing type as (eta, value) pairs in ascending eta,
    averaging repeated cells.
    """
    if metric not in METRIC_NAMES:
        raise ValueError(f"Unknown metric {metric!r}")
    grouped: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row.class_name == MEAN_ROW and row.ablation == ablation:
            grouped[row.missing_type][row.eta].append(getattr(row, metric))
    return {
        missing_type: [(eta, float(np.mean(v))) for eta, v in sorted(per_eta.items())]
        for missing_type, per_eta in sorted(grouped.items())
    }
