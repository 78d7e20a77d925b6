"""
Statistics relating query-to-visual attention to grounding quality.

Works on :class:`EvalRecord` lists produced by :func:`collect`: per-layer
rank correlation between in-box attention and IoU, the equal-count
attention histogram, the box-ratio curve and accuracy.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..data.dataset import GroundingSample
from ..errors import DatasetError
from ..geometry import BoxSpec, box_ratio, iou, rasterize_mask
from ..losses.attbalance import spearman
from ..model.grounding_model import forward
from ..model.params import ModelParams
from ..numerics import no_grad

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 8
HISTOGRAM_LOW = 0.1
HISTOGRAM_HIGH = 0.9
CURVE_INTERVALS = 10
CURVE_MODES = ("width", "count")
# Float slack allowed on probability mass and IoU bounds.
_BOUND_SLACK = 1e-9


@dataclass
class EvalRecord:
    sample_id: str
    layers: List[int]
    in_mask_sums: List[float]
    iou: float
    box_ratio: float
    pred_box: Tuple[float, float, float, float]
    gt_box: Tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.layers) != len(self.in_mask_sums):
            raise ValueError(f"{self.sample_id}: {len(self.layers)} layers, {len(self.in_mask_sums)} sums")
        for s in self.in_mask_sums:
            if not -_BOUND_SLACK <= s <= 1.0 + _BOUND_SLACK:
                raise ValueError(f"{self.sample_id}: in-mask sum {s} outside [0, 1]")
        if not -_BOUND_SLACK <= self.iou <= 1.0 + _BOUND_SLACK:
            raise ValueError(f"{self.sample_id}: iou {self.iou} outside [0, 1]")
        if not 0.0 < self.box_ratio <= 1.0:
            raise ValueError(f"{self.sample_id}: box ratio {self.box_ratio} outside (0, 1]")

    def in_mask(self, layer: int) -> float:
        try:
            return self.in_mask_sums[self.layers.index(layer)]
        except ValueError:
            raise KeyError(f"layer {layer} not in record {self.sample_id}") from None

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "sample_id": self.sample_id,
            "iou": self.iou,
            "box_ratio": self.box_ratio,
        }
        for name, box in (("pred", self.pred_box), ("gt", self.gt_box)):
            for key, value in zip(("cx", "cy", "w", "h"), box):
                row[f"{name}_{key}"] = value
        for layer, s in zip(self.layers, self.in_mask_sums):
            row[f"in_mask_layer_{layer}"] = s
        return row


@dataclass
class HistogramBin:
    low: float
    high: float
    count: int
    mean_iou: float


@dataclass
class CurveInterval:
    low: Optional[float]
    high: Optional[float]
    count: int
    mean_attention: Optional[float]  # None for an empty interval


@dataclass
class AnalysisReport:
    n_samples: int
    layers: List[int]
    rho_profile: Dict[str, Optional[float]]
    mean_in_mask: Dict[str, float]
    accuracy_at_05: float
    mean_iou: float
    histogram_layer: int
    histogram: Optional[List[HistogramBin]] = None
    histogram_error: Optional[str] = None
    curve_mode: str = "width"
    box_ratio_curve: List[CurveInterval] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json_text(), encoding="utf-8")
        logger.info(f"Analysis report saved to {path}")
        return path


def collect(
    params: ModelParams, samples: Sequence[GroundingSample], capture_layers: Iterable[int]
) -> List[EvalRecord]:
    """One record per sample, in sample order, without recording gradients."""
    layers = sorted(set(capture_layers))
    records = []
    with no_grad():
        for sample in samples:
            pred, attn = forward(params, sample, layers)
            pred_box = BoxSpec.from_array(pred.data)
            mask = rasterize_mask(sample.box, sample.grid)
            sums = [min(max(s, 0.0), 1.0) for s in attn.in_mask_sums(mask)]
            records.append(
                EvalRecord(
                    sample_id=sample.sample_id,
                    layers=list(layers),
                    in_mask_sums=sums,
                    iou=iou(pred_box, sample.box),
                    box_ratio=box_ratio(sample.box),
                    pred_box=pred_box.as_tuple(),
                    gt_box=sample.box.as_tuple(),
                )
            )
    logger.debug(f"Collected {len(records)} evaluation records over layers {layers}")
    return records


def layer_rho_profile(records: Sequence[EvalRecord]) -> Dict[int, Optional[float]]:
    """Rank correlation between in-mask attention and IoU per layer.

    A layer whose correlation is undefined (constant values) maps to ``None``.
    """
    if len(records) < 2:
        raise DatasetError(f"rho profile needs at least 2 records, got {len(records)}")
    layers = records[0].layers
    ious = [r.iou for r in records]
    profile: Dict[int, Optional[float]] = {}
    for k, layer in enumerate(layers):
        rho = spearman([r.in_mask_sums[k] for r in records], ious)
        if rho is None:
            logger.warning(f"Rho undefined at layer {layer}: constant attention or IoU")
        profile[layer] = rho
    return profile


def attention_histogram(
    records: Sequence[EvalRecord],
    layer: int,
    n_bins: int = HISTOGRAM_BINS,
    low: float = HISTOGRAM_LOW,
    high: float = HISTOGRAM_HIGH,
) -> List[HistogramBin]:
    """Equal-count bins over in-mask attention, extremes omitted.

    Values below ``low`` or above ``high`` are dropped; leftover samples of an
    uneven split go to the lowest-value bins.
    """
    kept = sorted(
        ((r.in_mask(layer), r.iou) for r in records if low <= r.in_mask(layer) <= high),
        key=lambda pair: pair[0],
    )
    if len(kept) < n_bins:
        raise DatasetError(
            f"insufficient samples: {len(kept)} retained in [{low}, {high}], need {n_bins}"
        )
    values = np.array([v for v, _ in kept])
    ious = np.array([i for _, i in kept])
    base, extra = divmod(len(kept), n_bins)
    bins, start = [], 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        chunk = slice(start, start + size)
        bins.append(
            HistogramBin(
                low=float(values[chunk][0]),
                high=float(values[chunk][-1]),
                count=size,
                mean_iou=float(np.mean(ious[chunk])),
            )
        )
        start += size
    return bins


def _interval_index(ratios: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # Interval k holds edges[k] <= r < edges[k + 1]; the last one is closed.
    n = len(edges) - 1
    return np.clip(np.searchsorted(edges, ratios, side="right") - 1, 0, n - 1)


def box_ratio_curve(
    records: Sequence[EvalRecord],
    layer: int,
    mode: str = "width",
    n_intervals: int = CURVE_INTERVALS,
) -> List[CurveInterval]:
    """Mean in-mask attention per box-ratio interval.

    ``width`` splits ``[min, max]`` of the observed ratios into even-width
    intervals; ``count`` into intervals holding equal numbers of records.
    """
    if mode not in CURVE_MODES:
        raise ValueError(f"Unknown curve mode: {mode}. Must be one of: {list(CURVE_MODES)}")
    if not records:
        raise DatasetError("box-ratio curve needs at least one record")
    if len(records) < n_intervals:
        logger.warning(f"Only {len(records)} records for {n_intervals} box-ratio intervals")

    ratios = np.array([r.box_ratio for r in records])
    attention = np.array([r.in_mask(layer) for r in records])

    if mode == "width":
        edges = np.linspace(ratios.min(), ratios.max(), n_intervals + 1)
        index = _interval_index(ratios, edges)
        groups = [np.flatnonzero(index == k) for k in range(n_intervals)]
        bounds = [(float(edges[k]), float(edges[k + 1])) for k in range(n_intervals)]
    else:
        order = np.argsort(ratios, kind="stable")
        groups = list(np.array_split(order, n_intervals))
        bounds = [
            (float(ratios[g].min()), float(ratios[g].max())) if g.size else (None, None)
            for g in groups
        ]

    curve = []
    for (lo, hi), members in zip(bounds, groups):
        mean = float(np.mean(attention[members])) if members.size else None
        curve.append(CurveInterval(low=lo, high=hi, count=int(members.size), mean_attention=mean))
    return curve


def accuracy(records: Sequence[EvalRecord], threshold: float = 0.5) -> float:
    """Share of records whose IoU is strictly greater than ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if not records:
        raise DatasetError("accuracy of an empty record set")
    return sum(1 for r in records if r.iou > threshold) / len(records)


def attention_grids(
    params: ModelParams, sample: GroundingSample, layers: Iterable[int]
) -> Dict[str, Any]:
    """Captured maps reshaped to the visual grid, with the ground-truth mask."""
    with no_grad():
        pred, attn = forward(params, sample, layers)
    rows, cols = sample.grid
    mask = rasterize_mask(sample.box, sample.grid)
    return {
        "sample_id": sample.sample_id,
        "grid": [rows, cols],
        "gt_box": list(sample.box.as_tuple()),
        "pred_box": pred.data.tolist(),
        "mask": mask.cells.astype(int).tolist(),
        "maps": {
            str(layer): a.data.reshape(rows, cols).tolist()
            for layer, a in zip(attn.layers, attn.maps)
        },
    }


def build_report(
    records: Sequence[EvalRecord],
    histogram_layer: Optional[int] = None,
    curve_mode: str = "width",
    metadata: Optional[Dict[str, Any]] = None,
) -> AnalysisReport:
    """Run every reduction over ``records``.

    The histogram and curve use ``histogram_layer`` (default: the last
    captured layer). Too few retained samples for the histogram is recorded
    in the report rather than raised.
    """
    if not records:
        raise DatasetError("cannot build a report from zero records")
    layers = list(records[0].layers)
    if not layers:
        raise ValueError("records carry no captured layers")
    layer = layers[-1] if histogram_layer is None else histogram_layer

    histogram, histogram_error = None, None
    try:
        histogram = attention_histogram(records, layer)
    except DatasetError as e:
        histogram_error = str(e)
        logger.warning(f"Attention histogram skipped: {e}")

    profile = layer_rho_profile(records) if len(records) >= 2 else {l: None for l in layers}
    return AnalysisReport(
        n_samples=len(records),
        layers=layers,
        rho_profile={str(k): v for k, v in profile.items()},
        mean_in_mask={
            str(l): float(np.mean([r.in_mask(l) for r in records])) for l in layers
        },
        accuracy_at_05=accuracy(records, 0.5),
        mean_iou=float(np.mean([r.iou for r in records])),
        histogram_layer=layer,
        histogram=histogram,
        histogram_error=histogram_error,
        curve_mode=curve_mode,
        box_ratio_curve=box_ratio_curve(records, layer, mode=curve_mode),
        metadata=dict(metadata or {}),
    )


def export_csv(records: Sequence[EvalRecord], path: Union[str, Path]) -> Path:
    """One row per record for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.to_row() for r in records]
    fieldnames = list(rows[0].keys()) if rows else ["sample_id"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Exported {len(rows)} records to {path}")
    return path
