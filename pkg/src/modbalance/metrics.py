"""Segmentation metrics: Dice overlap and Hausdorff boundary distance.

Conventions for empty masks (recorded, since the usual formulas are
undefined there):
  - dice(empty, empty) = 1.0, dice(empty, nonempty) = 0.0
  - hausdorff(empty, empty) = 0.0; exactly one empty -> NaN ("undefined"),
    excluded from averages with a count note.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|) of two binary masks."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = int(pred.sum())
    g = int(target.sum())
    if p == 0 and g == 0:
        return 1.0
    inter = int(np.logical_and(pred, target).sum())
    return 2.0 * inter / (p + g)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of mask pixels with a 4-neighbor outside the mask.

    Pixels on the image border count as boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("expected a 2-D mask")
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def hausdorff_distance(pred: np.ndarray, target: np.ndarray, percentile: float = 100.0) -> float:
    """Undirected Hausdorff distance between mask boundaries, in pixels.

    Euclidean distances between boundary pixel centers; `percentile` < 100
    selects the robust variant (e.g. 95). Returns NaN when exactly one mask
    is empty, 0.0 when both are.
    """
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p_empty, g_empty = not pred.any(), not target.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return float("nan")
    pb = boundary_pixels(pred).astype(np.float64)
    gb = boundary_pixels(target).astype(np.float64)
    d = cdist(pb, gb)
    forward = d.min(axis=1)
    backward = d.min(axis=0)
    if percentile >= 100.0:
        return float(max(forward.max(), backward.max()))
    return float(max(np.percentile(forward, percentile), np.percentile(backward, percentile)))


@dataclass
class ClassMetrics:
    dice: float
    hausdorff: float  # NaN when undefined


def per_class_metrics(
    pred_labels: np.ndarray,
    target_labels: np.ndarray,
    n_classes: int,
    hd_percentile: float = 100.0,
) -> Dict[int, ClassMetrics]:
    """DSC/HD per foreground class (1..n_classes-1) of two label maps."""
    out = {}
    for c in range(1, n_classes):
        pred_c = pred_labels == c
        target_c = target_labels == c
        out[c] = ClassMetrics(
            dice=dice_score(pred_c, target_c),
            hausdorff=hausdorff_distance(pred_c, target_c, hd_percentile),
        )
    return out


@dataclass
class CombinationRow:
    """Aggregate metrics for one modality combination over a corpus."""

    combination: Tuple[int, ...]  # sorted indices of the modalities kept on
    n_samples: int
    dice_per_class: Dict[int, float]
    macro_dice: float
    hausdorff_per_class: Dict[int, float]  # mean over samples where defined
    macro_hausdorff: float  # NaN if undefined everywhere
    hausdorff_undefined: int  # (sample, class) pairs excluded as undefined

    def label(self) -> str:
        return "+".join(f"m{m}" for m in self.combination)


@dataclass
class MetricsReport:
    """Per-sample rows plus one aggregate row per modality combination."""

    n_modalities: int
    n_classes: int
    rows: List[CombinationRow] = field(default_factory=list)
    # (sample_id, combination) -> per-class metrics
    per_sample: Dict[Tuple[str, Tuple[int, ...]], Dict[int, ClassMetrics]] = field(default_factory=dict)

    def row_for(self, combination: Sequence[int]) -> CombinationRow:
        key = tuple(sorted(combination))
        for row in self.rows:
            if row.combination == key:
                return row
        raise KeyError(f"no aggregate row for combination {key}")


def aggregate_combination(
    combination: Sequence[int],
    sample_metrics: Sequence[Dict[int, ClassMetrics]],
    n_classes: int,
) -> CombinationRow:
    """Mean the per-sample class metrics into one combination row."""
    combo = tuple(sorted(combination))
    dice_per_class = {}
    hd_per_class = {}
    undefined = 0
    for c in range(1, n_classes):
        dices = [sm[c].dice for sm in sample_metrics]
        hds = [sm[c].hausdorff for sm in sample_metrics]
        defined = [h for h in hds if not np.isnan(h)]
        undefined += len(hds) - len(defined)
        dice_per_class[c] = float(np.mean(dices)) if dices else float("nan")
        hd_per_class[c] = float(np.mean(defined)) if defined else float("nan")
    macro_dice = float(np.mean(list(dice_per_class.values())))
    defined_hd = [v for v in hd_per_class.values() if not np.isnan(v)]
    macro_hd = float(np.mean(defined_hd)) if defined_hd else float("nan")
    return CombinationRow(
        combination=combo,
        n_samples=len(sample_metrics),
        dice_per_class=dice_per_class,
        macro_dice=macro_dice,
        hausdorff_per_class=hd_per_class,
        macro_hausdorff=macro_hd,
        hausdorff_undefined=undefined,
    )


def modality_combinations(n_modalities: int) -> List[Tuple[int, ...]]:
    """All 2^M - 1 nonempty modality subsets, singletons first, full set last."""
    combos = []
    for bits in range(1, 2**n_modalities):
        combos.append(tuple(m for m in range(n_modalities) if bits & (1 << m)))
    combos.sort(key=lambda c: (len(c), c))
    return combos


def write_report(report: MetricsReport, out_dir) -> Dict[str, str]:
    """Emit combinations.csv (aggregate rows) and per_sample.csv under out_dir."""
    import csv
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = list(range(1, report.n_classes))

    combo_path = out / "combinations.csv"
    with combo_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["combination", "n_samples"]
            + [f"dsc_c{c}" for c in classes]
            + ["dsc_macro"]
            + [f"hd_c{c}" for c in classes]
            + ["hd_macro", "hd_undefined"]
        )
        writer.writerow(header)
        for row in report.rows:
            writer.writerow(
                [row.label(), row.n_samples]
                + [f"{row.dice_per_class[c]:.6f}" for c in classes]
                + [f"{row.macro_dice:.6f}"]
                + [f"{row.hausdorff_per_class[c]:.6f}" for c in classes]
                + [f"{row.macro_hausdorff:.6f}", row.hausdorff_undefined]
            )

    sample_path = out / "per_sample.csv"
    with sample_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["sample_id", "combination"]
            + [f"dsc_c{c}" for c in classes]
            + [f"hd_c{c}" for c in classes]
        )
        writer.writerow(header)
        for (sid, combo), cm in sorted(report.per_sample.items()):
            label = "+".join(f"m{m}" for m in combo)
            writer.writerow(
                [sid, label]
                + [f"{cm[c].dice:.6f}" for c in classes]
                + [f"{cm[c].hausdorff:.6f}" for c in classes]
            )
    return {"combinations": str(combo_path), "per_sample": str(sample_path)}
