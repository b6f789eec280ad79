"""Evaluation: Dice score, exact Hausdorff distance on boundary pixels,
per-node/per-level aggregation, confidence calibration, and the
pseudo-label quality sampling report.

Conventions: both-empty Dice = 1.0; both-empty HD = 0; exactly one empty
mask gives the sentinel HD = image diagonal. HD is reported in pixels; a
spacing factor converts to physical units when provided.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from scipy.stats import spearmanr

from .errors import EmptyPoolError, InsufficientSamplesError, ShapeMismatchError
from .hierarchy import ConceptHierarchy


def _as_bool(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def dice_score(pred, gt) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _as_bool(pred), _as_bool(gt)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"dice_score: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary_pixels(mask) -> np.ndarray:
    """Mask pixels with an 8-connected neighbor outside the mask (image
    border counts as outside). Returns a boolean array."""
    m = _as_bool(mask)
    if not m.any():
        return np.zeros_like(m)
    interior = ndimage.binary_erosion(m, structure=np.ones((3, 3)), border_value=0)
    return m & ~interior


def hausdorff_distance(pred, gt, spacing: float = 1.0) -> float:
    """Exact symmetric Hausdorff distance between boundary-pixel sets.

    Uses Euclidean distance transforms, so it matches the all-pairs
    definition exactly. ``spacing`` scales pixels to physical units.
    """
    a, b = _as_bool(pred), _as_bool(gt)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"hausdorff_distance: {a.shape} vs {b.shape}")
    a_empty, b_empty = not a.any(), not b.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return spacing * math.hypot(a.shape[0], a.shape[1])
    ba, bb = boundary_pixels(a), boundary_pixels(b)
    # EDT of the complement gives, at every pixel, the distance to the
    # nearest boundary pixel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~bb)
    dist_to_a = ndimage.distance_transform_edt(~ba)
    return spacing * float(max(dist_to_b[ba].max(), dist_to_a[bb].max()))


@dataclass
class EvalReport:
    """Per-node and per-level Dice/HD plus confidence calibration."""

    per_node_dice: dict[int, float]
    per_node_hd: dict[int, float]
    per_level_dice: dict[int, float]
    per_level_hd: dict[int, float]
    confidence_spearman: float
    num_samples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, json_path, csv_path=None, hierarchy: ConceptHierarchy | None = None):
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        if csv_path is not None and hierarchy is not None:
            write_report_csv(self, hierarchy, csv_path)


def node_column_labels(hierarchy: ConceptHierarchy) -> dict[int, str]:
    """P1..Pk for parents, C1..Cn for children, in slot order."""
    labels = {}
    for i, nid in enumerate(hierarchy.level_ids(0)):
        labels[nid] = f"P{i + 1}"
    for j, nid in enumerate(hierarchy.level_ids(1)):
        labels[nid] = f"C{j + 1}"
    return labels


def write_report_csv(report: EvalReport, hierarchy: ConceptHierarchy, path):
    labels = node_column_labels(hierarchy)
    ordered = hierarchy.level_ids(0) + hierarchy.level_ids(1)
    present = [nid for nid in ordered if nid in report.per_node_dice]
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric," + ",".join(labels[nid] for nid in present) + "\n")
        f.write("dice," + ",".join(f"{report.per_node_dice[nid]:.6f}" for nid in present) + "\n")
        f.write("hd," + ",".join(f"{report.per_node_hd[nid]:.6f}" for nid in present) + "\n")


def evaluate_masks(
    per_sample: list[dict],
    hierarchy: ConceptHierarchy,
) -> EvalReport:
    """Aggregate already-computed masks into an EvalReport.

    ``per_sample`` entries: {"pred": {node_id: bool mask}, "gt": {node_id:
    bool mask}, "conf": {node_id: float}}. A node enters its averages only
    on samples where its gt mask is nonempty; confidence pairs use every
    mask. Split out from the model-driven ``evaluate`` so reports can be
    recomputed from dumped masks.
    """
    if not per_sample:
        raise EmptyPoolError("no samples to evaluate")
    dice_acc: dict[int, list[float]] = {}
    hd_acc: dict[int, list[float]] = {}
    conf_pairs: list[tuple[float, float]] = []
    for entry in per_sample:
        for nid, gt in entry["gt"].items():
            pred = entry["pred"][nid]
            d = dice_score(pred, gt)
            if nid in entry.get("conf", {}):
                conf_pairs.append((entry["conf"][nid], d))
            if _as_bool(gt).any():
                dice_acc.setdefault(nid, []).append(d)
                hd_acc.setdefault(nid, []).append(hausdorff_distance(pred, gt))
    per_node_dice = {nid: float(np.mean(v)) for nid, v in dice_acc.items()}
    per_node_hd = {nid: float(np.mean(v)) for nid, v in hd_acc.items()}
    per_level_dice, per_level_hd = {}, {}
    for level in range(hierarchy.depth + 1):
        ids = [nid for nid in hierarchy.level_ids(level) if nid in per_node_dice]
        if ids:
            per_level_dice[level] = float(np.mean([per_node_dice[n] for n in ids]))
            per_level_hd[level] = float(np.mean([per_node_hd[n] for n in ids]))
    if (
        len(conf_pairs) >= 2
        and len({round(c, 12) for c, _ in conf_pairs}) > 1
        and len({round(d, 12) for _, d in conf_pairs}) > 1
    ):
        rho = spearmanr([c for c, _ in conf_pairs], [d for _, d in conf_pairs]).statistic
        rho = float(rho) if np.isfinite(rho) else 0.0
    else:
        rho = 0.0
    return EvalReport(
        per_node_dice=per_node_dice,
        per_node_hd=per_node_hd,
        per_level_dice=per_level_dice,
        per_level_hd=per_level_hd,
        confidence_spearman=rho,
        num_samples=len(per_sample),
    )


def evaluate(model, manifest, hierarchy: ConceptHierarchy, sample_ids=None) -> EvalReport:
    """Run the model over the manifest's test pool and report per-node and
    per-level Dice/HD plus Spearman(confidence, true Dice)."""
    import torch

    from .decoder import export_level_maps
    from .scenes import read_sample

    ids = list(manifest.test_ids if sample_ids is None else sample_ids)
    if not ids:
        raise EmptyPoolError("test pool is empty")
    parent_ids = hierarchy.level_ids(0)
    child_ids = hierarchy.level_ids(1)
    per_sample = []
    model.eval()
    with torch.no_grad():
        for sid in ids:
            sample = read_sample(manifest.root_path, sid)
            param = next(model.parameters())
            image = torch.as_tensor(sample.image, dtype=param.dtype, device=param.device)
            out = model(image)
            pred_maps = export_level_maps(out, hierarchy)
            entry = {"pred": {}, "gt": {}, "conf": {}}
            for level, node_ids, conf in (
                (0, parent_ids, out.parent_conf),
                (1, child_ids, out.child_conf),
            ):
                for slot, nid in enumerate(node_ids):
                    entry["pred"][nid] = pred_maps[level] == nid
                    entry["gt"][nid] = sample.level_maps[level] == nid
                    entry["conf"][nid] = float(conf[slot])
            per_sample.append(entry)
    return evaluate_masks(per_sample, hierarchy)


def sample_quality_report(
    pseudo_masks: list[dict],
    hierarchy: ConceptHierarchy,
    n_per_category: int = 3,
    seed: int = 0,
) -> dict:
    """Deterministic per-category quality audit of pseudo-labels.

    ``pseudo_masks`` entries: {"sample_id": str, "node_id": int, "pred":
    mask, "gt": mask}. Samples ``n_per_category`` instances per node id
    (only instances whose gt mask is nonempty qualify) and reports the
    per-category and overall mean Dice of pseudo vs ground truth.
    """
    by_node: dict[int, list[dict]] = {}
    for entry in pseudo_masks:
        if _as_bool(entry["gt"]).any():
            by_node.setdefault(entry["node_id"], []).append(entry)
    rng = np.random.default_rng(seed)
    per_category = {}
    for nid in sorted(by_node):
        pool = sorted(by_node[nid], key=lambda e: e["sample_id"])
        if len(pool) < n_per_category:
            raise InsufficientSamplesError(
                f"node {nid}: {len(pool)} instances < requested {n_per_category}"
            )
        picked = [pool[i] for i in sorted(rng.choice(len(pool), n_per_category, replace=False))]
        per_category[nid] = float(
            np.mean([dice_score(e["pred"], e["gt"]) for e in picked])
        )
    if not per_category:
        raise InsufficientSamplesError("no category has any ground-truth instances")
    return {
        "n_per_category": n_per_category,
        "per_category_dice": per_category,
        "overall_mean_dice": float(np.mean(list(per_category.values()))),
    }
