"""Training loop and the confidence-driven evolving-labeling flywheel.

One evolution round: generate pseudo-labels for the unlabeled cohort,
resolve within-level overlaps by per-pixel max confidence, keep the top
t% of records by mean confidence, move them into the labeled pool, and
retrain. Pools are conserved as a multiset across all rounds; samples the
generator labeled with ground truth are never overwritten.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_model
from .errors import DivergenceError, EmptyPoolError, PoolConsistencyError
from .hierarchy import ConceptHierarchy
from .losses import LossConfig, LossReport, total_loss
from .metrics import evaluate
from .scenes import (
    PROVENANCE_GT,
    DatasetManifest,
    Sample,
    content_hash,
    pseudo_provenance,
    read_sample,
    read_training_sample,
    write_pseudo_maps,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    decay_factor: float = 0.98  # applied per epoch: lr_e = lr0 * decay^e
    batch_size: int = 8
    epochs: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.decay_factor <= 1):
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass(frozen=True)
class EvolveConfig:
    iterations: int = 3
    select_ratio: float = 0.7  # top t% of records kept per round
    dedup_enabled: bool = False
    high_conf_threshold: float = 0.8  # reporting threshold, not a selection floor

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not (0 < self.select_ratio <= 1):
            raise ValueError(f"select_ratio must be in (0, 1], got {self.select_ratio}")


@dataclass
class PseudoLabelRecord:
    """Model-generated masks for one sample with per-mask confidences."""

    sample_id: str
    masks: dict[int, dict[int, np.ndarray]]  # level -> node id -> bool mask
    confidences: dict[int, dict[int, float]]  # level -> node id -> t
    iteration: int
    selected: bool = False

    def mean_confidence(self) -> float:
        """Ranking key: mean t over present (nonempty) masks; falls back to
        the mean over all masks when nothing survived the threshold."""
        present, everything = [], []
        for level, node_masks in self.masks.items():
            for nid, mask in node_masks.items():
                t = self.confidences[level][nid]
                everything.append(t)
                if mask.any():
                    present.append(t)
        pool = present if present else everything
        return float(np.mean(pool)) if pool else 0.0

    def to_level_maps(self, shape: tuple[int, int]) -> dict[int, np.ndarray]:
        """Packed uint16 label maps; call after resolve_overlaps."""
        maps = {}
        for level, node_masks in self.masks.items():
            level_map = np.zeros(shape, dtype=np.uint16)
            for nid in sorted(node_masks):
                level_map[node_masks[nid]] = nid
            maps[level] = level_map
        return maps


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.learning_rate * cfg.decay_factor**epoch


def _load_pool(manifest: DatasetManifest, ids) -> list[Sample]:
    return [read_training_sample(manifest, sid) for sid in sorted(ids)]


def fit(
    model,
    manifest: DatasetManifest,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    hierarchy: ConceptHierarchy | None = None,
    checkpoint_dir=None,
    log_path=None,
) -> list[dict]:
    """Adam over the shuffled labeled pool with per-epoch lr decay.

    Returns the training log (one row per optimizer step); optionally
    checkpoints each epoch and appends the log as CSV. Deterministic given
    the config seed in fixed-precision mode.
    """
    hierarchy = hierarchy if hierarchy is not None else model.hierarchy
    if not manifest.labeled_ids:
        raise EmptyPoolError("labeled pool is empty")
    samples = _load_pool(manifest, manifest.labeled_ids)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)
    param = next(model.parameters())
    images = {
        s.sample_id: torch.as_tensor(s.image, dtype=param.dtype, device=param.device)
        for s in samples
    }
    by_id = {s.sample_id: s for s in samples}
    log: list[dict] = []
    step = 0
    model.train()
    for epoch in range(train_cfg.epochs):
        lr = learning_rate_at(train_cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = [samples[i].sample_id for i in rng.permutation(len(samples))]
        for start in range(0, len(order), train_cfg.batch_size):
            batch_ids = order[start : start + train_cfg.batch_size]
            batch = torch.stack([images[sid] for sid in batch_ids])
            out = model(batch)
            losses, reports = [], []
            for i, sid in enumerate(batch_ids):
                item = type(out)(
                    parent_logits=out.parent_logits[i],
                    child_logits=out.child_logits[i],
                    parent_conf=out.parent_conf[i],
                    child_conf=out.child_conf[i],
                )
                loss_i, report_i = total_loss(item, by_id[sid], hierarchy, loss_cfg)
                losses.append(loss_i)
                reports.append(report_i)
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            mean = LossReport.combine(
                dice=float(np.mean([r.dice for r in reports])),
                bce=float(np.mean([r.bce for r in reports])),
                mse=float(np.mean([r.mse for r in reports])),
                hc=float(np.mean([r.hc for r in reports])),
                lambda1=loss_cfg.lambda1,
            )
            log.append({"epoch": epoch, "step": step, "lr": lr, "report": mean})
            step += 1
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(Path(checkpoint_dir) / f"epoch_{epoch:04d}.ckpt", model, hierarchy)
    if log_path is not None:
        write_training_csv(log, log_path)
    return log


def write_training_csv(log: list[dict], path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,epoch,lr,dice,bce,mse,hc,total\n")
        for row in log:
            r = row["report"]
            f.write(
                f"{row['step']},{row['epoch']},{row['lr']:.10g},"
                + ",".join(f"{v:.10g}" for v in r.as_row())
                + "\n"
            )


def generate_pseudo_labels(
    model,
    unlabeled_ids,
    manifest: DatasetManifest,
    hierarchy: ConceptHierarchy | None = None,
    iteration: int = 1,
    threshold: float = 0.5,
) -> list[PseudoLabelRecord]:
    """Decoder forward per sample; masks thresholded at 0.5 with per-mask
    confidences attached. Nothing is written to the pools here."""
    hierarchy = hierarchy if hierarchy is not None else model.hierarchy
    records = []
    param = next(model.parameters())
    model.eval()
    with torch.no_grad():
        for sid in sorted(unlabeled_ids):
            sample = read_sample(manifest.root_path, sid)
            image = torch.as_tensor(sample.image, dtype=param.dtype, device=param.device)
            out = model(image)
            masks: dict[int, dict[int, np.ndarray]] = {}
            confs: dict[int, dict[int, float]] = {}
            for level, logits, conf in (
                (0, out.parent_logits, out.parent_conf),
                (1, out.child_logits, out.child_conf),
            ):
                probs = torch.sigmoid(logits).cpu().numpy()
                ids = hierarchy.level_ids(level)
                masks[level] = {nid: probs[s] > threshold for s, nid in enumerate(ids)}
                confs[level] = {nid: float(conf[s]) for s, nid in enumerate(ids)}
            records.append(
                PseudoLabelRecord(sample_id=sid, masks=masks, confidences=confs, iteration=iteration)
            )
    return records


def resolve_overlaps(record: PseudoLabelRecord) -> PseudoLabelRecord:
    """Within-level exclusivity: a pixel claimed by several masks goes to
    the mask with the highest confidence (ties: lower node id)."""
    new_masks: dict[int, dict[int, np.ndarray]] = {}
    for level, node_masks in record.masks.items():
        # winner-takes-pixel in priority order: best (conf desc, id asc) first
        order = sorted(node_masks, key=lambda nid: (-record.confidences[level][nid], nid))
        claimed = None
        resolved = {}
        for nid in order:
            mask = node_masks[nid].astype(bool)
            if claimed is None:
                claimed = np.zeros_like(mask)
            keep = mask & ~claimed
            claimed |= keep
            resolved[nid] = keep
        new_masks[level] = {nid: resolved[nid] for nid in sorted(node_masks)}
    return replace(record, masks=new_masks)


def select_top_confidence(
    records: list[PseudoLabelRecord], ratio: float
) -> tuple[list[PseudoLabelRecord], list[PseudoLabelRecord]]:
    """Rank records by mean confidence (descending, ties by ascending
    sample id) and keep the top ceil(ratio * n). Pure: input order never
    changes the outcome."""
    if not (0 < ratio <= 1):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    ranked = sorted(records, key=lambda r: (-r.mean_confidence(), r.sample_id))
    cut = math.ceil(ratio * len(ranked))
    selected, rejected = ranked[:cut], ranked[cut:]
    for r in selected:
        r.selected = True
    for r in rejected:
        r.selected = False
    return selected, rejected


def integrate(
    manifest: DatasetManifest, selected: list[PseudoLabelRecord], save: bool = True
) -> DatasetManifest:
    """Move selected samples unlabeled -> labeled with pseudo provenance.

    Writes the resolved pseudo maps next to each sample (ground-truth
    files stay untouched), bumps the manifest version, and preserves prior
    manifests on disk.
    """
    unlabeled = set(manifest.unlabeled_ids)
    bad = [r.sample_id for r in selected if r.sample_id not in unlabeled]
    if bad:
        raise PoolConsistencyError(f"selected ids not in unlabeled pool: {bad}")
    before = sorted(manifest.all_ids())
    iteration = manifest.created_by_iteration + 1
    provenance = dict(manifest.provenance)
    for record in selected:
        sample = read_sample(manifest.root_path, record.sample_id)
        shape = sample.level_maps[0].shape
        write_pseudo_maps(
            manifest.root_path, record.sample_id, iteration, record.to_level_maps(shape)
        )
        provenance[record.sample_id] = pseudo_provenance(iteration)
    moved = {r.sample_id for r in selected}
    new_manifest = DatasetManifest(
        root_path=manifest.root_path,
        labeled_ids=sorted(set(manifest.labeled_ids) | moved),
        unlabeled_ids=sorted(unlabeled - moved),
        test_ids=list(manifest.test_ids),
        hierarchy_spec_path=manifest.hierarchy_spec_path,
        created_by_iteration=iteration,
        provenance=provenance,
    )
    if sorted(new_manifest.all_ids()) != before:
        raise PoolConsistencyError("pool multiset not conserved by integration")
    if save:
        new_manifest.save()
    return new_manifest


def _dedup(records: list[PseudoLabelRecord], manifest: DatasetManifest) -> list[PseudoLabelRecord]:
    """Drop records whose sample image duplicates an earlier one."""
    seen: set[str] = set()
    kept = []
    for record in sorted(records, key=lambda r: r.sample_id):
        digest = content_hash(read_sample(manifest.root_path, record.sample_id))
        if digest in seen:
            continue
        seen.add(digest)
        kept.append(record)
    return kept


def run_evolution(
    model,
    manifest: DatasetManifest,
    evolve_cfg: EvolveConfig = EvolveConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    hierarchy: ConceptHierarchy | None = None,
    out_dir=None,
) -> tuple[DatasetManifest, list[dict]]:
    """Iterate generate -> resolve -> select -> integrate -> fit.

    The high-confidence fraction is tracked over the full original
    unlabeled cohort (already-integrated samples are re-scored each round,
    their frozen masks untouched), mirroring how pseudo-label confidence
    evolution is reported. Returns the final manifest and per-iteration
    reports; the model is trained in place.
    """
    hierarchy = hierarchy if hierarchy is not None else model.hierarchy
    reports: list[dict] = []
    if evolve_cfg.iterations == 0:
        return manifest, reports
    cohort = sorted(manifest.unlabeled_ids + [
        sid for sid in manifest.labeled_ids
        if manifest.sample_provenance(sid) != PROVENANCE_GT
    ])
    baseline = evaluate(model, manifest, hierarchy)
    reports.append(_iteration_report(0, [], [], baseline, manifest, float("nan")))
    for k in range(1, evolve_cfg.iterations + 1):
        records = generate_pseudo_labels(model, cohort, manifest, hierarchy, iteration=k)
        records = [resolve_overlaps(r) for r in records]
        confs = [r.mean_confidence() for r in records]
        high_frac = (
            float(np.mean([c >= evolve_cfg.high_conf_threshold for c in confs]))
            if confs else 0.0
        )
        eligible = [r for r in records if r.sample_id in set(manifest.unlabeled_ids)]
        if evolve_cfg.dedup_enabled:
            eligible = _dedup(eligible, manifest)
        if eligible:
            selected, rejected = select_top_confidence(eligible, evolve_cfg.select_ratio)
        else:
            selected, rejected = [], []
        manifest = integrate(manifest, selected)
        fit(
            model, manifest,
            replace(train_cfg, seed=train_cfg.seed + k),
            loss_cfg, hierarchy,
        )
        heldout = evaluate(model, manifest, hierarchy)
        reports.append(_iteration_report(k, selected, rejected, heldout, manifest, high_frac))
    if out_dir is not None:
        write_iteration_reports(reports, out_dir)
    return manifest, reports


def _iteration_report(iteration, selected, rejected, heldout, manifest, high_frac) -> dict:
    mean = lambda rs: float(np.mean([r.mean_confidence() for r in rs])) if rs else float("nan")
    return {
        "iteration": iteration,
        "selected_count": len(selected),
        "rejected_count": len(rejected),
        "mean_conf_selected": mean(selected),
        "mean_conf_rejected": mean(rejected),
        "high_conf_fraction": high_frac,
        "heldout_parent_dice": heldout.per_level_dice.get(0, float("nan")),
        "heldout_child_dice": heldout.per_level_dice.get(1, float("nan")),
        "labeled_pool": len(manifest.labeled_ids),
        "unlabeled_pool": len(manifest.unlabeled_ids),
        "test_pool": len(manifest.test_ids),
    }


REPORT_FIELDS = [
    "iteration", "selected_count", "rejected_count", "mean_conf_selected",
    "mean_conf_rejected", "high_conf_fraction", "heldout_parent_dice",
    "heldout_child_dice", "labeled_pool", "unlabeled_pool", "test_pool",
]


def write_iteration_reports(reports: list[dict], out_dir):
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "evolution_report.json", "w", encoding="utf-8") as f:
        json.dump(reports, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "evolution_report.csv", "w", encoding="utf-8") as f:
        f.write(",".join(REPORT_FIELDS) + "\n")
        for row in reports:
            f.write(",".join(f"{row[k]:.10g}" if isinstance(row[k], float) else str(row[k])
                             for k in REPORT_FIELDS) + "\n")


def configure_determinism(threads: int | None = None):
    """Fixed-precision mode: single-writer determinism for torch on CPU.

    Thread count comes from HCEP_THREADS (default 1) unless given.
    """
    if threads is None:
        threads = int(os.environ.get("HCEP_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)
