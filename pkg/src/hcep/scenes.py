"""Procedural scene generation and the on-disk dataset format.

Scenes stand in for surgical footage: each sample is a square RGB image
with one integer label map per hierarchy level (pixel value = node id,
0 = background). Parent regions are unions of their child regions by
construction, so cross-level consistency holds exactly. Generation is a
pure function of (config, sample seed).

Dataset layout::

    <root>/<id>/image.png          16-bit 3-channel PNG
    <root>/<id>/level_<l>.png      16-bit grayscale PNG, pixel = node id
    <root>/<id>/meta.json          labeled flag, provenance, checksums
    <root>/manifest.json           current pool split (plus manifest_v<k>.json history)
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .errors import ConfigError, CorruptSampleError, FractionError, IoError
from .hierarchy import ConceptHierarchy

PROVENANCE_GT = "synthetic_gt"


def pseudo_provenance(iteration: int) -> str:
    return f"pseudo_iter_{iteration}"


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for procedural scene generation."""

    image_size: int = 64
    parent_count_range: tuple[int, int] = (2, 3)
    children_per_parent_range: tuple[int, int] = (1, 3)
    texture_noise_sigma: float = 0.03
    # when set, each sample draws its own noise sigma uniformly from this
    # range; spreads scene difficulty so mask quality varies across samples
    texture_noise_range: Optional[tuple[float, float]] = None
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        for name in ("parent_count_range", "children_per_parent_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} is empty: [{lo}, {hi}]")
        if self.texture_noise_sigma < 0:
            raise ConfigError("texture_noise_sigma must be >= 0")
        if self.texture_noise_range is not None:
            lo, hi = self.texture_noise_range
            if lo < 0 or lo > hi:
                raise ConfigError(f"texture_noise_range is empty: [{lo}, {hi}]")


@dataclass
class Sample:
    """One scene: image in [0,1], one label map per level, pool metadata."""

    sample_id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    level_maps: dict[int, np.ndarray]  # level -> H x W uint16 node ids
    labeled: bool
    provenance: str = PROVENANCE_GT


def derive_sample_seed(master_seed: int, index: int) -> int:
    """Splittable per-sample seed: splitmix64 of (master ^ index-mix).

    Generation order never affects sample content.
    """
    z = (master_seed ^ (index * 0x9E3779B97F4A7C15)) & 0xFFFFFFFFFFFFFFFF
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _node_color(hierarchy: ConceptHierarchy, node_id: int) -> np.ndarray:
    """Deterministic base color: parents get well-separated hues, children
    get hues near their parent with varied saturation/value."""
    node = hierarchy.node(node_id)
    if node.parent_id is None:
        root_slot = hierarchy.levels[0].index(node_id)
        hue = (0.12 + root_slot * 0.618033988749895) % 1.0
        return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9), dtype=np.float32)
    parent_color = _node_color(hierarchy, node.parent_id)
    parent_hue = colorsys.rgb_to_hsv(*parent_color.tolist())[0]
    kids = hierarchy.children_index[node.parent_id]
    k = kids.index(node_id)
    hue = (parent_hue + 0.07 * (k - (len(kids) - 1) / 2)) % 1.0
    sat = 0.5 + 0.5 * ((k * 0.37) % 1.0)
    val = 0.45 + 0.5 * (((k + 1) * 0.61) % 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random rotated ellipse as a boolean mask."""
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    ry = rng.uniform(0.10 * size, 0.28 * size)
    rx = rng.uniform(0.10 * size, 0.28 * size)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / rx
    v = (-x * st + y * ct) / ry
    return u * u + v * v <= 1.0


def generate_scene(cfg: SceneConfig, hierarchy: ConceptHierarchy, sample_seed: int) -> Sample:
    """Render one scene; fully deterministic given (cfg, sample_seed).

    Region draw order is deterministic and last-drawn-wins, with child and
    parent maps always written together, so within-level exclusivity and
    cross-level consistency hold by construction.
    """
    if hierarchy.depth < 1:
        raise ConfigError("hierarchy needs at least one level of children")
    eligible_parents = [p for p in hierarchy.level_ids(0) if hierarchy.children(p)]
    lo, hi = cfg.parent_count_range
    if lo > len(eligible_parents):
        raise ConfigError(
            f"parent_count_range asks for {lo} parents but only "
            f"{len(eligible_parents)} have children"
        )
    rng = np.random.default_rng(sample_seed)
    n_parents = int(rng.integers(lo, min(hi, len(eligible_parents)) + 1))
    chosen = list(rng.choice(eligible_parents, size=n_parents, replace=False))

    size = cfg.image_size
    parent_map = np.zeros((size, size), dtype=np.uint16)
    child_map = np.zeros((size, size), dtype=np.uint16)
    image = np.full((size, size, 3), 0.08, dtype=np.float32)

    for parent_id in chosen:
        kids = hierarchy.children(parent_id)
        clo, chi = cfg.children_per_parent_range
        n_kids = int(rng.integers(min(clo, len(kids)), min(chi, len(kids)) + 1))
        n_kids = max(1, n_kids)
        picked = list(rng.choice(kids, size=n_kids, replace=False))
        for child_id in picked:
            mask = _ellipse_mask(size, rng)
            child_map[mask] = child_id
            parent_map[mask] = parent_id
            image[mask] = _node_color(hierarchy, int(child_id))

    # pixels overwritten by later regions may leave stale colors; repaint
    # from the final child map so image and labels agree
    for child_id in np.unique(child_map):
        if child_id == 0:
            continue
        image[child_map == child_id] = _node_color(hierarchy, int(child_id))

    sigma = cfg.texture_noise_sigma
    if cfg.texture_noise_range is not None:
        sigma = float(rng.uniform(*cfg.texture_noise_range))
    if sigma > 0:
        image = image + rng.normal(0.0, sigma, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return Sample(
        sample_id="",
        image=image,
        level_maps={0: parent_map, 1: child_map},
        labeled=True,
        provenance=PROVENANCE_GT,
    )


# ---------------------------------------------------------------------------
# pool splitting and the manifest


@dataclass
class DatasetManifest:
    """Versioned record of the labeled / unlabeled / test pools."""

    root_path: str
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    test_ids: list[str]
    hierarchy_spec_path: str
    created_by_iteration: int = 0
    provenance: dict[str, str] = field(default_factory=dict)  # id -> provenance

    def __post_init__(self):
        pools = [set(self.labeled_ids), set(self.unlabeled_ids), set(self.test_ids)]
        total = sum(len(p) for p in pools)
        if len(pools[0] | pools[1] | pools[2]) != total:
            raise FractionError("pools are not pairwise disjoint")

    def all_ids(self) -> list[str]:
        return sorted(self.labeled_ids + self.unlabeled_ids + self.test_ids)

    def sample_provenance(self, sample_id: str) -> str:
        return self.provenance.get(sample_id, PROVENANCE_GT)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, versioned: bool = True):
        """Atomic write of manifest.json; prior versions are preserved."""
        root = Path(self.root_path)
        root.mkdir(parents=True, exist_ok=True)
        blob = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        for name in ([f"manifest_v{self.created_by_iteration}.json"] if versioned else []) + [
            "manifest.json"
        ]:
            tmp = root / (name + ".tmp")
            tmp.write_text(blob, encoding="utf-8")
            os.replace(tmp, root / name)

    @classmethod
    def load(cls, root_path, name: str = "manifest.json") -> "DatasetManifest":
        path = Path(root_path) / name
        if not path.exists():
            raise IoError(f"no manifest at {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        raw["root_path"] = str(root_path)
        return cls(**raw)


def split_pools(
    ids: Sequence[str],
    labeled_fraction: float,
    unlabeled_fraction: float,
    test_fraction: float,
    seed: int,
    root_path: str = "",
    hierarchy_spec_path: str = "",
) -> DatasetManifest:
    """Deterministic shuffled partition of ids into the three pools."""
    fracs = (labeled_fraction, unlabeled_fraction, test_fraction)
    if any(f < 0 for f in fracs):
        raise FractionError(f"fractions must be >= 0, got {fracs}")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise FractionError(f"fractions must sum to 1, got {sum(fracs)}")
    order = list(np.random.default_rng(seed).permutation(sorted(ids)))
    n = len(order)
    n_labeled = int(round(labeled_fraction * n))
    n_unlabeled = int(round(unlabeled_fraction * n))
    n_unlabeled = min(n_unlabeled, n - n_labeled)
    return DatasetManifest(
        root_path=str(root_path),
        labeled_ids=order[:n_labeled],
        unlabeled_ids=order[n_labeled : n_labeled + n_unlabeled],
        test_ids=order[n_labeled + n_unlabeled :],
        hierarchy_spec_path=str(hierarchy_spec_path),
    )


# ---------------------------------------------------------------------------
# sample IO


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png(path: Path, array_u16: np.ndarray):
    ok = cv2.imwrite(str(path), array_u16)
    if not ok:
        raise IoError(f"failed to write {path}")


def write_sample(sample: Sample, root) -> Path:
    """Lossless write: image quantized to 16 bits/channel, maps exact."""
    sample_dir = Path(root) / sample.sample_id
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
        image_u16 = np.round(sample.image * 65535.0).astype(np.uint16)
        _write_png(sample_dir / "image.png", image_u16[:, :, ::-1])  # cv2 is BGR
        for level, level_map in sorted(sample.level_maps.items()):
            _write_png(sample_dir / f"level_{level}.png", level_map.astype(np.uint16))
        files = sorted(p.name for p in sample_dir.glob("*.png") if not p.name.startswith("pseudo"))
        meta = {
            "sample_id": sample.sample_id,
            "labeled": sample.labeled,
            "provenance": sample.provenance,
            "levels": sorted(sample.level_maps),
            "checksums": {name: _sha256(sample_dir / name) for name in files},
        }
        tmp = sample_dir / "meta.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, sample_dir / "meta.json")
    except OSError as e:
        raise IoError(f"cannot write sample {sample.sample_id!r}: {e}") from e
    return sample_dir


def read_sample(root, sample_id: str, verify: bool = True) -> Sample:
    """Read a sample back; checksums are verified unless ``verify=False``."""
    sample_dir = Path(root) / sample_id
    meta_path = sample_dir / "meta.json"
    if not meta_path.exists():
        raise IoError(f"no sample {sample_id!r} under {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if verify:
        for name, digest in meta["checksums"].items():
            path = sample_dir / name
            if not path.exists() or _sha256(path) != digest:
                raise CorruptSampleError(f"{sample_id}/{name}: checksum mismatch")
    image_u16 = cv2.imread(str(sample_dir / "image.png"), cv2.IMREAD_UNCHANGED)
    if image_u16 is None:
        raise IoError(f"{sample_id}: unreadable image.png")
    image = (image_u16[:, :, ::-1].astype(np.float32)) / 65535.0
    level_maps = {}
    for level in meta["levels"]:
        level_map = cv2.imread(str(sample_dir / f"level_{level}.png"), cv2.IMREAD_UNCHANGED)
        if level_map is None:
            raise IoError(f"{sample_id}: unreadable level_{level}.png")
        level_maps[int(level)] = level_map.astype(np.uint16)
    return Sample(
        sample_id=meta["sample_id"],
        image=image,
        level_maps=level_maps,
        labeled=bool(meta["labeled"]),
        provenance=meta["provenance"],
    )


def write_pseudo_maps(root, sample_id: str, iteration: int, level_maps: dict[int, np.ndarray]):
    """Store pseudo-label maps next to the sample; ground truth stays intact."""
    sample_dir = Path(root) / sample_id
    if not sample_dir.exists():
        raise IoError(f"no sample {sample_id!r} under {root}")
    names = {}
    for level, level_map in sorted(level_maps.items()):
        name = f"pseudo_iter_{iteration}_level_{level}.png"
        _write_png(sample_dir / name, level_map.astype(np.uint16))
        names[str(level)] = name
    meta = {"iteration": iteration, "files": names,
            "checksums": {n: _sha256(sample_dir / n) for n in names.values()}}
    tmp = sample_dir / f"pseudo_iter_{iteration}.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, sample_dir / f"pseudo_iter_{iteration}.json")


def read_training_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """Load a sample with the label maps its provenance dictates.

    Ground-truth samples come back as written; pseudo-labeled samples get
    their pseudo maps for the manifest-recorded iteration.
    """
    sample = read_sample(manifest.root_path, sample_id)
    provenance = manifest.sample_provenance(sample_id)
    if provenance == PROVENANCE_GT:
        return sample
    iteration = int(provenance.rsplit("_", 1)[1])
    sample_dir = Path(manifest.root_path) / sample_id
    meta_path = sample_dir / f"pseudo_iter_{iteration}.json"
    if not meta_path.exists():
        raise IoError(f"{sample_id}: provenance {provenance} but no pseudo maps on disk")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    level_maps = {}
    for level, name in meta["files"].items():
        arr = cv2.imread(str(sample_dir / name), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise IoError(f"{sample_id}: unreadable {name}")
        level_maps[int(level)] = arr.astype(np.uint16)
    sample.level_maps = level_maps
    sample.labeled = True
    sample.provenance = provenance
    return sample


def content_hash(sample: Sample) -> str:
    """Hash of the rendered image bytes; used by the deduplication hook."""
    return hashlib.sha256(np.ascontiguousarray(sample.image).tobytes()).hexdigest()


def generate_dataset(
    cfg: SceneConfig,
    hierarchy: ConceptHierarchy,
    num_samples: int,
    root,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    hierarchy_spec_path: str = "",
) -> DatasetManifest:
    """Generate, write, and split a full dataset; pure in (cfg, cfg.seed)."""
    ids = []
    for index in range(num_samples):
        sample = generate_scene(cfg, hierarchy, derive_sample_seed(cfg.seed, index))
        sample.sample_id = f"s{index:05d}"
        write_sample(sample, root)
        ids.append(sample.sample_id)
    manifest = split_pools(
        ids, *fractions, seed=cfg.seed, root_path=str(root),
        hierarchy_spec_path=hierarchy_spec_path,
    )
    for sid in manifest.unlabeled_ids:
        # unlabeled pool: gt stays on disk for evaluation, but the pool flag
        # marks it unavailable for supervised training
        sample_dir = Path(root) / sid
        meta = json.loads((sample_dir / "meta.json").read_text(encoding="utf-8"))
        meta["labeled"] = False
        (sample_dir / "meta.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    manifest.save()
    return manifest
