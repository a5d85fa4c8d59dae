"""Synthetic dataset generation, manifests, and episodic sampling.

A record couples a class-id grid image with a token source (a token file or
a "synthetic:<seed>" recipe replayed on demand). Folds partition the class
space, so train and test records never share foreground classes.

Episode sampling follows the N-way K-shot protocol: N distinct classes, K
support images designated to each, one query drawn independently of the
supports (it may contain any number of the episode classes, including none).
Mixed supervision flags the lexicographically first floor(p * count) records
as pixel-labeled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import (BackboneConfig, GridImage, TokenBundle, load_tokens,
                       random_grid_image, synthetic_tokens)
from .pseudomask import read_pgm
from .seeding import rng_for


class ManifestError(RuntimeError):
    pass


@dataclass
class Record:
    name: str
    image: GridImage
    token_source: str              # "synthetic:<seed>" or a token-file path
    mask_path: Optional[str] = None

    @property
    def classes(self) -> Tuple[int, ...]:
        return self.image.classes

    @property
    def designated(self) -> int:
        return self.image.designated

    def grid(self) -> np.ndarray:
        if self.image.grid is None:
            raise ManifestError(f"record {self.name} has no mask grid")
        return self.image.grid


@dataclass
class Manifest:
    fold: int
    classes: Tuple[int, ...]
    records: List[Record]
    num_class_ids: int


@dataclass
class Episode:
    way: int
    shot: int
    classes: List[int]                 # episode slot n -> global class id
    supports: List[List[Record]]       # way x shot
    query: Record
    query_clf_gt: np.ndarray           # (way,) 0/1 presence
    query_seg_gt: Optional[np.ndarray]  # (H, W) labels in 1..way+1


def generate_synthetic_dataset(num_images: int, classes: Sequence[int],
                               num_class_ids: int, seed: int,
                               grid: Tuple[int, int] = (16, 16),
                               fold: int = 0) -> Manifest:
    """Round-robins the designated class over `classes` so every class has
    an equal share of support-eligible records."""
    classes = sorted(int(c) for c in classes)
    rng = rng_for(seed, "dataset", fold)
    records = []
    for i in range(num_images):
        designated = classes[i % len(classes)]
        image = random_grid_image(f"img_{fold}_{i:04d}", rng, classes,
                                  designated, num_class_ids, grid)
        token_seed = int(rng.integers(0, 2 ** 31))
        records.append(Record(name=image.name, image=image,
                              token_source=f"synthetic:{token_seed}"))
    return Manifest(fold=fold, classes=tuple(classes), records=records,
                    num_class_ids=num_class_ids)


def save_manifest(manifest: Manifest, path) -> None:
    payload = {
        "fold": manifest.fold,
        "classes": list(manifest.classes),
        "records": [{
            "name": r.name,
            "classes": list(r.classes),
            "mask": r.mask_path,
            "tokens": r.token_source,
        } for r in manifest.records],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_grid_pgm(grid: np.ndarray, path) -> None:
    """Class-id grid as raw 8-bit P5; ids are stored verbatim, not scaled."""
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.asarray(grid, dtype=np.uint8).tobytes())


def export_dataset(manifest: Manifest, out_dir) -> Path:
    """Materialize a manifest on disk: masks/ holds one grid PGM per record
    (synthetic token recipes need the grid back to replay). Returns the
    manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    exported = []
    for rec in manifest.records:
        rel = f"masks/{rec.name}.pgm"
        write_grid_pgm(rec.grid(), out_dir / rel)
        exported.append(Record(name=rec.name, image=rec.image,
                               token_source=rec.token_source, mask_path=rel))
    manifest_path = out_dir / "manifest.json"
    save_manifest(Manifest(fold=manifest.fold, classes=manifest.classes,
                           records=exported,
                           num_class_ids=manifest.num_class_ids),
                  manifest_path)
    return manifest_path


def load_manifest(path, num_class_ids: int) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}")
    records = []
    for entry in payload.get("records", []):
        classes = tuple(int(c) for c in entry["classes"])
        mask_path = entry.get("mask")
        if mask_path is not None:
            grid = read_pgm(path.parent / mask_path).astype(np.int64)
        elif entry["tokens"].startswith("synthetic:"):
            raise ManifestError(
                f"record {entry['name']}: synthetic tokens require a mask grid")
        else:
            grid = None
        image = GridImage(name=entry["name"], grid=grid, designated=classes[0],
                          classes=classes, num_class_ids=num_class_ids)
        records.append(Record(name=entry["name"], image=image,
                              token_source=entry["tokens"], mask_path=mask_path))
    return Manifest(fold=int(payload["fold"]),
                    classes=tuple(int(c) for c in payload["classes"]),
                    records=records, num_class_ids=num_class_ids)


class BundleCache:
    """Token bundles per record, loaded or regenerated exactly once."""

    def __init__(self, cfg: BackboneConfig, root: Optional[Path] = None):
        self.cfg = cfg
        self.root = Path(root) if root else None
        self._cache: Dict[str, TokenBundle] = {}

    def get(self, record: Record) -> TokenBundle:
        bundle = self._cache.get(record.name)
        if bundle is None:
            source = record.token_source
            if source.startswith("synthetic:"):
                seed = int(source.split(":", 1)[1])
                bundle = synthetic_tokens(record.image, self.cfg, seed)
            else:
                path = Path(source)
                if not path.is_absolute() and self.root is not None:
                    path = self.root / path
                bundle = load_tokens(path)
            self._cache[record.name] = bundle
        return bundle


def support_pool(records: Sequence[Record], class_id: int) -> List[Record]:
    return [r for r in records if r.designated == class_id]


def eligible_classes(manifest: Manifest, shot: int) -> List[int]:
    return [c for c in manifest.classes
            if len(support_pool(manifest.records, c)) >= shot]


def sample_episode(manifest: Manifest, way: int, shot: int,
                   rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot episode; errors if the fold cannot sustain it."""
    classes = eligible_classes(manifest, shot)
    if len(classes) < way:
        raise ValueError(f"fold {manifest.fold} has {len(classes)} classes "
                         f"with >= {shot} supports; need {way}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    supports = []
    for cls in chosen:
        pool = support_pool(manifest.records, cls)
        picks = rng.choice(len(pool), size=shot, replace=False)
        supports.append([pool[i] for i in picks])
    query = manifest.records[int(rng.integers(0, len(manifest.records)))]

    clf_gt = np.array([1 if c in query.classes else 0 for c in chosen],
                      dtype=np.int64)
    seg_gt = None
    if query.image.grid is not None:
        grid = query.grid()
        seg_gt = np.full(grid.shape, way + 1, dtype=np.int64)
        for n, cls in enumerate(chosen):
            seg_gt[grid == cls] = n + 1
    return Episode(way=way, shot=shot, classes=chosen, supports=supports,
                   query=query, query_clf_gt=clf_gt, query_seg_gt=seg_gt)


def assign_mixed_labels(manifest: Manifest, p: float) -> frozenset:
    """Names of the pixel-labeled records: lexicographically first floor(p*n)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"pixel fraction {p} outside [0, 1]")
    ordered = sorted(r.name for r in manifest.records)
    return frozenset(ordered[:math.floor(p * len(ordered))])


def class_binary_mask(record: Record, class_id: int) -> np.ndarray:
    return (record.grid() == class_id).astype(np.float64)
