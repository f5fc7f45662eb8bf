"""Dataset persistence, splitting, input normalization and batch iteration.

On disk a dataset directory holds PNG pairs plus two index files:
  - manifest.jsonl: one JSON object per sample with exactly the SampleRecord
    fields (id, color_path, mask_path, joints_3d, base_3d, angles, robot_type,
    split_tag)
  - meta.json: dataset-level fields (family label, joint/class counts, class
    names, seeds)

Network inputs are the 512x424 PNGs box-downscaled 2x2 to 256x212 and divided
by 255. Mask downscaling uses a majority rule with ties going to foreground,
which favors recall of the thin silhouette.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "meta.json"
SOURCE_HW = (424, 512)
INPUT_HW = (212, 256)


class TooFewSamples(ValueError):
    """Not enough records to split."""


class BadDimensions(ValueError):
    """Source image is not the expected 512x424."""


class EmptySplit(ValueError):
    """No records carry the requested split tag."""


@dataclass(frozen=True)
class SampleRecord:
    id: str
    color_path: str
    mask_path: str
    joints_3d: tuple        # (n_joints + 1) rows of (x, y, z), camera frame
    base_3d: tuple
    angles: tuple
    robot_type: int
    split_tag: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    robot_type: str          # family label, e.g. "urmix" or "kukalike"
    n_joints: int
    n_types: int
    class_names: tuple
    split_seed: int | None
    base_seed: int
    root: Path

    def ids(self, split_tag: str | None = None) -> list[str]:
        if split_tag is None:
            return [r.id for r in self.records]
        return [r.id for r in self.records if r.split_tag == split_tag]

    def by_id(self, rid: str) -> SampleRecord:
        return {r.id: r for r in self.records}[rid]


class DatasetWriter:
    """Streams rendered samples into a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def add(self, sample, index: int) -> SampleRecord:
        rid = f"{index:06d}"
        color_path = f"{rid}_color.png"
        mask_path = f"{rid}_mask.png"
        Image.fromarray(sample.color, mode="RGB").save(self.root / color_path)
        Image.fromarray(sample.mask.astype(np.uint8) * 255, mode="L").save(self.root / mask_path)
        return SampleRecord(
            id=rid, color_path=color_path, mask_path=mask_path,
            joints_3d=tuple(map(tuple, np.asarray(sample.joints_3d, dtype=float))),
            base_3d=tuple(np.asarray(sample.base_3d, dtype=float)),
            angles=tuple(np.asarray(sample.angles, dtype=float)),
            robot_type=int(sample.robot_type))


def save_manifest(manifest: DatasetManifest) -> None:
    lines = []
    for r in manifest.records:
        lines.append(json.dumps({
            "id": r.id, "color_path": r.color_path, "mask_path": r.mask_path,
            "joints_3d": [list(p) for p in r.joints_3d],
            "base_3d": list(r.base_3d), "angles": list(r.angles),
            "robot_type": r.robot_type, "split_tag": r.split_tag,
        }, separators=(",", ":")))
    (manifest.root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "robot_type": manifest.robot_type, "n_joints": manifest.n_joints,
        "n_types": manifest.n_types, "class_names": list(manifest.class_names),
        "split_seed": manifest.split_seed, "base_seed": manifest.base_seed,
        "n_samples": len(manifest.records),
    }
    (manifest.root / META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_manifest(root, check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    meta = json.loads((root / META_NAME).read_text(encoding="utf-8"))
    records = []
    with open(root / MANIFEST_NAME, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            records.append(SampleRecord(
                id=doc["id"], color_path=doc["color_path"], mask_path=doc["mask_path"],
                joints_3d=tuple(map(tuple, doc["joints_3d"])),
                base_3d=tuple(doc["base_3d"]), angles=tuple(doc["angles"]),
                robot_type=int(doc["robot_type"]), split_tag=doc.get("split_tag")))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids in manifest")
    if check_files:
        for r in records:
            for p in (r.color_path, r.mask_path):
                if not (root / p).exists():
                    raise FileNotFoundError(f"missing dataset file {root / p}")
    return DatasetManifest(
        records=tuple(records), robot_type=meta["robot_type"],
        n_joints=int(meta["n_joints"]), n_types=int(meta["n_types"]),
        class_names=tuple(meta["class_names"]),
        split_seed=meta.get("split_seed"), base_seed=int(meta.get("base_seed", 0)),
        root=root)


def split(manifest: DatasetManifest, train_fraction: float = 0.8,
          seed: int = 0) -> DatasetManifest:
    """Seeded shuffle; floor(train_fraction * n) records become train, rest test."""
    n = len(manifest.records)
    if n < 2:
        raise TooFewSamples(f"cannot split {n} record(s)")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(train_fraction * n)
    tags = {}
    for pos, idx in enumerate(order):
        tags[manifest.records[idx].id] = "train" if pos < n_train else "test"
    new_records = tuple(replace(r, split_tag=tags[r.id]) for r in manifest.records)
    return replace(manifest, records=new_records, split_seed=int(seed))


def nested_subset(ids, n: int, seed: int) -> list[str]:
    """First n of a seeded permutation, so smaller subsets nest inside larger ones."""
    if n > len(ids):
        raise ValueError(f"requested {n} of {len(ids)} ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# Image loading and normalization
# ---------------------------------------------------------------------------

def _check_source(arr: np.ndarray) -> None:
    if arr.shape[:2] != SOURCE_HW:
        raise BadDimensions(f"expected {SOURCE_HW[1]}x{SOURCE_HW[0]} source, "
                            f"got {arr.shape[1]}x{arr.shape[0]}")


def box_sums2(img: np.ndarray) -> np.ndarray:
    """Sum of each 2x2 block (exact integer math for uint8 sources)."""
    a = img.astype(np.float64) if img.dtype != np.float64 else img
    return a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]


def box_downscale2(img: np.ndarray) -> np.ndarray:
    """2x2 box-filter downscale (mean of each block)."""
    return box_sums2(img) / 4.0


def load_color(manifest_root, record: SampleRecord) -> np.ndarray:
    arr = np.asarray(Image.open(Path(manifest_root) / record.color_path).convert("RGB"))
    _check_source(arr)
    return arr


def load_mask(manifest_root, record: SampleRecord) -> np.ndarray:
    arr = np.asarray(Image.open(Path(manifest_root) / record.mask_path).convert("L"))
    _check_source(arr)
    return arr >= 128


def load_input(manifest_root, record: SampleRecord) -> np.ndarray:
    """Normalized network input: (3, 212, 256) float64 in [0, 1]."""
    arr = load_color(manifest_root, record)
    down = box_downscale2(arr) / 255.0
    return np.ascontiguousarray(down.transpose(2, 0, 1))


def downscale_mask(mask: np.ndarray) -> np.ndarray:
    """Majority-rule 2x2 downscale; 2-of-4 ties count as foreground."""
    return box_sums2(mask.astype(np.float64)) >= 2.0


def load_mask_input(manifest_root, record: SampleRecord) -> np.ndarray:
    return downscale_mask(load_mask(manifest_root, record))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    images: np.ndarray   # (B, 3, 212, 256) float64 in [0, 1]
    masks: np.ndarray    # (B, 212, 256) bool
    joints: np.ndarray   # (B, 3 * n_joints) float64, meters; joints only, no base
    bases: np.ndarray    # (B, 3) float64
    types: np.ndarray    # (B,) int64
    ids: tuple


class ArrayCache:
    """Compact in-memory copy of the arrays a training run touches.

    Color images are stored as uint16 2x2 box sums, which reproduces
    load_input bit-exactly after the float64 division, at a quarter of the
    footprint.
    """

    def __init__(self, manifest: DatasetManifest, ids=None):
        self.root = manifest.root
        self.n_joints = manifest.n_joints
        self.color_sums = {}
        self.masks = {}
        self.joints = {}
        self.bases = {}
        self.types = {}
        for rid in (ids if ids is not None else manifest.ids()):
            rec = manifest.by_id(rid)
            self.color_sums[rid] = box_sums2(load_color(self.root, rec)).astype(np.uint16)
            self.masks[rid] = load_mask_input(self.root, rec)
            j = np.asarray(rec.joints_3d, dtype=float)
            self.joints[rid] = j[1:].reshape(-1)
            self.bases[rid] = np.asarray(rec.base_3d, dtype=float)
            self.types[rid] = int(rec.robot_type)

    def gather(self, ids) -> Batch:
        images = np.stack([self.color_sums[i] for i in ids]).astype(np.float64)
        images /= 4.0
        images /= 255.0
        return Batch(
            images=np.ascontiguousarray(images.transpose(0, 3, 1, 2)),
            masks=np.stack([self.masks[i] for i in ids]),
            joints=np.stack([self.joints[i] for i in ids]),
            bases=np.stack([self.bases[i] for i in ids]),
            types=np.array([self.types[i] for i in ids], dtype=np.int64),
            ids=tuple(ids))


def _batch_from_disk(manifest: DatasetManifest, ids) -> Batch:
    recs = [manifest.by_id(i) for i in ids]
    return Batch(
        images=np.stack([load_input(manifest.root, r) for r in recs]),
        masks=np.stack([load_mask_input(manifest.root, r) for r in recs]),
        joints=np.stack([np.asarray(r.joints_3d, dtype=float)[1:].reshape(-1) for r in recs]),
        bases=np.stack([np.asarray(r.base_3d, dtype=float) for r in recs]),
        types=np.array([r.robot_type for r in recs], dtype=np.int64),
        ids=tuple(ids))


def batches(manifest: DatasetManifest, split_tag: str, batch_size: int,
            epoch_seed: int, cache: ArrayCache | None = None, ids=None,
            shuffle: bool = True):
    """Seeded-permutation mini-batch iterator; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pool = list(ids) if ids is not None else manifest.ids(split_tag)
    if not pool:
        raise EmptySplit(f"no records tagged {split_tag!r}")
    if shuffle:
        order = np.random.default_rng(epoch_seed).permutation(len(pool))
        pool = [pool[i] for i in order]
    for start in range(0, len(pool), batch_size):
        chunk = pool[start:start + batch_size]
        yield cache.gather(chunk) if cache is not None else _batch_from_disk(manifest, chunk)
