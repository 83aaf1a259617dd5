"""Dataset plumbing: images, manifests, feature tables and batching.

A manifest is a `path,label` CSV; features live in a wide CSV keyed by
image_id.  Feature values are serialized with 17 significant digits so
the roundtrip is lossless for float64.  A deterministic synthetic
texture dataset is included for desk-scale verification.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    """Malformed or inconsistent manifest CSV."""


class FeatureTableError(ValueError):
    """Malformed feature CSV or mismatched table schemas."""


@dataclass
class DatasetManifest:
    entries: list  # (path, label) pairs
    class_names: list

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.entries)


class FeatureTable:
    """Rectangular named feature matrix keyed by image_id."""

    def __init__(self, image_ids, columns, values, labels=None):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(image_ids), len(columns)):
            raise FeatureTableError(
                f"values shape {values.shape} vs {len(image_ids)} ids"
                f" x {len(columns)} columns"
            )
        if len(set(image_ids)) != len(image_ids):
            raise FeatureTableError("duplicate image_id in table")
        if not np.all(np.isfinite(values)):
            raise FeatureTableError("non-finite feature value")
        self.image_ids = list(image_ids)
        self.columns = list(columns)
        self.values = values
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self._index = {iid: i for i, iid in enumerate(self.image_ids)}

    def row(self, image_id):
        return self.values[self._index[image_id]]

    def label(self, image_id):
        return int(self.labels[self._index[image_id]])

    def __contains__(self, image_id):
        return image_id in self._index

    def __len__(self):
        return len(self.image_ids)


def load_image(path, side=64):
    """Decode an 8-bit PNG to a (3, side, side) float array in [0, 1].

    Grayscale inputs are replicated to three channels; resizing is
    bilinear.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_manifest(path, num_classes=None):
    """Parse a `path,label` CSV into a DatasetManifest."""
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise ManifestError(f"{path}: expected header 'path,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 fields")
            p, lab = row[0].strip(), row[1].strip()
            try:
                label = int(lab)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-integer label {lab!r}")
            if label < 0:
                raise ManifestError(f"{path}:{lineno}: negative label")
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p!r}")
            seen.add(p)
            entries.append((p, label))
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    c = max(label for _, label in entries) + 1
    if num_classes is not None:
        if c > num_classes:
            bad = next((p, l) for p, l in entries if l >= num_classes)
            raise ManifestError(f"{path}: label {bad[1]} out of range for "
                                f"{num_classes} classes ({bad[0]})")
        c = num_classes
    return DatasetManifest(entries, [f"class_{i}" for i in range(c)])


def write_feature_csv(table, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        cols = ["image_id"]
        if table.labels is not None:
            cols.append("label")
        cols.extend(table.columns)
        fh.write(",".join(cols) + "\n")
        for i, iid in enumerate(table.image_ids):
            row = [iid]
            if table.labels is not None:
                row.append(str(int(table.labels[i])))
            row.extend(format(v, ".17g") for v in table.values[i])
            fh.write(",".join(row) + "\n")


def read_feature_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "image_id":
            raise FeatureTableError(f"{path}: first column must be image_id")
        has_label = len(header) > 1 and header[1] == "label"
        columns = header[2:] if has_label else header[1:]
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FeatureTableError(f"{path}:{lineno}: ragged row")
            ids.append(row[0])
            start = 1
            if has_label:
                labels.append(int(row[1]))
                start = 2
            try:
                rows.append([float(v) for v in row[start:]])
            except ValueError as exc:
                raise FeatureTableError(f"{path}:{lineno}: {exc}")
    values = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(columns)))
    return FeatureTable(ids, columns, values, labels if has_label else None)


@dataclass
class NormStats:
    """Per-column z-score statistics fit on the training split."""

    columns: list
    mean: np.ndarray
    std: np.ndarray
    dropped: list = field(default_factory=list)


def fit_norm_stats(table, train_ids):
    idx = [table._index[i] for i in train_ids]
    sub = table.values[idx]
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)
    keep = std > 0.0
    return NormStats(
        columns=[c for c, k in zip(table.columns, keep) if k],
        mean=mean[keep],
        std=std[keep],
        dropped=[c for c, k in zip(table.columns, keep) if not k],
    )


def apply_norm(table, stats):
    try:
        idx = [table.columns.index(c) for c in stats.columns]
    except ValueError as exc:
        raise FeatureTableError(f"feature table missing column: {exc}")
    values = (table.values[:, idx] - stats.mean) / stats.std
    return FeatureTable(table.image_ids, list(stats.columns), values, table.labels)


def train_val_split(ids, val_fraction, seed):
    """Seeded shuffle split; both sides non-empty."""
    ids = list(ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(len(ids) * val_fraction)))
    if n_val >= len(ids):
        raise ValueError("split leaves no training items")
    val = [ids[i] for i in order[:n_val]]
    train = [ids[i] for i in order[n_val:]]
    return train, val


def synthesize_dataset(out_dir, num_classes=4, per_class=50, side=64, seed=0):
    """Write a deterministic synthetic texture dataset and its manifest.

    Class k controls stripe frequency and blob density in both the
    central and peripheral regions, so handcrafted texture features and
    convolutional features are each class-discriminative.
    """
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    entries = []
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = cx = (side - 1) / 2.0
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    central = r2 <= (0.5 * side / 2.0) ** 2
    idx = 0
    for k in range(num_classes):
        for j in range(per_class):
            rng = np.random.default_rng([seed, k, j])
            phase = rng.uniform(0, 2 * np.pi)
            angle = rng.uniform(0, np.pi)
            freq = 2.0 + 3.0 * k
            stripes = np.sin(
                2 * np.pi * freq / side * (xx * np.cos(angle) + yy * np.sin(angle))
                + phase
            )
            img = 0.5 + 0.22 * stripes
            # peripheral blobs, count grows with the class index
            n_blobs = 4 + 6 * k
            sigma = 2.5
            for _ in range(n_blobs):
                by, bx = rng.uniform(0, side, size=2)
                amp = rng.uniform(0.25, 0.45) * (1 if rng.random() < 0.5 else -1)
                d2 = (yy - by) ** 2 + (xx - bx) ** 2
                img += np.where(~central, amp * np.exp(-d2 / (2 * sigma**2)), 0.0)
            img += rng.normal(0.0, 0.03, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            pix = np.round(img * 255.0).astype(np.uint8)
            rel = f"images/c{k}_{j:04d}.png"
            Image.fromarray(pix, mode="L").save(os.path.join(out_dir, rel))
            entries.append((rel, k))
            idx += 1
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("path,label\n")
        for rel, k in entries:
            fh.write(f"{rel},{k}\n")
    return manifest_path


class ImageCache:
    """In-memory decoded image cache keyed by path."""

    def __init__(self, root, side):
        self.root = root
        self.side = side
        self._cache = {}

    def get(self, rel_path):
        arr = self._cache.get(rel_path)
        if arr is None:
            arr = load_image(os.path.join(self.root, rel_path), self.side)
            self._cache[rel_path] = arr
        return arr


def batch_iter(entries, table, cache, batch_size, rng):
    """Yield (images, features, labels, ids) batches in seeded order.

    The final partial batch is kept.  Feature rows are aligned to images
    by image_id; a manifest entry absent from the table is an error.
    """
    entries = list(entries)
    for path, _ in entries:
        if path not in table:
            raise FeatureTableError(f"manifest entry {path!r} missing from features")
    order = rng.permutation(len(entries))
    for start in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[start : start + batch_size]]
        imgs = np.stack([cache.get(p) for p, _ in chunk])
        feats = np.stack([table.row(p) for p, _ in chunk])
        labels = np.array([lab for _, lab in chunk], dtype=np.int64)
        yield imgs, feats, labels, [p for p, _ in chunk]
