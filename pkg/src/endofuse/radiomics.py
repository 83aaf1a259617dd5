"""Handcrafted texture features over masked image regions.

Pipeline per image: build a central-disk (or complementary peripheral)
region mask, quantize masked intensities to gray levels, then compute
first-order statistics plus co-occurrence (GLCM), run-length (GLRLM)
and size-zone (GLSZM) texture features, and first-order statistics on
two Laplacian-of-Gaussian filtered channels.  A full record carries 46
named values; central and peripheral records are merged side by side.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .dataset import FeatureTable, FeatureTableError


class RegionTooSmallError(ValueError):
    """Mask carries fewer pixels than texture statistics need."""


class FeatureUndefinedError(ValueError):
    """Region admits no valid pixel pairs / runs / zones."""


# Smallest region whose texture statistics are still meaningful; the
# reference geometry case (8x8 frame, half-radius disk = 12 pixels)
# must remain constructible.
MIN_REGION_PIXELS = 12

GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))  # 0, 45, 90, 135 degrees
GLRLM_DIRECTIONS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))

FIRST_ORDER_NAMES = (
    "mean", "variance", "skewness", "kurtosis", "energy",
    "entropy", "min", "max", "median", "range",
)
GLCM_NAMES = ("contrast", "correlation", "energy", "homogeneity",
              "entropy", "dissimilarity")
GLRLM_NAMES = ("sre", "lre", "gln", "rln", "rp")
GLSZM_NAMES = ("sae", "lae", "gln", "zsn", "zp")

LOG_SIGMAS = (1.0, 2.0)


class GrayImage:
    """2-D intensity raster with values in [0, 1]."""

    def __init__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-D array, got {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("GrayImage: non-finite pixel")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("GrayImage: pixel outside [0, 1]")
        self.pixels = pixels

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def rgb_to_gray(rgb):
    """Rec. 601 luma from a (3, H, W) array in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {rgb.shape}")
    g = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    return GrayImage(np.clip(g, 0.0, 1.0))


class RoiMask:
    """Binary per-pixel region-of-interest mask."""

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"RoiMask needs a 2-D array, got {bits.shape}")
        self.bits = bits

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def count(self):
        return int(self.bits.sum())


def make_central_mask(width, height, radius_fraction):
    """Disk at the image center; radius = radius_fraction * min(W,H)/2."""
    if width < 8 or height < 8:
        raise ValueError(f"image too small for masking: {width}x{height}")
    if not 0.0 < radius_fraction <= 1.0:
        raise ValueError(f"radius_fraction must be in (0, 1], got {radius_fraction}")
    radius = radius_fraction * min(width, height) / 2.0
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width]
    bits = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if bits.sum() < MIN_REGION_PIXELS:
        raise RegionTooSmallError(
            f"central mask has {int(bits.sum())} pixels (< {MIN_REGION_PIXELS})"
        )
    return RoiMask(bits)


def make_peripheral_mask(width, height, radius_fraction):
    """Exact complement of the central disk mask."""
    central = make_central_mask(width, height, radius_fraction)
    bits = ~central.bits
    if bits.sum() < MIN_REGION_PIXELS:
        raise RegionTooSmallError(
            f"peripheral mask has {int(bits.sum())} pixels (< {MIN_REGION_PIXELS})"
        )
    return RoiMask(bits)


class QuantizedRegion:
    """Masked pixels binned to gray levels 1..n_levels, positions kept."""

    def __init__(self, levels, mask_bits, n_levels):
        self.levels = levels  # int array, 0 outside the mask
        self.mask = mask_bits
        self.n_levels = n_levels


def quantize(values, mask, n_levels=32):
    """Fixed-bin-count quantization over the masked min-max range."""
    if n_levels < 2:
        raise ValueError(f"n_levels must be >= 2, got {n_levels}")
    values = _pixels(values)
    bits = mask.bits
    region = values[bits]
    if region.size == 0:
        raise RegionTooSmallError("empty masked region")
    lo, hi = region.min(), region.max()
    levels = np.zeros(values.shape, dtype=np.int64)
    if hi > lo:
        g = 1 + np.floor(n_levels * (values - lo) / (hi - lo)).astype(np.int64)
        np.minimum(g, n_levels, out=g)
        levels[bits] = g[bits]
    else:
        levels[bits] = 1
    return QuantizedRegion(levels, bits, n_levels)


def _pixels(img):
    return img.pixels if isinstance(img, GrayImage) else np.asarray(img, np.float64)


def first_order_features(img, mask):
    """Ten intensity statistics over the masked pixels."""
    v = _pixels(img)[mask.bits]
    if v.size == 0:
        raise RegionTooSmallError("empty masked region")
    mean = v.mean()
    var = v.var()
    if var > 0:
        std = np.sqrt(var)
        skew = np.mean((v - mean) ** 3) / std**3
        kurt = np.mean((v - mean) ** 4) / std**4 - 3.0
    else:
        skew = 0.0
        kurt = 0.0
    lo, hi = v.min(), v.max()
    if hi > lo:
        hist, _ = np.histogram(v, bins=32, range=(lo, hi))
        p = hist[hist > 0] / v.size
        entropy = float(-(p * np.log2(p)).sum())
    else:
        entropy = 0.0
    return {
        "mean": float(mean),
        "variance": float(var),
        "skewness": float(skew),
        "kurtosis": float(kurt),
        "energy": float((v**2).sum()),
        "entropy": entropy,
        "min": float(lo),
        "max": float(hi),
        "median": float(np.median(v)),
        "range": float(hi - lo),
    }


def glcm_matrix(q, offsets=GLCM_OFFSETS, distance=1):
    """Symmetric normalized co-occurrence matrix averaged over offsets."""
    ng = q.n_levels
    h, w = q.levels.shape
    mats = []
    for dr, dc in offsets:
        dr, dc = dr * distance, dc * distance
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        a = q.levels[r0:r1, c0:c1]
        b = q.levels[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        valid = (a > 0) & (b > 0)
        if not valid.any():
            continue
        counts = np.zeros((ng, ng))
        np.add.at(counts, (a[valid] - 1, b[valid] - 1), 1.0)
        counts += counts.T  # symmetric pairs
        mats.append(counts / counts.sum())
    if not mats:
        raise FeatureUndefinedError("no valid co-occurrence pairs in region")
    return np.mean(mats, axis=0)


def glcm_features(q, offsets=GLCM_OFFSETS, distance=1):
    p = glcm_matrix(q, offsets, distance)
    ng = p.shape[0]
    i = np.arange(1, ng + 1)[:, None]
    j = np.arange(1, ng + 1)[None, :]
    mu_i = (i * p).sum()
    mu_j = (j * p).sum()
    var_i = ((i - mu_i) ** 2 * p).sum()
    var_j = ((j - mu_j) ** 2 * p).sum()
    if var_i > 0 and var_j > 0:
        corr = (((i - mu_i) * (j - mu_j) * p).sum()) / np.sqrt(var_i * var_j)
    else:
        corr = 1.0
    nz = p[p > 0]
    return {
        "contrast": float(((i - j) ** 2 * p).sum()),
        "correlation": float(corr),
        "energy": float((p**2).sum()),
        "homogeneity": float((p / (1.0 + (i - j) ** 2)).sum()),
        "entropy": float(-(nz * np.log2(nz)).sum()),
        "dissimilarity": float((np.abs(i - j) * p).sum()),
    }


def _run_lines(q, direction):
    """Masked gray-level sequences along every line in a direction.

    A sequence breaks at unmasked pixels; only maximal lines are
    yielded, each as a list of levels.
    """
    h, w = q.levels.shape
    dr, dc = direction
    starts = []
    for r in range(h):
        for c in range(w):
            pr, pc = r - dr, c - dc
            if 0 <= pr < h and 0 <= pc < w:
                continue  # not a line start
            starts.append((r, c))
    for r0, c0 in starts:
        line = []
        r, c = r0, c0
        while 0 <= r < h and 0 <= c < w:
            line.append(q.levels[r, c])
            r += dr
            c += dc
        yield line


def glrlm_matrices(q, directions=GLRLM_DIRECTIONS):
    """One run-length matrix (levels x run length) per direction."""
    ng = q.n_levels
    n = max(q.levels.shape)
    out = []
    for d in directions:
        mat = np.zeros((ng, n))
        for line in _run_lines(q, d):
            run_level, run_len = 0, 0
            for lev in line + [0]:
                if lev == run_level and lev != 0:
                    run_len += 1
                else:
                    if run_level != 0:
                        mat[run_level - 1, run_len - 1] += 1.0
                    run_level, run_len = lev, 1
        out.append(mat)
    return out


def glrlm_features(q, directions=GLRLM_DIRECTIONS):
    """Galloway run-length features averaged over the directions."""
    n_pix = int(q.mask.sum())
    per_dir = []
    for mat in glrlm_matrices(q, directions):
        n_runs = mat.sum()
        if n_runs == 0:
            continue
        j = np.arange(1, mat.shape[1] + 1)[None, :]
        per_dir.append({
            "sre": (mat / j**2).sum() / n_runs,
            "lre": (mat * j**2).sum() / n_runs,
            "gln": (mat.sum(axis=1) ** 2).sum() / n_runs,
            "rln": (mat.sum(axis=0) ** 2).sum() / n_runs,
            "rp": n_runs / n_pix,
        })
    if not per_dir:
        raise FeatureUndefinedError("no runs in region")
    return {k: float(np.mean([d[k] for d in per_dir])) for k in GLRLM_NAMES}


def glszm_matrix(q):
    """Size-zone matrix: 8-connected equal-level zones within the mask."""
    ng = q.n_levels
    n_pix = int(q.mask.sum())
    if n_pix == 0:
        raise FeatureUndefinedError("empty region")
    structure = np.ones((3, 3), dtype=int)
    mat = np.zeros((ng, n_pix))
    for g in range(1, ng + 1):
        cells = q.levels == g
        if not cells.any():
            continue
        labeled, n_zones = ndimage.label(cells, structure=structure)
        sizes = np.bincount(labeled.ravel())[1:]
        for s in sizes:
            mat[g - 1, s - 1] += 1.0
    return mat


def glszm_features(q):
    """Thibault size-zone features."""
    mat = glszm_matrix(q)
    n_zones = mat.sum()
    if n_zones == 0:
        raise FeatureUndefinedError("no zones in region")
    n_pix = int(q.mask.sum())
    j = np.arange(1, mat.shape[1] + 1)[None, :]
    return {
        "sae": float((mat / j**2).sum() / n_zones),
        "lae": float((mat * j**2).sum() / n_zones),
        "gln": float((mat.sum(axis=1) ** 2).sum() / n_zones),
        "zsn": float((mat.sum(axis=0) ** 2).sum() / n_zones),
        "zp": float(n_zones / n_pix),
    }


def log_kernel(sigma):
    """Discrete Laplacian-of-Gaussian kernel, sum normalized to zero."""
    half = int(np.ceil(3.0 * sigma))
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    r2 = x**2 + y**2
    k = (r2 - 2.0 * sigma**2) / sigma**4 * np.exp(-r2 / (2.0 * sigma**2))
    return k - k.mean()


def log_filter(img, sigma):
    """LoG response map (values unbounded), reflect padding at borders."""
    if sigma not in LOG_SIGMAS:
        raise ValueError(f"sigma must be one of {LOG_SIGMAS}, got {sigma}")
    return ndimage.convolve(_pixels(img), log_kernel(sigma), mode="reflect")


def extract_record(img, mask, n_levels=32):
    """All 46 named features of one masked image region.

    Layout: 10 first-order + 6 GLCM + 5 GLRLM + 5 GLSZM on the raw
    intensities, then 10 first-order stats on each LoG scale.
    """
    q = quantize(img, mask, n_levels)
    record = {}
    for name, val in first_order_features(img, mask).items():
        record[f"fo_{name}"] = val
    for name, val in glcm_features(q).items():
        record[f"glcm_{name}"] = val
    for name, val in glrlm_features(q).items():
        record[f"glrlm_{name}"] = val
    for name, val in glszm_features(q).items():
        record[f"glszm_{name}"] = val
    for scale_idx, sigma in enumerate(LOG_SIGMAS, start=1):
        response = log_filter(img, sigma)
        for name, val in first_order_features(response, mask).items():
            record[f"log{scale_idx}_fo_{name}"] = val
    return record


def record_names(n_log_scales=len(LOG_SIGMAS)):
    names = [f"fo_{n}" for n in FIRST_ORDER_NAMES]
    names += [f"glcm_{n}" for n in GLCM_NAMES]
    names += [f"glrlm_{n}" for n in GLRLM_NAMES]
    names += [f"glszm_{n}" for n in GLSZM_NAMES]
    for s in range(1, n_log_scales + 1):
        names += [f"log{s}_fo_{n}" for n in FIRST_ORDER_NAMES]
    return names


def merge_tables(central, peripheral):
    """Join two per-region tables side by side on image_id.

    Columns get `central_` / `peripheral_` prefixes; labels, when
    present, must agree.
    """
    missing = set(central.image_ids) ^ set(peripheral.image_ids)
    if missing:
        raise FeatureTableError(
            f"image_id mismatch between tables: {sorted(missing)}"
        )
    columns = [f"central_{c}" for c in central.columns]
    columns += [f"peripheral_{c}" for c in peripheral.columns]
    rows = np.hstack([
        central.values,
        np.stack([peripheral.row(i) for i in central.image_ids]),
    ])
    labels = central.labels
    if labels is not None and peripheral.labels is not None:
        for iid in central.image_ids:
            if central.label(iid) != peripheral.label(iid):
                raise FeatureTableError(f"label mismatch for {iid!r}")
    elif labels is None and peripheral.labels is not None:
        labels = np.array([peripheral.label(i) for i in central.image_ids])
    return FeatureTable(list(central.image_ids), columns, rows, labels)
