"""Dataset ingestion, the PPM codec, resizing, and the synthetic task.

The synthetic task stands in for inaccessible face datasets: "real" images
are smooth random Gaussian blobs, "fake" ones add a faint high-frequency
checkerboard patch, mimicking the upsampling artifacts of image generators
at a controllable amplitude.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError

IMAGE_SIZE = 64


def save_ppm(img_u8, path):
    """Write a binary (P6) PPM, maxval 255."""
    img = np.ascontiguousarray(img_u8, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM wants (h, w, 3) uint8, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def load_ppm(path):
    """Read a binary (P6) PPM; tolerates comments and odd whitespace."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise FormatError(f"bad magic {data[:2]!r}, expected b'P6'", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"expected integer header field, got {token!r}", offset=start)
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255", offset=pos)
    pos += 1  # single whitespace byte separates header from payload
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(data) - pos}", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def resize_bilinear(img, out_h, out_w):
    """Separable bilinear resize with half-pixel-centered sampling."""
    h, w = img.shape[:2]

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    i0, i1, ti = axis_coords(h, out_h)
    j0, j1, tj = axis_coords(w, out_w)
    rows = img[i0] * (1 - ti)[:, None, None] + img[i1] * ti[:, None, None]
    out = rows[:, j0] * (1 - tj)[None, :, None] + rows[:, j1] * tj[None, :, None]
    return out.astype(img.dtype)


@dataclass
class LabeledDataset:
    """Images in [0, 1] float32, labels 0 (real) / 1 (fake), source paths."""

    images: np.ndarray
    labels: np.ndarray
    paths: list
    split: str = ""

    def __len__(self):
        return len(self.labels)

    def class_counts(self):
        return {0: int((self.labels == 0).sum()), 1: int((self.labels == 1).sum())}

    def subset(self, indices, split=""):
        indices = np.asarray(indices)
        return LabeledDataset(
            self.images[indices],
            self.labels[indices],
            [self.paths[i] for i in indices],
            split or self.split,
        )


def load_dataset_dir(root, size=IMAGE_SIZE):
    """Load ``root/{real,fake}/*.ppm``; deterministic lexicographic order.

    Images that are not ``size`` x ``size`` are bilinearly resized.
    """
    root = Path(root)
    entries = []
    for sub, label in (("real", 0), ("fake", 1)):
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"missing dataset subdirectory {d}")
        files = sorted(d.glob("*.ppm"))
        if not files:
            raise DatasetError(f"no .ppm images under {d}")
        entries.extend((str(f), label) for f in files)
    entries.sort()

    images = np.empty((len(entries), size, size, 3), dtype=np.float32)
    labels = np.empty(len(entries), dtype=np.int64)
    for i, (path, label) in enumerate(entries):
        img = load_ppm(path).astype(np.float32) / 255
        if img.shape[:2] != (size, size):
            img = resize_bilinear(img, size, size)
        images[i] = img
        labels[i] = label
    return LabeledDataset(images, labels, [p for p, _ in entries])


@dataclass
class SyntheticTaskConfig:
    n_per_class: int = 100
    seed: int = 0
    blob_count: int = 6
    artifact_amplitude: float = 0.25
    artifact_period: int = 2
    artifact_region: float = 0.5
    size: int = IMAGE_SIZE


def _blob_image(rng, size, blob_count):
    yy = np.arange(size, dtype=np.float64)[:, None, None]
    xx = np.arange(size, dtype=np.float64)[None, :, None]
    img = np.zeros((size, size, 3))
    for _ in range(blob_count):
        cy, cx = rng.uniform(0, size, size=2)
        width = rng.uniform(8, 24)
        amps = rng.uniform(0, 1, size=3)
        img += amps * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def _checkerboard(size, period):
    cell = max(1, period // 2)
    ii = np.arange(size)[:, None] // cell
    jj = np.arange(size)[None, :] // cell
    return np.where((ii + jj) % 2 == 0, 1.0, -1.0)


def synthesize_image(cfg: SyntheticTaskConfig, label, index):
    """One deterministic u8 image; fakes get the checkerboard patch.

    The artifact geometry is drawn after the blob parameters from a stream
    keyed by (seed, class, index), so the same (seed, index) with amplitude
    zero yields the artifact-free twin of a fake image.
    """
    rng = np.random.default_rng([cfg.seed, 7, label, index])
    img = _blob_image(rng, cfg.size, cfg.blob_count)
    if label == 1:
        side = int(round(cfg.size * np.sqrt(cfg.artifact_region)))
        side = min(max(side, 1), cfg.size)
        y0 = int(rng.integers(0, cfg.size - side + 1))
        x0 = int(rng.integers(0, cfg.size - side + 1))
        board = _checkerboard(cfg.size, cfg.artifact_period)[y0 : y0 + side, x0 : x0 + side, None]
        img[y0 : y0 + side, x0 : x0 + side] += cfg.artifact_amplitude * board
        img = np.clip(img, 0, 1)
    return np.round(img * 255).astype(np.uint8)


def generate_synthetic(cfg: SyntheticTaskConfig, out_root=None):
    """Build the synthetic dataset; optionally also write PPMs + manifest."""
    total = 2 * cfg.n_per_class
    images = np.empty((total, cfg.size, cfg.size, 3), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    paths = []
    rows = []
    for label, sub in ((0, "real"), (1, "fake")):
        for i in range(cfg.n_per_class):
            img_u8 = synthesize_image(cfg, label, i)
            pos = label * cfg.n_per_class + i
            images[pos] = img_u8.astype(np.float32) / 255
            labels[pos] = label
            name = f"{sub}/{sub}_{i:05d}.ppm"
            paths.append(name)
            rows.append((name, label, cfg.seed))
    if out_root is not None:
        out_root = Path(out_root)
        for sub in ("real", "fake"):
            (out_root / sub).mkdir(parents=True, exist_ok=True)
        for pos, name in enumerate(paths):
            save_ppm(np.round(images[pos] * 255).astype(np.uint8), out_root / name)
        with open(out_root / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label", "seed"])
            writer.writerows(rows)
    return LabeledDataset(images, labels, paths)


def split_dataset(dataset: LabeledDataset, fractions, seed):
    """Stratified split into (train, val, test, finetune)."""
    if len(fractions) != 4:
        raise DatasetError(f"need 4 split fractions, got {len(fractions)}")
    return stratified_split(dataset, fractions, seed, ("train", "val", "test", "finetune"))


def stratified_split(dataset: LabeledDataset, fractions, seed, names):
    """Seeded per-class shuffle, then largest-remainder allocation, so class
    balance is within one item per split and the splits partition the data."""
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {sum(fractions)}")

    buckets = [[] for _ in names]
    for label in (0, 1):
        idx = np.flatnonzero(dataset.labels == label)
        idx = idx[np.random.default_rng([seed, 3, label]).permutation(len(idx))]
        counts = _largest_remainder(len(idx), fractions)
        start = 0
        for b, count in enumerate(counts):
            buckets[b].extend(idx[start : start + count])
            start += count
    out = []
    for name, bucket in zip(names, buckets):
        if not bucket:
            raise DatasetError(f"split {name!r} is empty")
        out.append(dataset.subset(sorted(bucket), split=name))
    return tuple(out)


def _largest_remainder(n, fractions):
    exact = [f * n for f in fractions]
    counts = [int(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts
