"""Labelled images and simulated measurement datasets.

Images come either from IDX files (fashion-MNIST style) or from a built-in
geometric shapes generator; measurements are synthesized by projecting each
image through every requested fiber configuration.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fiber import (
    DEFAULT_NOISE_STD,
    SpeckleEnsemble,
    apply_normalization,
    forward_measure,
    simulate_backgrounds,
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

MSDT_MAGIC = b"MSDT"
MSDT_VERSION = 1

SHAPE_CLASS_NAMES = [
    "filled_square", "hollow_square", "disk", "cross",
    "h_bars", "v_bars", "diagonal", "ring",
]


class DataError(ValueError):
    pass


@dataclass
class LabelledImageSet:
    images: np.ndarray  # (count, H, W), floats in [0,1]
    labels: np.ndarray  # (count,), ints in {0..k-1}
    k: int
    source: str

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise DataError("images must be square (count, side, side)")
        side = self.images.shape[1]
        if side & (side - 1):
            raise DataError(f"image side must be a power of two, got {side}")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.k:
            raise DataError("labels out of range")

    @property
    def side(self) -> int:
        return int(self.images.shape[1])


@dataclass
class MeasurementRecord:
    y: np.ndarray
    image: np.ndarray | None
    label: int
    config_id: str
    degenerate: bool = False


@dataclass
class MeasurementDataset:
    records: list[MeasurementRecord]
    split: str  # train | test_seen | test_unseen
    ensemble_seed: int
    ensemble_hash: bytes
    k: int

    def __len__(self):
        return len(self.records)

    def stack_y(self) -> np.ndarray:
        return np.stack([r.y for r in self.records])

    def stack_images(self) -> np.ndarray:
        if any(r.image is None for r in self.records):
            raise DataError("dataset was saved without embedded images")
        return np.stack([r.image for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def config_ids(self) -> list[str]:
        return [r.config_id for r in self.records]


# ---- IDX ------------------------------------------------------------------

def _read_be32(view: memoryview, pos: int, path) -> tuple[int, int]:
    if pos + 4 > len(view):
        raise DataError(f"truncated IDX file {path}")
    return struct.unpack(">I", view[pos : pos + 4])[0], pos + 4


def read_idx(images_path, labels_path, target_side: int = 64) -> LabelledImageSet:
    """Parse big-endian IDX image/label files and resize to the target side.

    28x28 sources are integer-factor nearest-neighbor upsampled and then
    border padded; arbitrary sides fall back to nearest-neighbor resampling.
    """
    raw = Path(images_path).read_bytes()
    view = memoryview(raw)
    magic, pos = _read_be32(view, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"bad magic 0x{magic:08x} in IDX image file {images_path}")
    count, pos = _read_be32(view, pos, images_path)
    rows, pos = _read_be32(view, pos, images_path)
    cols, pos = _read_be32(view, pos, images_path)
    need = count * rows * cols
    if len(view) - pos < need:
        raise DataError(f"truncated IDX payload in {images_path}")
    pixels = np.frombuffer(view[pos : pos + need], dtype=np.uint8)
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0

    raw = Path(labels_path).read_bytes()
    view = memoryview(raw)
    magic, pos = _read_be32(view, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"bad magic 0x{magic:08x} in IDX label file {labels_path}")
    lcount, pos = _read_be32(view, pos, labels_path)
    if len(view) - pos < lcount:
        raise DataError(f"truncated IDX payload in {labels_path}")
    labels = np.frombuffer(view[pos : pos + lcount], dtype=np.uint8).astype(np.int64)
    if lcount != count:
        raise DataError(
            f"count mismatch: {count} images in {images_path} vs {lcount} labels in {labels_path}"
        )

    images = np.stack([_resize_image(im, target_side) for im in images])
    k = int(labels.max()) + 1 if count else 1
    return LabelledImageSet(images=images, labels=labels, k=k, source="idx_file")


def _resize_image(im: np.ndarray, target: int) -> np.ndarray:
    side = im.shape[0]
    if side == target:
        return im
    if target > side and target % 2 == 0:
        factor = target // side
        if factor >= 1:
            up = im.repeat(factor, axis=0).repeat(factor, axis=1)
            rem = target - up.shape[0]
            lo = rem // 2
            return np.pad(up, ((lo, rem - lo), (lo, rem - lo)))
    idx = (np.arange(target) * side) // target
    return im[np.ix_(idx, idx)]


# ---- synthetic shapes -----------------------------------------------------

def gen_shapes(count: int, k: int, side: int, seed: int = 0) -> LabelledImageSet:
    """k geometric classes with position/scale jitter, balanced within +-1."""
    if k > 8:
        raise DataError(f"at most 8 shape classes available, got {k}")
    if k < 1 or side < 8:
        raise DataError("need k >= 1 and side >= 8")
    rng = np.random.default_rng(seed)
    images = np.zeros((count, side, side))
    labels = np.array([i % k for i in range(count)], dtype=np.int64)
    for i in range(count):
        images[i] = _draw_shape(labels[i], side, rng)
    return LabelledImageSet(images=images, labels=labels, k=k, source="synthetic_shapes")


def _draw_shape(cls: int, side: int, rng: np.random.Generator) -> np.ndarray:
    im = np.zeros((side, side))
    half = side // 2
    size = rng.integers(half - side // 8, half + side // 8 + 1)
    max_off = side - size
    r0 = rng.integers(0, max_off + 1)
    c0 = rng.integers(0, max_off + 1)
    yy, xx = np.mgrid[0:side, 0:side]
    cy, cx = r0 + size / 2.0, c0 + size / 2.0
    if cls == 0:  # filled square
        im[r0 : r0 + size, c0 : c0 + size] = 1.0
    elif cls == 1:  # hollow square
        thick = max(1, size // 5)
        im[r0 : r0 + size, c0 : c0 + size] = 1.0
        im[r0 + thick : r0 + size - thick, c0 + thick : c0 + size - thick] = 0.0
    elif cls == 2:  # disk
        im[(yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2.0) ** 2] = 1.0
    elif cls == 3:  # cross
        thick = max(1, size // 4)
        mid_r = int(cy - thick / 2)
        mid_c = int(cx - thick / 2)
        im[mid_r : mid_r + thick, c0 : c0 + size] = 1.0
        im[r0 : r0 + size, mid_c : mid_c + thick] = 1.0
    elif cls == 4:  # horizontal bars
        period = max(2, size // 3)
        band = ((yy - r0) % period) < period // 2
        im[(yy >= r0) & (yy < r0 + size) & (xx >= c0) & (xx < c0 + size) & band] = 1.0
    elif cls == 5:  # vertical bars
        period = max(2, size // 3)
        band = ((xx - c0) % period) < period // 2
        im[(yy >= r0) & (yy < r0 + size) & (xx >= c0) & (xx < c0 + size) & band] = 1.0
    elif cls == 6:  # diagonal stripe
        thick = max(1, size // 4)
        im[(np.abs((yy - r0) - (xx - c0)) < thick)
           & (yy >= r0) & (yy < r0 + size) & (xx >= c0) & (xx < c0 + size)] = 1.0
    elif cls == 7:  # ring
        rr = (yy - cy) ** 2 + (xx - cx) ** 2
        outer = (size / 2.0) ** 2
        inner = (size / 2.0 - max(1, size // 5)) ** 2
        im[(rr <= outer) & (rr >= inner)] = 1.0
    return im


# ---- measurement synthesis ------------------------------------------------

def ensemble_hash(ensemble: SpeckleEnsemble) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack("<IIQ", ensemble.M, ensemble.N, ensemble.seed))
    for cfg, mat in zip(ensemble.configurations, ensemble.matrices):
        h.update(cfg.id.encode())
        h.update(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    return h.digest()


def synthesize_measurements(images: LabelledImageSet, ensemble: SpeckleEnsemble,
                            config_ids: list[str], noise_std: float = DEFAULT_NOISE_STD,
                            s: float = 10.0, noise_seed: int = 0,
                            channels: str = "both", embed_images: bool = True,
                            split: str = "train") -> MeasurementDataset:
    """Project every image through every requested configuration.

    Noise is added after normalization, on both channels. One configuration's
    matrix is in play at a time, so paper-scale ensembles stream through
    without materializing all projections at once.
    """
    n_pixels = images.side * images.side
    if ensemble.N != n_pixels:
        raise DataError(
            f"ensemble pixel count {ensemble.N} does not match images ({n_pixels})"
        )
    rng = np.random.default_rng(noise_seed)
    flat = images.images.reshape(len(images.images), n_pixels)
    records: list[MeasurementRecord] = []
    for cid in config_ids:
        a = ensemble.matrix_for(cid)
        w, b = simulate_backgrounds(a)
        projections = flat @ a.T  # (count, M)
        for img, lab, ax in zip(images.images, images.labels, projections):
            y, degenerate = apply_normalization(ax, s, w, b, channels=channels)
            if noise_std > 0.0:
                y = y + rng.normal(0.0, noise_std, size=y.shape)
            records.append(MeasurementRecord(
                y=y, image=img.reshape(-1).copy() if embed_images else None,
                label=int(lab), config_id=cid,
                degenerate=degenerate,
            ))
    return MeasurementDataset(records=records, split=split,
                              ensemble_seed=ensemble.seed,
                              ensemble_hash=ensemble_hash(ensemble), k=images.k)


def split_by_config(dataset: MeasurementDataset, train_ids: list[str],
                    unseen_ids: list[str]) -> tuple[MeasurementDataset, MeasurementDataset, MeasurementDataset]:
    """Route records into train / test_seen / test_unseen by configuration.

    Records at training configurations land in train; the caller decides
    which images feed the seen-test split by synthesizing them separately,
    so here test_seen collects training-configuration records flagged via
    a disjoint image set (see pipeline). Records at unseen configurations
    always land in test_unseen.
    """
    if set(train_ids) & set(unseen_ids):
        raise DataError("train and unseen configuration id sets must be disjoint")
    train, seen, unseen = [], [], []
    for r in dataset.records:
        if r.config_id in train_ids:
            train.append(r)
        elif r.config_id in unseen_ids:
            unseen.append(r)
        else:
            seen.append(r)
    make = lambda recs, tag: MeasurementDataset(
        records=recs, split=tag, ensemble_seed=dataset.ensemble_seed,
        ensemble_hash=dataset.ensemble_hash, k=dataset.k)
    return make(train, "train"), make(seen, "test_seen"), make(unseen, "test_unseen")


# ---- MSDT file format -----------------------------------------------------

_SPLIT_CODES = {"train": 0, "test_seen": 1, "test_unseen": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def save_dataset(path, dataset: MeasurementDataset) -> None:
    blob = bytearray()
    blob += MSDT_MAGIC
    blob += struct.pack("<I", MSDT_VERSION)
    blob += dataset.ensemble_hash
    blob += struct.pack("<QBBI", dataset.ensemble_seed, _SPLIT_CODES[dataset.split],
                        dataset.k, len(dataset.records))
    for r in dataset.records:
        encoded = r.config_id.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<BI", r.label, len(r.y))
        blob += np.ascontiguousarray(r.y, dtype="<f8").tobytes()
        if r.image is None:
            blob += struct.pack("<B", 0)
        else:
            blob += struct.pack("<BI", 1, len(r.image))
            blob += np.ascontiguousarray(r.image, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_dataset(path, expected_hash: bytes | None = None,
                 warn=None) -> MeasurementDataset:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"unexpected EOF in dataset file {path}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MSDT_MAGIC:
        raise DataError(f"bad magic in dataset file {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != MSDT_VERSION:
        raise DataError(f"unsupported dataset version {version} in {path}")
    file_hash = bytes(take(32))
    seed, split_code, k, count = struct.unpack("<QBBI", take(14))
    if expected_hash is not None and file_hash != expected_hash:
        message = f"dataset {path} was built against a different ensemble"
        if warn is not None:
            warn(message)
    records = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        cid = bytes(take(id_len)).decode("utf-8")
        label, y_len = struct.unpack("<BI", take(5))
        y = np.frombuffer(take(8 * y_len), dtype="<f8").copy()
        (has_image,) = struct.unpack("<B", take(1))
        image = None
        if has_image:
            (img_len,) = struct.unpack("<I", take(4))
            image = np.frombuffer(take(8 * img_len), dtype="<f8").copy()
        records.append(MeasurementRecord(y=y, image=image, label=label, config_id=cid))
    if pos != len(view):
        raise DataError(f"trailing bytes in dataset file {path}")
    return MeasurementDataset(records=records, split=_SPLIT_NAMES[split_code],
                              ensemble_seed=seed, ensemble_hash=file_hash, k=k)
