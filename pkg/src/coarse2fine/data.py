"""Synthetic datasets (patch images and hierarchical Gaussian blobs),
light augmentation, and the bit-exact CFDS1 dataset file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"CFDS1\x00"


class DatasetFormatError(ValueError):
    """Malformed dataset file; message names the byte offset."""


class PlacementError(RuntimeError):
    """Patches could not be placed without overlap."""


@dataclass
class Dataset:
    examples: np.ndarray            # n x dim, float32 or float64
    coarse_labels: np.ndarray       # n, int in [0, C)
    C: int
    fine_labels: Optional[np.ndarray] = None  # n, int in [0, F)
    F: int = 0
    # set by the patch generator; not serialized (the CFDS1 format is
    # image-agnostic), so pass image dims explicitly after a load
    image_shape: Optional[tuple[int, int]] = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.examples.shape[0]

    @property
    def dim(self) -> int:
        return self.examples.shape[1]

    def validate(self) -> None:
        if self.examples.ndim != 2:
            raise ValueError("examples must be 2-D")
        if self.coarse_labels.shape != (self.n,):
            raise ValueError("coarse_labels length mismatch")
        if np.any(self.coarse_labels < 0) or np.any(self.coarse_labels >= self.C):
            raise ValueError("coarse label out of range")
        if self.fine_labels is not None:
            if self.fine_labels.shape != (self.n,):
                raise ValueError("fine_labels length mismatch")
            if np.any(self.fine_labels < 0) or np.any(self.fine_labels >= self.F):
                raise ValueError("fine label out of range")
            # a fine class never spans two coarse classes
            seen: dict[int, int] = {}
            for f, c in zip(self.fine_labels.tolist(), self.coarse_labels.tolist()):
                if f in seen and seen[f] != c:
                    raise ValueError(
                        f"fine class {f} spans coarse classes {seen[f]} and {c}")
                seen[f] = c


def gen_patch_dataset(n: int, n_big: int, n_small: int, img_h: int = 32,
                      img_w: int = 32, big_size: int = 12, small_size: int = 4,
                      seed: int = 0) -> Dataset:
    """Images with one big and one small solid-color patch each.

    A pool of n_big big colors and n_small small colors is drawn first;
    each image places one sampled patch of each kind at non-overlapping
    positions on a mid-gray background. The big-patch index is the coarse
    label, the small-patch index the fine label. Small patch s is nested
    under big patch s mod n_big so that the fine classes refine the coarse
    classes (the label-hierarchy invariant every consumer relies on):
    each image samples its small patch uniformly and takes the owning big
    patch.
    """
    if n_big < 1 or n_small < 1:
        raise ValueError("need at least one big and one small patch")
    if big_size > min(img_h, img_w) or small_size > min(img_h, img_w):
        raise ValueError("patch does not fit inside the image")
    rng = np.random.default_rng(seed)
    big_colors = rng.uniform(0.0, 1.0, size=(n_big, 3))
    small_colors = rng.uniform(0.0, 1.0, size=(n_small, 3))

    examples = np.empty((n, img_h * img_w * 3), dtype=np.float64)
    coarse = np.empty(n, dtype=np.int64)
    fine = np.empty(n, dtype=np.int64)
    for i in range(n):
        img = np.full((img_h, img_w, 3), 0.5, dtype=np.float64)
        si = int(rng.integers(0, n_small))
        bi = si % n_big
        for attempt in range(1000):
            by = int(rng.integers(0, img_h - big_size + 1))
            bx = int(rng.integers(0, img_w - big_size + 1))
            sy = int(rng.integers(0, img_h - small_size + 1))
            sx = int(rng.integers(0, img_w - small_size + 1))
            overlap = (by < sy + small_size and sy < by + big_size and
                       bx < sx + small_size and sx < bx + big_size)
            if not overlap:
                break
        else:
            raise PlacementError("could not place patches without overlap")
        img[by:by + big_size, bx:bx + big_size, :] = big_colors[bi]
        img[sy:sy + small_size, sx:sx + small_size, :] = small_colors[si]
        examples[i] = img.ravel()
        coarse[i] = bi
        fine[i] = si
    return Dataset(examples=examples, coarse_labels=coarse, C=n_big,
                   fine_labels=fine, F=n_small, image_shape=(img_h, img_w))


def gen_blob_dataset(C: int, fine_per_coarse: int, z: int, dim: int,
                     coarse_spread: float = 10.0, fine_spread: float = 1.0,
                     noise: float = 0.1, seed: int = 0) -> Dataset:
    """Hierarchical Gaussian blobs with exactly z examples per fine class.

    Coarse centers ~ N(0, coarse_spread^2 I); fine centers scatter around
    their coarse center with fine_spread; examples scatter around their
    fine center with noise. Fine classes are a partition refining the
    coarse classes, so every generator invariant holds by construction.
    """
    if min(C, fine_per_coarse, z, dim) < 1:
        raise ValueError("all counts must be >= 1")
    if coarse_spread <= 0 or fine_spread <= 0:
        raise ValueError("spreads must be positive")
    rng = np.random.default_rng(seed)
    n = C * fine_per_coarse * z
    F = C * fine_per_coarse
    examples = np.empty((n, dim), dtype=np.float64)
    coarse = np.empty(n, dtype=np.int64)
    fine = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(C):
        c_center = rng.normal(0.0, coarse_spread, size=dim)
        for s in range(fine_per_coarse):
            f_center = c_center + rng.normal(0.0, fine_spread, size=dim)
            for _ in range(z):
                examples[i] = f_center + (rng.normal(0.0, noise, size=dim)
                                          if noise > 0 else 0.0)
                coarse[i] = c
                fine[i] = c * fine_per_coarse + s
                i += 1
    return Dataset(examples=examples, coarse_labels=coarse, C=C,
                   fine_labels=fine, F=F)


def augment(example: np.ndarray, img_h: int, img_w: int, pad: int,
            rng: np.random.Generator) -> np.ndarray:
    """Random horizontal mirror, then random crop from the zero-padded image."""
    img = np.asarray(example).reshape(img_h, img_w, 3)
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    if pad > 0:
        padded = np.zeros((img_h + 2 * pad, img_w + 2 * pad, 3), dtype=img.dtype)
        padded[pad:pad + img_h, pad:pad + img_w, :] = img
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        img = padded[oy:oy + img_h, ox:ox + img_w, :]
    return img.reshape(-1).copy()


def save_dataset(d: Dataset, path: str) -> None:
    d.validate()
    dtype_code = 0 if d.examples.dtype == np.float32 else 1
    values = d.examples.astype("<f4" if dtype_code == 0 else "<f8", copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", d.n, d.dim, d.C, d.F))
        fh.write(struct.pack("<B", dtype_code))
        fh.write(values.tobytes())
        fh.write(d.coarse_labels.astype("<u4").tobytes())
        if d.F > 0:
            fh.write(d.fine_labels.astype("<u4").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != MAGIC:
        raise DatasetFormatError(f"bad magic at offset 0: {raw[:6]!r}")
    off = 6
    if len(raw) < off + 17:
        raise DatasetFormatError(f"truncated header at offset {len(raw)}")
    n, dim, C, F = struct.unpack_from("<IIII", raw, off)
    off += 16
    (dtype_code,) = struct.unpack_from("<B", raw, off)
    off += 1
    if dtype_code not in (0, 1):
        raise DatasetFormatError(f"unknown dtype code {dtype_code} at offset {off - 1}")
    itemsize = 4 if dtype_code == 0 else 8
    need = n * dim * itemsize
    if len(raw) < off + need:
        raise DatasetFormatError(f"truncated example block at offset {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4" if dtype_code == 0 else "<f8",
                           count=n * dim, offset=off).reshape(n, dim).copy()
    off += need
    if len(raw) < off + 4 * n:
        raise DatasetFormatError(f"truncated coarse labels at offset {len(raw)}")
    coarse = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    bad = np.nonzero(coarse >= C)[0]
    if bad.size:
        raise DatasetFormatError(
            f"coarse label out of range at offset {off + 4 * int(bad[0])}")
    off += 4 * n
    fine = None
    if F > 0:
        if len(raw) < off + 4 * n:
            raise DatasetFormatError(f"truncated fine labels at offset {len(raw)}")
        fine = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
        bad = np.nonzero(fine >= F)[0]
        if bad.size:
            raise DatasetFormatError(
                f"fine label out of range at offset {off + 4 * int(bad[0])}")
        off += 4 * n
    d = Dataset(examples=values, coarse_labels=coarse, C=C,
                fine_labels=fine, F=F)
    d.validate()
    return d


def load_dataset_csv(path: str) -> Dataset:
    """CSV with columns coarse,fine,x0..x{dim-1}; empty fine column = no fine labels."""
    import csv

    coarse: list[int] = []
    fine: list[int] = []
    rows: list[list[float]] = []
    has_fine = True
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[0] != "coarse" or header[1] != "fine":
            raise DatasetFormatError("CSV header must start with coarse,fine,x0")
        for row in reader:
            if not row:
                continue
            coarse.append(int(row[0]))
            if row[1].strip() == "":
                has_fine = False
                fine.append(0)
            else:
                fine.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    examples = np.asarray(rows, dtype=np.float64)
    coarse_arr = np.asarray(coarse, dtype=np.int64)
    fine_arr = np.asarray(fine, dtype=np.int64) if has_fine else None
    d = Dataset(examples=examples, coarse_labels=coarse_arr,
                C=int(coarse_arr.max()) + 1,
                fine_labels=fine_arr,
                F=int(fine_arr.max()) + 1 if fine_arr is not None else 0)
    d.validate()
    return d
