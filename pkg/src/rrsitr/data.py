"""Paired-embedding datasets: synthetic generation, text-shuffle noise injection,
RRSE binary (de)serialization, and epoch batching."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError

RRSE_MAGIC = b"RRSE"
RRSE_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """Aligned image/text embeddings with per-pair correspondence labels.

    All embedding rows are unit-norm float64 (values quantized to the float32
    grid so file round-trips are bit-exact). y[i] = 1 means pair i is a true
    correspondence; 0 means its text was shuffled in by noise injection.
    """

    image_global: np.ndarray   # (n, dim)
    image_local: np.ndarray    # (n, d1, dim)
    text_global: np.ndarray    # (n, dim)
    text_local: np.ndarray     # (n, d2, dim)
    y: np.ndarray              # (n,) uint8
    class_id: Optional[np.ndarray] = None  # (n,) uint32, synthetic only

    def __post_init__(self):
        n, dim = self.image_global.shape
        if dim < 2:
            raise ConfigError(f"dim must be >= 2, got {dim}")
        if self.image_local.ndim != 3 or self.image_local.shape[0] != n:
            raise ConfigError("image_local must be (n, d1, dim)")
        if self.text_local.ndim != 3 or self.text_local.shape[0] != n:
            raise ConfigError("text_local must be (n, d2, dim)")
        if self.d1 < 1 or self.d2 < 1:
            raise ConfigError("d1 and d2 must be >= 1")
        if self.text_global.shape != (n, dim):
            raise ConfigError("text_global shape mismatch")
        if self.image_local.shape[2] != dim or self.text_local.shape[2] != dim:
            raise ConfigError("local feature dim mismatch")
        if self.y.shape != (n,):
            raise ConfigError("y must be (n,)")
        for name in ("image_global", "image_local", "text_global", "text_local"):
            if not np.isfinite(getattr(self, name)).all():
                raise ConfigError(f"{name} contains non-finite values")

    @property
    def n_pairs(self) -> int:
        return self.image_global.shape[0]

    @property
    def dim(self) -> int:
        return self.image_global.shape[1]

    @property
    def d1(self) -> int:
        return self.image_local.shape[1]

    @property
    def d2(self) -> int:
        return self.text_local.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        """New dataset holding the selected rows (copies)."""
        return Dataset(
            image_global=self.image_global[idx].copy(),
            image_local=self.image_local[idx].copy(),
            text_global=self.text_global[idx].copy(),
            text_local=self.text_local[idx].copy(),
            y=self.y[idx].copy(),
            class_id=None if self.class_id is None else self.class_id[idx].copy(),
        )


@dataclass(frozen=True)
class PairBatch:
    """Rows of a dataset selected for one training step."""

    indices: np.ndarray        # (b,) dataset row ids
    image_global: np.ndarray   # (b, dim)
    image_local: np.ndarray    # (b, d1, dim)
    text_global: np.ndarray    # (b, dim)
    text_local: np.ndarray     # (b, d2, dim)
    y: np.ndarray              # (b,)

    def __post_init__(self):
        if len(self.indices) < 2:
            raise ConfigError("batch size must be >= 2")

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise-injection recipe: fraction of pairs to shuffle and the RNG seed."""

    rho: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _f32_grid(x: np.ndarray) -> np.ndarray:
    # quantize to float32 so write->read round-trips bit-exactly
    return x.astype(np.float32).astype(np.float64)


# Fixed structural knobs of the synthetic family. The latent span gives a
# trainable projection real denoising headroom; the modality-gap rotation on
# the text side is the shared misalignment the heads must learn to undo.
LATENT_RANK_FRACTION = 0.5
MODALITY_GAP_RADIANS = np.radians(30.0)
COPY_NOISE_FRACTION = 0.6


def _plane_rotation(dim: int, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix rotating by theta in dim//2 random disjoint planes."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    g = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for k in range(0, dim - 1, 2):
        g[k:k + 2, k:k + 2] = [[c, -s], [s, c]]
    return q @ g @ q.T


def generate_synthetic(n_pairs: int, n_classes: int, dim: int, d1: int, d2: int,
                       intra_class_spread: float, seed: int) -> Dataset:
    """Generate unit-norm paired embeddings with latent class/pair structure.

    Hierarchy: each pair draws a class center, then its own latent core inside
    the class (offset scale = intra_class_spread); image and text embeddings
    are independent noisy copies of that core. Local features are copies of
    per-class per-part sub-centers shifted by the same pair offset, so a
    caption's parts carry its pair identity. All labels start at y=1.

    Centers, pair cores, and sub-centers live on a random half-dimensional
    latent span (copy noise is isotropic over the full space) and the text
    side is rotated by a fixed modality gap, so trained heads can beat the
    raw features by denoising toward the span and undoing the gap.
    """
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    if d1 < 1 or d2 < 1:
        raise ConfigError("d1 and d2 must be >= 1")
    if intra_class_spread <= 0:
        raise ConfigError(f"intra_class_spread must be > 0, got {intra_class_spread}")

    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)  # keep offsets ~spread regardless of dim

    rank = max(2, int(dim * LATENT_RANK_FRACTION))
    basis, _ = np.linalg.qr(rng.normal(size=(dim, rank)))  # latent span, (dim, rank)

    def span_points(*shape_head):
        return rng.normal(size=shape_head + (rank,)) @ basis.T

    centers = _unit_rows(span_points(n_classes))
    # per-part sub-centers sit partway between their class center and span noise
    img_sub = _unit_rows(centers[:, None, :] + 0.5 * scale * span_points(n_classes, d1))
    txt_sub = _unit_rows(centers[:, None, :] + 0.5 * scale * span_points(n_classes, d2))
    gap = _plane_rotation(dim, MODALITY_GAP_RADIANS, rng)

    cls = rng.integers(0, n_classes, size=n_pairs)
    pair_offset = intra_class_spread * scale * span_points(n_pairs)
    core = centers[cls] + pair_offset

    s = COPY_NOISE_FRACTION * intra_class_spread * scale

    def noisy(base):
        return _unit_rows(base + s * rng.normal(size=base.shape))

    ds = Dataset(
        image_global=_f32_grid(noisy(core)),
        image_local=_f32_grid(noisy(img_sub[cls] + pair_offset[:, None, :])),
        text_global=_f32_grid(noisy(core @ gap.T)),
        text_local=_f32_grid(noisy((txt_sub[cls] + pair_offset[:, None, :]) @ gap.T)),
        y=np.ones(n_pairs, dtype=np.uint8),
        class_id=cls.astype(np.uint32),
    )
    return ds


def split_dataset(dataset: Dataset, n_val: int, n_test: int, seed: int
                  ) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle and carve one generated dataset into train/val/test pieces.

    Val and test must be held out from the same generated world as the train
    split (a fresh generator seed would produce different latent structure).
    """
    n = dataset.n_pairs
    if n_val < 0 or n_test < 0 or n_val + n_test >= n:
        raise ConfigError(f"cannot carve val={n_val} + test={n_test} out of {n} pairs")
    order = np.random.default_rng(seed).permutation(n)
    return (dataset.subset(order[n_val + n_test:]),
            dataset.subset(order[:n_val]),
            dataset.subset(order[n_val:n_val + n_test]))


def _derangement(rng: np.random.Generator, k: int) -> np.ndarray:
    """Random permutation of range(k) with no fixed points (identity if k == 1)."""
    if k <= 1:
        return np.arange(k)
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


def inject_noise(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    """Shuffle the texts of a random round(rho*n) subset of pairs.

    Texts (global + local together) are permuted by a derangement within the
    selected subset; affected rows get y=0. The input dataset is untouched.
    Refuses datasets that already contain y=0 rows.
    """
    if np.any(dataset.y == 0):
        raise DataError("dataset already contains noisy pairs; refusing to inject twice")
    n = dataset.n_pairs
    k = int(round(spec.rho * n))
    rng = np.random.default_rng(spec.seed)

    text_global = dataset.text_global.copy()
    text_local = dataset.text_local.copy()
    y = np.ones(n, dtype=np.uint8)

    if k > 0:
        subset = np.sort(rng.choice(n, size=k, replace=False))
        perm = _derangement(rng, k)
        text_global[subset] = dataset.text_global[subset[perm]]
        text_local[subset] = dataset.text_local[subset[perm]]
        y[subset] = 0

    return Dataset(
        image_global=dataset.image_global.copy(),
        image_local=dataset.image_local.copy(),
        text_global=text_global,
        text_local=text_local,
        y=y,
        class_id=None if dataset.class_id is None else dataset.class_id.copy(),
    )


def write_dataset(dataset: Dataset, path: str) -> None:
    """Write the RRSE binary format (little-endian, float32 payload)."""
    n, dim, d1, d2 = dataset.n_pairs, dataset.dim, dataset.d1, dataset.d2
    with open(path, "wb") as f:
        f.write(RRSE_MAGIC)
        f.write(struct.pack("<5I", RRSE_VERSION, n, dim, d1, d2))
        for block in (dataset.image_global, dataset.image_local,
                      dataset.text_global, dataset.text_local):
            f.write(np.ascontiguousarray(block, dtype=np.float32).tobytes())
        f.write(dataset.y.astype(np.uint8).tobytes())
        if dataset.class_id is not None:
            f.write(struct.pack("<B", 1))
            f.write(dataset.class_id.astype("<u4").tobytes())
        else:
            f.write(struct.pack("<B", 0))


def _read_exact(f, nbytes: int, section: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(
            f"truncated file: expected {nbytes} bytes for section '{section}' "
            f"at byte offset {f.tell() - len(buf)}, got {len(buf)}")
    return buf


def read_dataset(path: str) -> Dataset:
    """Read an RRSE file; embeddings come back as float64 (exact float32 upcast)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != RRSE_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {RRSE_MAGIC!r}")
        version, n, dim, d1, d2 = struct.unpack("<5I", _read_exact(f, 20, "header"))
        if version != RRSE_VERSION:
            raise FormatError(f"unsupported version {version} at byte offset 4")
        if n < 1 or dim < 2 or d1 < 1 or d2 < 1:
            raise FormatError(
                f"invalid header at byte offset 8: n={n}, dim={dim}, d1={d1}, d2={d2} "
                "(need n>=1, dim>=2, d1>=1, d2>=1)")

        def read_f32(shape, section):
            count = int(np.prod(shape))
            buf = _read_exact(f, 4 * count, section)
            return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

        image_global = read_f32((n, dim), "image_global")
        image_local = read_f32((n, d1, dim), "image_local")
        text_global = read_f32((n, dim), "text_global")
        text_local = read_f32((n, d2, dim), "text_local")
        y = np.frombuffer(_read_exact(f, n, "y"), dtype=np.uint8).copy()
        (flag,) = struct.unpack("<B", _read_exact(f, 1, "class_id flag"))
        class_id = None
        if flag == 1:
            class_id = np.frombuffer(_read_exact(f, 4 * n, "class_id"), dtype="<u4").copy()
        elif flag != 0:
            raise FormatError(f"bad class_id presence flag {flag} at byte offset {f.tell() - 1}")
    return Dataset(image_global, image_local, text_global, text_local, y, class_id)


def write_manifest(path: str, data_path: str, rho: float, seed: int, extra: dict | None = None) -> None:
    """JSON manifest naming a dataset file and its noise provenance."""
    doc = {"file": data_path, "noise": {"rho": rho, "seed": seed}}
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_dataset_arg(path: str) -> Dataset:
    """Load a dataset from an .rrse path or a JSON manifest naming one."""
    if path.endswith(".json"):
        with open(path) as f:
            doc = json.load(f)
        if "file" not in doc:
            raise FormatError(f"manifest {path} has no 'file' entry")
        return read_dataset(doc["file"])
    return read_dataset(path)


def batch_iter(dataset: Dataset, batch_size: int, epoch_seed: int) -> Iterator[PairBatch]:
    """One shuffled pass over the dataset; a final batch shorter than 2 is dropped."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    n = dataset.n_pairs
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        yield PairBatch(
            indices=idx,
            image_global=dataset.image_global[idx],
            image_local=dataset.image_local[idx],
            text_global=dataset.text_global[idx],
            text_local=dataset.text_local[idx],
            y=dataset.y[idx],
        )
