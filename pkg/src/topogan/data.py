"""Labeled image datasets: SIMP sweeps, augmentation, post-processing, file IO.

Dataset files use the TOPD binary layout (little-endian): magic "TOPD",
u32 version=1, u32 width, u32 height, u32 count, u8 condition kind
(0=continuous, 1=class), u32 class cardinality (0 if continuous); then per
record f32 condition, f32 volfrac, f32 penal, f32 rmin, f32 compliance,
u8 converged flag, and width*height f32 pixels row-major. Unknown meta
fields are written as 0; no field may be NaN.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.ndimage import convolve as nd_convolve

from .exceptions import (
    ConsistencyError,
    DimensionError,
    FormatError,
    ParameterError,
)
from .fem import BoundaryConditions, MeshSpec, SimpParams, run_simp

log = logging.getLogger(__name__)

TOPD_MAGIC = b"TOPD"
TOPD_VERSION = 1
KIND_CONTINUOUS = "continuous"
KIND_CLASS = "class"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GAUSS_KERNEL_SIZE = 5
GAUSS_SIGMA = 1.0


@dataclass(frozen=True)
class Continuous:
    """Continuous condition, e.g. a target volume fraction in [0, 1]."""

    value: float

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ParameterError(f"continuous condition must lie in [0,1], got {self.value}")


@dataclass(frozen=True)
class ClassLabel:
    """Discrete condition: class `index` out of `cardinality` classes."""

    index: int
    cardinality: int

    def __post_init__(self):
        if not (0 <= self.index < self.cardinality):
            raise ParameterError(
                f"class index {self.index} outside cardinality {self.cardinality}"
            )


@dataclass
class SampleMeta:
    volfrac: float = 0.0
    penal: float = 0.0
    rmin: float = 0.0
    compliance: float = 0.0
    converged: bool = True


@dataclass
class ConditionedSample:
    """One training image with its condition and optional provenance meta."""

    image: np.ndarray
    condition: Continuous | ClassLabel
    meta: SampleMeta = field(default_factory=SampleMeta)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise DimensionError(f"sample image must be 2D, got shape {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ParameterError("sample pixels must lie in [0, 1]")


@dataclass(frozen=True)
class SweepGrid:
    """Cartesian SIMP parameter grid; bounds follow the training-data recipe."""

    volfracs: tuple[float, ...]
    penals: tuple[float, ...]
    rmins: tuple[float, ...]
    mesh: MeshSpec

    def __post_init__(self):
        if not (self.volfracs and self.penals and self.rmins):
            raise ParameterError("sweep grid must be nonempty on every axis")
        for v in self.volfracs:
            if not (0.3 <= v <= 0.8):
                raise ParameterError(f"volfrac {v} outside [0.3, 0.8]")
        for p in self.penals:
            if not (2.0 <= p <= 4.0):
                raise ParameterError(f"penal {p} outside [2, 4]")
        for r in self.rmins:
            if not (1.5 <= r <= 3.0):
                raise ParameterError(f"rmin {r} outside [1.5, 3]")

    def __len__(self) -> int:
        return len(self.volfracs) * len(self.penals) * len(self.rmins)


class Dataset:
    """Uniform-size image collection with one condition kind across samples.

    Images and meta are stored as float32 arrays so that file round-trips
    are bit-exact.
    """

    def __init__(self, images, conditions, kind, cardinality=0,
                 volfrac=None, penal=None, rmin=None, compliance=None, converged=None):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        if self.images.ndim != 3:
            raise DimensionError(f"images must be (n, H, W), got shape {self.images.shape}")
        n = self.images.shape[0]
        self.conditions = np.ascontiguousarray(conditions, dtype=np.float32)
        if self.conditions.shape != (n,):
            raise DimensionError("conditions must have one entry per image")
        if kind not in (KIND_CONTINUOUS, KIND_CLASS):
            raise ParameterError(f"unknown condition kind '{kind}'")
        self.kind = kind
        self.cardinality = int(cardinality)
        if kind == KIND_CLASS:
            if self.cardinality < 1:
                raise ParameterError("class datasets need cardinality >= 1")
            if n and (self.conditions.min() < 0 or self.conditions.max() >= self.cardinality):
                raise ParameterError("class index outside cardinality")
        elif n and (self.conditions.min() < 0.0 or self.conditions.max() > 1.0):
            raise ParameterError("continuous conditions must lie in [0, 1]")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ParameterError("pixels must lie in [0, 1]")

        def meta_arr(a):
            if a is None:
                return np.zeros(n, dtype=np.float32)
            a = np.ascontiguousarray(a, dtype=np.float32)
            if a.shape != (n,):
                raise DimensionError("meta arrays must have one entry per image")
            return a

        self.volfrac = meta_arr(volfrac)
        self.penal = meta_arr(penal)
        self.rmin = meta_arr(rmin)
        self.compliance = meta_arr(compliance)
        if converged is None:
            converged = np.ones(n, dtype=np.uint8)
        self.converged = np.ascontiguousarray(converged, dtype=np.uint8)
        if self.converged.shape != (n,):
            raise DimensionError("converged flags must have one entry per image")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def condition_of(self, i: int) -> Continuous | ClassLabel:
        if self.kind == KIND_CLASS:
            return ClassLabel(int(self.conditions[i]), self.cardinality)
        return Continuous(float(self.conditions[i]))

    def sample(self, i: int) -> ConditionedSample:
        return ConditionedSample(
            image=self.images[i],
            condition=self.condition_of(i),
            meta=SampleMeta(
                volfrac=float(self.volfrac[i]),
                penal=float(self.penal[i]),
                rmin=float(self.rmin[i]),
                compliance=float(self.compliance[i]),
                converged=bool(self.converged[i]),
            ),
        )

    @staticmethod
    def from_samples(samples: list[ConditionedSample]) -> "Dataset":
        if not samples:
            raise ParameterError("cannot build a dataset from zero samples")
        first = samples[0].condition
        kind = KIND_CLASS if isinstance(first, ClassLabel) else KIND_CONTINUOUS
        cardinality = first.cardinality if isinstance(first, ClassLabel) else 0
        shape = samples[0].image.shape
        conds = []
        for s in samples:
            if s.image.shape != shape:
                raise DimensionError("all samples must share image dimensions")
            same_kind = isinstance(s.condition, ClassLabel) == (kind == KIND_CLASS)
            if not same_kind:
                raise ParameterError("all samples must share the condition kind")
            conds.append(
                s.condition.index if kind == KIND_CLASS else s.condition.value
            )
        return Dataset(
            images=np.stack([s.image for s in samples]),
            conditions=np.asarray(conds),
            kind=kind,
            cardinality=cardinality,
            volfrac=[s.meta.volfrac for s in samples],
            penal=[s.meta.penal for s in samples],
            rmin=[s.meta.rmin for s in samples],
            compliance=[s.meta.compliance for s in samples],
            converged=[1 if s.meta.converged else 0 for s in samples],
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.kind == other.kind
            and self.cardinality == other.cardinality
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.conditions, other.conditions)
            and np.array_equal(self.volfrac, other.volfrac)
            and np.array_equal(self.penal, other.penal)
            and np.array_equal(self.rmin, other.rmin)
            and np.array_equal(self.compliance, other.compliance)
            and np.array_equal(self.converged, other.converged)
        )


def sweep_generate(grid: SweepGrid, bc: BoundaryConditions | None = None,
                   solver: str = "auto") -> Dataset:
    """Run one SIMP optimization per grid point (volfrac-major, then penal, then rmin).

    Non-converged runs are kept (flagged in meta and logged), so the sample
    count always equals the grid size.
    """
    samples = []
    for v, p, r in product(grid.volfracs, grid.penals, grid.rmins):
        params = SimpParams(volfrac=v, penal=p, rmin=r)
        result = run_simp(grid.mesh, params, bc=bc, solver=solver)
        if not result.converged:
            log.warning(
                "SIMP run volfrac=%s penal=%s rmin=%s did not converge in %d iterations",
                v, p, r, result.iterations,
            )
        samples.append(ConditionedSample(
            image=np.clip(result.density.values, 0.0, 1.0),
            condition=Continuous(v),
            meta=SampleMeta(
                volfrac=v, penal=p, rmin=r,
                compliance=result.compliance_history[-1],
                converged=result.converged,
            ),
        ))
    return Dataset.from_samples(samples)


def augment(sample: ConditionedSample, noise_count: int, noise_amplitude: float,
            seed: int) -> ConditionedSample:
    """Perturb `noise_count` uniformly chosen pixels by U(-amplitude, +amplitude)."""
    if noise_count < 0:
        raise ParameterError(f"noise_count must be >= 0, got {noise_count}")
    if not (0.0 <= noise_amplitude <= 1.0):
        raise ParameterError(f"noise amplitude must lie in [0,1], got {noise_amplitude}")
    rng = np.random.default_rng(seed)
    image = sample.image.astype(np.float64).copy()
    count = min(noise_count, image.size)
    if count:
        flat_idx = rng.choice(image.size, size=count, replace=False)
        noise = rng.uniform(-noise_amplitude, noise_amplitude, size=count)
        np.add.at(image.ravel(), flat_idx, noise)
        np.clip(image, 0.0, 1.0, out=image)
    return ConditionedSample(image=image, condition=sample.condition, meta=sample.meta)


def augment_dataset(ds: Dataset, noise_fraction: float = 0.01,
                    noise_amplitude: float = 0.5, seed: int = 0) -> Dataset:
    """Double the dataset: each sample followed (at the end) by one noisy copy."""
    noise_count = max(1, int(round(noise_fraction * ds.height * ds.width)))
    noisy = [
        augment(ds.sample(i), noise_count, noise_amplitude, seed=seed + i)
        for i in range(len(ds))
    ]
    return Dataset.from_samples([ds.sample(i) for i in range(len(ds))] + noisy)


def gaussian_kernel(size: int = GAUSS_KERNEL_SIZE, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    """Truncated Gaussian, renormalized to sum 1."""
    r = size // 2
    i, j = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    k = np.exp(-(i**2 + j**2) / (2.0 * sigma**2))
    return k / k.sum()


def postprocess(image: np.ndarray) -> np.ndarray:
    """Threshold at 0.5 (>= 0.5 becomes 1), then 5x5 Gaussian blur, reflect padding."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"expected a 2D image, got shape {image.shape}")
    if image.shape[0] < GAUSS_KERNEL_SIZE or image.shape[1] < GAUSS_KERNEL_SIZE:
        raise DimensionError(
            f"image {image.shape} smaller than the {GAUSS_KERNEL_SIZE}x{GAUSS_KERNEL_SIZE} kernel"
        )
    binary = np.where(image >= 0.5, 1.0, 0.0)
    blurred = nd_convolve(binary, gaussian_kernel(), mode="reflect")
    return np.clip(blurred, 0.0, 1.0)


def threshold(image: np.ndarray) -> np.ndarray:
    """Stage 1 of postprocess alone."""
    return np.where(np.asarray(image, dtype=np.float64) >= 0.5, 1.0, 0.0)


# ---------------------------------------------------------------------------
# TOPD binary format

_HEADER = struct.Struct("<4sIIIIBI")
_RECORD_META = struct.Struct("<fffffB")


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            TOPD_MAGIC, TOPD_VERSION, ds.width, ds.height, len(ds),
            0 if ds.kind == KIND_CONTINUOUS else 1, ds.cardinality,
        ))
        for i in range(len(ds)):
            fh.write(_RECORD_META.pack(
                ds.conditions[i], ds.volfrac[i], ds.penal[i], ds.rmin[i],
                ds.compliance[i], int(ds.converged[i]),
            ))
            fh.write(ds.images[i].astype("<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    magic, version, width, height, count, kind_byte, cardinality = _HEADER.unpack_from(blob, 0)
    if magic != TOPD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != TOPD_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if kind_byte not in (0, 1):
        raise FormatError(f"unknown condition kind byte {kind_byte}", offset=20)
    record_size = _RECORD_META.size + 4 * width * height
    expected = _HEADER.size + count * record_size
    if len(blob) != expected:
        raise FormatError(
            f"file length {len(blob)} does not match declared {count} records",
            offset=min(len(blob), expected),
        )
    conditions = np.empty(count, dtype=np.float32)
    volfrac = np.empty(count, dtype=np.float32)
    penal = np.empty(count, dtype=np.float32)
    rmin = np.empty(count, dtype=np.float32)
    compliance = np.empty(count, dtype=np.float32)
    converged = np.empty(count, dtype=np.uint8)
    images = np.empty((count, height, width), dtype=np.float32)
    offset = _HEADER.size
    for i in range(count):
        vals = _RECORD_META.unpack_from(blob, offset)
        conditions[i], volfrac[i], penal[i], rmin[i], compliance[i] = vals[:5]
        converged[i] = vals[5]
        offset += _RECORD_META.size
        pixels = np.frombuffer(blob, dtype="<f4", count=width * height, offset=offset)
        images[i] = pixels.reshape(height, width)
        offset += 4 * width * height
    if not (np.isfinite(images).all() and np.isfinite(conditions).all()):
        raise FormatError("NaN or infinity in record data", offset=_HEADER.size)
    return Dataset(
        images=images, conditions=conditions,
        kind=KIND_CONTINUOUS if kind_byte == 0 else KIND_CLASS,
        cardinality=cardinality, volfrac=volfrac, penal=penal, rmin=rmin,
        compliance=compliance, converged=converged,
    )


# ---------------------------------------------------------------------------
# MNIST-style IDX ingestion

def _read_idx_images(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError("truncated IDX image header", offset=len(blob))
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", offset=0)
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise FormatError(f"IDX image payload length {len(blob)} != {expected}",
                          offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return data.reshape(count, rows, cols)


def _read_idx_labels(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError("truncated IDX label header", offset=len(blob))
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}", offset=0)
    if len(blob) != 8 + count:
        raise FormatError(f"IDX label payload length {len(blob)} != {8 + count}",
                          offset=min(len(blob), 8 + count))
    return np.frombuffer(blob, dtype=np.uint8, offset=8)


def load_mnist_idx(images_path, labels_path, downscale: bool = False,
                   cardinality: int = 10) -> Dataset:
    """Load an IDX image/label pair as a class-conditioned dataset.

    Pixels are scaled to [0,1]. `downscale` halves each spatial dimension by
    2x2 average pooling (dimensions must be even).
    """
    raw = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"image count {raw.shape[0]} != label count {labels.shape[0]}"
        )
    images = raw.astype(np.float32) / 255.0
    if downscale:
        n, h, w = images.shape
        if h % 2 or w % 2:
            raise DimensionError(f"cannot 2x2-pool odd dimensions {h}x{w}")
        images = images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return Dataset(images=images, conditions=labels, kind=KIND_CLASS,
                   cardinality=cardinality)


# ---------------------------------------------------------------------------
# synthetic class dataset (band images with known pixel means)

def class_target_fraction(index: int, class_count: int) -> float:
    """Ground-truth fill fraction of class `index`."""
    return (index + 1) / (class_count + 1)


def synth_classes(class_count: int, per_class: int, size: int, seed: int) -> Dataset:
    """Horizontal-band images: class k covers fraction (k+1)/(class_count+1).

    The band position is jittered per sample and pixels carry light noise
    (band ~ U(0.96, 1), background ~ U(0, 0.04)), keeping every sample's
    pixel mean within 0.02 of its class target.
    """
    if not (2 <= class_count <= 10):
        raise ParameterError(f"class_count must be in 2..10, got {class_count}")
    if per_class < 1 or size < 1:
        raise ParameterError("per_class and size must be positive")
    rng = np.random.default_rng(seed)
    images = np.empty((class_count * per_class, size, size), dtype=np.float32)
    labels = np.empty(class_count * per_class, dtype=np.float32)
    targets = np.empty(class_count * per_class, dtype=np.float32)
    i = 0
    for k in range(class_count):
        t = class_target_fraction(k, class_count)
        band = t * size
        full = int(band)
        frac = band - full
        max_start = size - full - (1 if frac > 0 else 0)
        for _ in range(per_class):
            start = int(rng.integers(0, max_start + 1)) if max_start > 0 else 0
            occupancy = np.zeros(size)
            occupancy[start:start + full] = 1.0
            if frac > 0:
                occupancy[start + full] = frac
            hi = rng.uniform(0.96, 1.0, size=(size, size))
            lo = rng.uniform(0.0, 0.04, size=(size, size))
            o = occupancy[:, None]
            images[i] = o * hi + (1.0 - o) * lo
            labels[i] = k
            targets[i] = t
            i += 1
    return Dataset(images=images, conditions=labels, kind=KIND_CLASS,
                   cardinality=class_count, volfrac=targets)


def shuffle_dataset(ds: Dataset, seed: int) -> Dataset:
    """Seeded permutation of the sample order."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    return Dataset(
        images=ds.images[perm], conditions=ds.conditions[perm], kind=ds.kind,
        cardinality=ds.cardinality, volfrac=ds.volfrac[perm], penal=ds.penal[perm],
        rmin=ds.rmin[perm], compliance=ds.compliance[perm], converged=ds.converged[perm],
    )


# ---------------------------------------------------------------------------
# PGM export

def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255); pixel 1.0 maps to 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"PGM export needs a 2D image, got shape {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def montage(images: np.ndarray, cols: int | None = None,
            separator: float = 128.0 / 255.0) -> np.ndarray:
    """Tile images into a near-square grid with 2-pixel separators."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise DimensionError("montage needs a nonempty (n, H, W) stack")
    n, h, w = images.shape
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    sep = 2
    out = np.full((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep), separator)
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (h + sep):r * (h + sep) + h, c * (w + sep):c * (w + sep) + w] = images[i]
    return out
