"""Datasets, client partitions and image manipulations.

Images are float32 arrays of shape (N, C, H, W) with values in [0, 1].
Every randomized function takes an explicit seed and is a pure function of it.
"""

from __future__ import annotations

import enum
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise InputError(f"images must be (N, C, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise InputError(f"{images.shape[0]} images but labels have shape {labels.shape}")
        if images.shape[0] < 1:
            raise InputError("dataset is empty")
        if self.n_classes < 1 or labels.min() < 0 or labels.max() >= self.n_classes:
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if images.min() < 0.0 or images.max() > 1.0:
            raise InputError("image values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.n_classes)

    def with_images(self, images: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(images, self.labels, self.n_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def concat_datasets(parts) -> LabeledDataset:
    parts = list(parts)
    k = parts[0].n_classes
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        k,
    )


# ---------------------------------------------------------------- IDX files


def _read_idx(path, expected_magic: int, expected_rank: int):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for IDX magic", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    header_end = 4 + 4 * expected_rank
    if len(data) < header_end:
        raise FormatError(f"{path}: truncated IDX header", offset=len(data))
    dims = struct.unpack(f">{expected_rank}I", data[4:header_end])
    count = math.prod(dims)
    if len(data) < header_end + count:
        raise FormatError(f"{path}: truncated payload, expected {count} bytes", offset=len(data))
    if len(data) > header_end + count:
        raise FormatError(f"{path}: {len(data) - header_end - count} trailing bytes", offset=header_end + count)
    payload = np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end)
    return payload.reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (MNIST layout).

    Pixels are scaled by 1/255 and given a single channel. The class count is
    inferred as ``max(label) + 1`` unless ``n_classes`` is given.
    """
    raw_images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise FormatError(
            f"{raw_images.shape[0]} images but {raw_labels.shape[0]} labels", offset=4
        )
    if raw_images.shape[0] == 0:
        raise FormatError(f"{images_path}: no images", offset=4)
    images = (raw_images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    labels = raw_labels.astype(np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return LabeledDataset(images, labels, k)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    """Write uint8 arrays (N, H, W) and (N,) as an IDX file pair."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels_u8.shape[0]))
        f.write(labels_u8.tobytes())


# ---------------------------------------------------------------- synthetic data


def _coarse_patterns(rng, k, cells):
    """``k`` distinct binary patterns, pairwise Hamming distance >= cells / 4."""
    min_dist = max(1, cells // 4)
    patterns: list[np.ndarray] = []
    while len(patterns) < k:
        cand = rng.integers(0, 2, size=cells)
        if all(np.sum(cand != p) >= min_dist for p in patterns):
            patterns.append(cand)
    return np.stack(patterns)


def synth_dataset(seed: int, n_per_class: int, n_classes: int = 10, channels: int = 1,
                  height: int = 32, width: int = 32, *, grid: int = 4, contrast: float = 0.85,
                  flip_prob: float = 0.1, fine_amplitude: float = 0.25, noise: float = 0.15) -> LabeledDataset:
    """Synthetic classes with one coarse and one fine class signature.

    Every class owns a ``grid x grid`` on/off block pattern (per channel)
    scaled to the image, drawn at ``0.5 +- contrast / 2``, and a per-pixel
    +-``fine_amplitude`` sign pattern. A sample is its class's block pattern
    with each block flipped with probability ``flip_prob``, plus the fine
    pattern, plus N(0, ``noise``) pixel noise, clipped to [0, 1].

    The block pattern survives L-inf perturbations below ``contrast / 2``; the
    fine pattern is highly predictive but any perturbation above
    ``fine_amplitude`` can overwrite it. Samples are ordered class by class.
    """
    if min(n_per_class, n_classes, channels, height, width) < 1:
        raise ConfigError("synthetic dataset dimensions must be positive")
    rng = np.random.default_rng(seed)
    grid = min(grid, height, width)
    cells = channels * grid * grid
    coarse = _coarse_patterns(rng, n_classes, cells)
    fine = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=(n_classes, channels, height, width))

    labels = np.repeat(np.arange(n_classes), n_per_class)
    n = labels.size
    flips = rng.random((n, cells)) < flip_prob
    blocks = np.logical_xor(coarse[labels].astype(bool), flips).reshape(n, channels, grid, grid)
    rows = (np.arange(height) * grid) // height
    cols = (np.arange(width) * grid) // width
    on_off = blocks[:, :, rows][:, :, :, cols].astype(np.float32)
    images = (0.5 - contrast / 2) + contrast * on_off
    images += np.float32(fine_amplitude) * fine[labels]
    images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, n_classes)


def synth_split(seed: int, n_per_class: int, n_test_per_class: int, **kwargs):
    """Train and test sets drawn from the same class templates."""
    full = synth_dataset(seed, n_per_class + n_test_per_class, **kwargs)
    k = full.n_classes
    per = n_per_class + n_test_per_class
    train_idx = np.concatenate([np.arange(c * per, c * per + n_per_class) for c in range(k)])
    test_idx = np.concatenate([np.arange(c * per + n_per_class, (c + 1) * per) for c in range(k)])
    return full.subset(train_idx), full.subset(test_idx)


# ---------------------------------------------------------------- manipulations


class ManipulationKind(str, enum.Enum):
    BRIGHTNESS = "brightness"
    DEGRADE = "degrade"
    OCCLUDE = "occlude"


@dataclass(frozen=True)
class ManipulationSpec:
    """One manipulation applied to all of a client's images.

    ``value`` is the brightness ratio, the integer degradation factor, or the
    occluded height fraction depending on ``kind``.
    """

    kind: ManipulationKind
    value: float

    def __post_init__(self):
        kind = ManipulationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ManipulationKind.BRIGHTNESS and not self.value > 0:
            raise ConfigError(f"brightness ratio must be > 0, got {self.value}", key="manip_br")
        if kind is ManipulationKind.DEGRADE and (self.value != int(self.value) or self.value < 2):
            raise ConfigError(f"degrade factor must be an integer >= 2, got {self.value}", key="manip_factor")
        if kind is ManipulationKind.OCCLUDE and not 0.0 < self.value < 1.0:
            raise ConfigError(f"occlusion fraction must lie in (0, 1), got {self.value}", key="manip_fraction")

    def apply(self, images: np.ndarray) -> np.ndarray:
        if self.kind is ManipulationKind.BRIGHTNESS:
            return apply_brightness(images, self.value)
        if self.kind is ManipulationKind.DEGRADE:
            return degrade_pixels(images, int(self.value))
        return occlude_eyes(images, self.value)

    def __str__(self):
        return f"{self.kind.value}({self.value:g})"


def apply_brightness(images: np.ndarray, ratio: float) -> np.ndarray:
    """Element-wise ``min(1, ratio * pixel)``."""
    if not ratio > 0:
        raise ConfigError(f"brightness ratio must be > 0, got {ratio}", key="br")
    images = np.asarray(images, dtype=np.float32)
    return np.minimum(np.float32(1.0), images * np.float32(ratio))


def degrade_pixels(images: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsample by ``factor`` and upsample back to the original size."""
    images = np.asarray(images, dtype=np.float32)
    factor = int(factor)
    h, w = images.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ConfigError(f"image size {h}x{w} is not divisible by degrade factor {factor}", key="manip_factor")
    small = images[..., ::factor, ::factor]
    return np.repeat(np.repeat(small, factor, axis=-2), factor, axis=-1)


def occlude_eyes(images: np.ndarray, fraction: float) -> np.ndarray:
    """Zero rows ``[0, floor(fraction * H))`` in every channel."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"occlusion fraction must lie in (0, 1), got {fraction}", key="manip_fraction")
    out = np.array(images, dtype=np.float32)
    rows = math.floor(fraction * out.shape[-2])
    out[..., :rows, :] = 0.0
    return out


# eye band: rows 0-120 of a 224-pixel-high face image
DEFAULT_OCCLUSION_FRACTION = 120 / 224
DARK_BR = 0.15
BRIGHT_BR = 2.30


# ---------------------------------------------------------------- test data types


class TestDataType(str, enum.Enum):
    CLEAN = "clean"
    BRIGHT_CLEAN = "bright_clean"
    DARK_CLEAN = "dark_clean"
    BRIGHT_DARK_CLEAN = "bright_dark_clean"


TestDataType.__test__ = False  # keep pytest from collecting it


def tdt_blocks(base: LabeledDataset, tdt: TestDataType, br_dark=DARK_BR, br_bright=BRIGHT_BR):
    """The constituent blocks of a TDT test set, in concatenation order."""
    tdt = TestDataType(tdt)
    bright = lambda: base.with_images(apply_brightness(base.images, br_bright))  # noqa: E731
    dark = lambda: base.with_images(apply_brightness(base.images, br_dark))  # noqa: E731
    if tdt is TestDataType.CLEAN:
        return [base]
    if tdt is TestDataType.BRIGHT_CLEAN:
        return [bright(), base]
    if tdt is TestDataType.DARK_CLEAN:
        return [dark(), base]
    return [bright(), dark(), base]


def build_test_set(base: LabeledDataset, tdt: TestDataType, br_dark=DARK_BR, br_bright=BRIGHT_BR) -> LabeledDataset:
    blocks = tdt_blocks(base, tdt, br_dark, br_bright)
    return blocks[0] if len(blocks) == 1 else concat_datasets(blocks)


# ---------------------------------------------------------------- partitions


@dataclass(frozen=True)
class PartitionPlan:
    """Client id -> sorted dataset indices, plus an optional manipulation per client."""

    assignments: dict[int, np.ndarray]
    manipulations: dict[int, ManipulationSpec | None] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        for cid, idx in self.assignments.items():
            if len(idx) == 0:
                raise ConfigError(f"client {cid} has no data")
            s = set(int(i) for i in idx)
            if seen & s:
                raise ConfigError(f"client {cid} shares indices with another client")
            seen |= s
        for cid in self.assignments:
            self.manipulations.setdefault(cid, None)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> dict[int, int]:
        return {cid: len(idx) for cid, idx in self.assignments.items()}

    def with_manipulations(self, manipulations: dict[int, ManipulationSpec | None]) -> "PartitionPlan":
        merged = {cid: None for cid in self.assignments}
        merged.update(manipulations)
        return PartitionPlan(self.assignments, merged)


def _check_clients(n: int, n_clients: int):
    if n_clients < 1:
        raise ConfigError(f"client count must be >= 1, got {n_clients}", key="clients")
    if n_clients > n:
        raise ConfigError(f"{n_clients} clients but only {n} samples", key="clients")


def partition_iid(dataset: LabeledDataset, n_clients: int, seed: int) -> PartitionPlan:
    """Random permutation split into parts whose sizes differ by at most one."""
    _check_clients(len(dataset), n_clients)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    parts = np.array_split(perm, n_clients)
    return PartitionPlan({cid: np.sort(p) for cid, p in enumerate(parts)})


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer vector proportional to ``weights`` summing to ``total``."""
    weights = np.asarray(weights, dtype=np.float64)
    if total <= 0 or weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = weights / weights.sum() * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_noniid(dataset: LabeledDataset, n_clients: int, seed: int,
                     label_concentration: float = 0.5, size_spread: float = 0.5) -> PartitionPlan:
    """Label- and size-skewed partition covering the whole dataset.

    Client sizes follow a log-normal with sigma ``size_spread``; each client's
    label mix is drawn from a Dirichlet centred on the global label frequencies
    with total concentration ``label_concentration * K``. Clients are filled in
    order, each taking its label quota from what remains.
    """
    n = len(dataset)
    _check_clients(n, n_clients)
    if not label_concentration > 0:
        raise ConfigError("label concentration must be > 0", key="label_concentration")
    if not size_spread > 0:
        raise ConfigError("size spread must be > 0", key="size_spread")
    rng = np.random.default_rng(seed)
    k = dataset.n_classes
    sizes = 1 + _largest_remainder(rng.lognormal(0.0, size_spread, size=n_clients), n - n_clients)

    global_hist = dataset.label_histogram()
    alpha = label_concentration * k * global_hist / n
    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(k)]
    remaining = global_hist.astype(np.int64).copy()
    taken = np.zeros(k, dtype=np.int64)

    assignments = {}
    for cid in range(n_clients):
        present = alpha > 0
        props = np.zeros(k)
        props[present] = rng.dirichlet(alpha[present])
        want = _largest_remainder(props, int(sizes[cid]))
        counts = np.minimum(want, remaining)
        deficit = int(sizes[cid] - counts.sum())
        while deficit > 0:
            room = remaining - counts
            weights = np.where(room > 0, props + 1e-12, 0.0)
            extra = np.minimum(_largest_remainder(weights, deficit), room)
            if extra.sum() == 0:  # rounding put everything on full labels
                extra[np.flatnonzero(room > 0)[0]] = 1
            counts += extra
            deficit = int(sizes[cid] - counts.sum())
        idx = np.concatenate([pools[c][taken[c]:taken[c] + counts[c]] for c in range(k)])
        taken += counts
        remaining -= counts
        assignments[cid] = np.sort(idx)
    return PartitionPlan(assignments)


def assign_manipulations(plan: PartitionPlan, count: int, spec: ManipulationSpec | None, seed: int) -> PartitionPlan:
    """Give ``spec`` to ``count`` randomly chosen clients, fixed before training starts."""
    if spec is None or count == 0:
        return plan.with_manipulations({})
    if not 0 <= count <= plan.n_clients:
        raise ConfigError(f"cannot manipulate {count} of {plan.n_clients} clients", key="manip_clients")
    rng = np.random.default_rng(seed)
    ids = sorted(plan.assignments)
    chosen = sorted(int(c) for c in rng.choice(ids, size=count, replace=False))
    return plan.with_manipulations({cid: spec for cid in chosen})


def client_datasets(dataset: LabeledDataset, plan: PartitionPlan) -> dict[int, LabeledDataset]:
    """Materialize each client's local data with its manipulation applied to all of it."""
    out = {}
    for cid in sorted(plan.assignments):
        local = dataset.subset(plan.assignments[cid])
        spec = plan.manipulations.get(cid)
        if spec is not None:
            local = local.with_images(spec.apply(local.images))
        out[cid] = local
    return out


# ---------------------------------------------------------------- image dumps


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255). Accepts (C, H, W) with C in {1, 3}."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise InputError(f"PPM dump needs a (1|3, H, W) image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` back to (3, H, W) floats."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise FormatError(f"{path}: not a P6/255 pixmap", offset=0)
    w, h = int(m.group(1)), int(m.group(2))
    payload = data[m.end():]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, got {len(payload)}", offset=len(data) - len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)
