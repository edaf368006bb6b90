"""Bag/instance types, the synthetic dataset generator, and bag persistence.

A bag is the unit of labeling: an ordered list of 60x60 patches, each
tagged with the slice it came from and its cell in the 3x4 slice grid.

The synthetic generator is a desk-scale surrogate for CT-patch bags. Every
patch is textured background: Gaussian noise, a per-cell intensity ramp
whose orientation encodes the grid position (so location prediction is
learnable after per-patch normalization), a random count of faint smooth
bumps, and a few bright salt pixels that pin the per-patch maximum so
min-max normalization maps all patches onto a comparable range. Positive
bags additionally plant a bright Gaussian "lesion" blob into a fixed number
of randomly chosen instances, biased toward the lower grid rows. The faint
bumps' per-bag rate varies widely, which keeps whole-bag mean intensity
uninformative about the label while leaving the lesions easy to spot for a
small convolutional extractor.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .layers import minmax_normalize
from .pretext import GRID_COLS, GRID_ROWS, N_POSITIONS, position_to_rc

PATCH_HW = 60
BAG_MAGIC = b"MILBAGB1"
_HEADER_LEN_BYTES = 4

# background texture parameters (per-patch unless noted)
_BASE_LEVEL = 0.45
_NOISE_SIGMA = 0.10
_RAMP_AMPLITUDE = 0.35
_BUMP_RATE_RANGE = (0.5, 2.0)        # per-bag Poisson rate of faint bumps
_BUMP_AMP_RANGE = (0.08, 0.35)
_BUMP_SIGMA_RANGE = (3.0, 6.0)
_SALT_COUNT_RANGE = (2, 5)           # bright single pixels per patch
_SALT_AMP_RANGE = (0.45, 0.90)       # drawn once per bag; decorrelates bag means
_LESION_AMP_JITTER = (-0.05, 0.10)
_LESION_SIGMA_JITTER = (0.85, 1.15)
_LESION_MARGIN = 15                  # lesion centers stay this far from the border
_LESION_ROW_BIAS = 0.8               # lesions favor lower grid rows


@dataclass
class Instance:
    """One patch: pixels in [0,1] plus its slice/grid coordinates."""

    pixels: np.ndarray
    slice_index: int
    grid_position: int
    metadata_valid: bool = True

    def __post_init__(self):
        if self.slice_index < 0:
            raise ContractError(f"slice_index must be >= 0, got {self.slice_index}")
        if not 0 <= self.grid_position < N_POSITIONS:
            raise ContractError(f"grid_position must be in 0..{N_POSITIONS - 1}, "
                                f"got {self.grid_position}")


@dataclass
class Bag:
    """An ordered collection of instances sharing one binary label."""

    id: str
    label: int
    instances: list[Instance]
    is_virtual: bool = False

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"bag label must be 0 or 1, got {self.label}")
        if len(self.instances) < 1:
            raise ContractError(f"bag {self.id} has no instances")

    @property
    def k(self) -> int:
        return len(self.instances)


@dataclass
class DatasetSpec:
    """Parameters of the synthetic dataset."""

    n_positive: int = 10
    n_negative: int = 36
    slices_per_bag: int = 3
    key_fraction: float = 0.15
    seed: int = 0
    motif_sigma: float = 8.0
    motif_peak: float = 0.6

    def __post_init__(self):
        if self.n_positive < 1 or self.n_negative < 1:
            raise ConfigError("need at least one bag of each class")
        if self.n_negative < self.n_positive:
            raise ConfigError("the dataset mirrors class imbalance: n_negative >= n_positive")
        if self.slices_per_bag < 1:
            raise ConfigError("slices_per_bag must be >= 1")
        k = self.slices_per_bag * N_POSITIONS
        if self.key_fraction * k < 1:
            raise ConfigError(
                f"key_fraction {self.key_fraction} plants no motif instance in bags of {k}")
        if not 0 < self.key_fraction <= 1:
            raise ConfigError("key_fraction must be in (0, 1]")

    @property
    def instances_per_bag(self) -> int:
        return self.slices_per_bag * N_POSITIONS


_YY, _XX = np.mgrid[0:PATCH_HW, 0:PATCH_HW].astype(np.float64)


def _gaussian_blob(cy: float, cx: float, sigma: float, amplitude: float) -> np.ndarray:
    return amplitude * np.exp(-((_YY - cy) ** 2 + (_XX - cx) ** 2) / (2.0 * sigma ** 2))


def _background_patch(rng: np.random.Generator, row: int, col: int,
                      bump_rate: float, salt_amp: float) -> np.ndarray:
    patch = _BASE_LEVEL + rng.normal(0.0, _NOISE_SIGMA, size=(PATCH_HW, PATCH_HW))
    # ramp orientation encodes the grid cell; survives per-patch normalization
    ax = _RAMP_AMPLITUDE * (col - (GRID_COLS - 1) / 2.0) / ((GRID_COLS - 1) / 2.0)
    ay = _RAMP_AMPLITUDE * (row - (GRID_ROWS - 1) / 2.0) / ((GRID_ROWS - 1) / 2.0)
    patch += ax * (_XX / (PATCH_HW - 1)) + ay * (_YY / (PATCH_HW - 1))
    for _ in range(rng.poisson(bump_rate)):
        patch += _gaussian_blob(rng.uniform(0, PATCH_HW), rng.uniform(0, PATCH_HW),
                                rng.uniform(*_BUMP_SIGMA_RANGE),
                                rng.uniform(*_BUMP_AMP_RANGE))
    n_salt = rng.integers(_SALT_COUNT_RANGE[0], _SALT_COUNT_RANGE[1])
    ys = rng.integers(0, PATCH_HW, size=n_salt)
    xs = rng.integers(0, PATCH_HW, size=n_salt)
    patch[ys, xs] += salt_amp * rng.uniform(0.9, 1.1, size=n_salt)
    return patch


def _add_lesion(patch: np.ndarray, rng: np.random.Generator, spec: DatasetSpec) -> None:
    cy = rng.uniform(_LESION_MARGIN, PATCH_HW - _LESION_MARGIN)
    cx = rng.uniform(_LESION_MARGIN, PATCH_HW - _LESION_MARGIN)
    amp = spec.motif_peak + rng.uniform(*_LESION_AMP_JITTER)
    sigma = spec.motif_sigma * rng.uniform(*_LESION_SIGMA_JITTER)
    patch += _gaussian_blob(cy, cx, sigma, amp)


def _make_bag(bag_id: str, label: int, spec: DatasetSpec,
              rng: np.random.Generator) -> tuple[Bag, list[int]]:
    k = spec.instances_per_bag
    bump_rate = rng.uniform(*_BUMP_RATE_RANGE)
    # the per-bag salt level shifts every patch's normalization range the
    # same way for both classes, so whole-bag mean intensity stays a poor
    # label predictor even though lesions add brightness
    salt_amp = rng.uniform(*_SALT_AMP_RANGE)
    raw = []
    for i in range(k):
        row, col = position_to_rc(i % N_POSITIONS)
        raw.append(_background_patch(rng, row, col, bump_rate, salt_amp))
    lesioned: list[int] = []
    if label == 1:
        n_key = math.ceil(spec.key_fraction * k)
        rows = np.array([position_to_rc(i % N_POSITIONS)[0] for i in range(k)], dtype=np.float64)
        weights = 1.0 + _LESION_ROW_BIAS * rows / (GRID_ROWS - 1)
        chosen = rng.choice(k, size=n_key, replace=False, p=weights / weights.sum())
        lesioned = sorted(int(i) for i in chosen)
        for idx in lesioned:
            _add_lesion(raw[idx], rng, spec)
    instances = [
        Instance(pixels=minmax_normalize(patch).astype(np.float32),
                 slice_index=i // N_POSITIONS,
                 grid_position=i % N_POSITIONS)
        for i, patch in enumerate(raw)
    ]
    return Bag(id=bag_id, label=label, instances=instances), lesioned


def generate_synthetic_with_motifs(spec: DatasetSpec) -> tuple[list[Bag], dict[str, list[int]]]:
    """Like generate_synthetic, also returning each bag's lesion indices."""
    bags = []
    motifs: dict[str, list[int]] = {}
    for i in range(spec.n_negative):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0, i)))
        bag, lesioned = _make_bag(f"neg-{i:03d}", 0, spec, rng)
        bags.append(bag)
        motifs[bag.id] = lesioned
    for i in range(spec.n_positive):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1, i)))
        bag, lesioned = _make_bag(f"pos-{i:03d}", 1, spec, rng)
        bags.append(bag)
        motifs[bag.id] = lesioned
    return bags, motifs


def generate_synthetic(spec: DatasetSpec) -> list[Bag]:
    """Deterministic synthetic dataset: negatives first, then positives."""
    bags, _ = generate_synthetic_with_motifs(spec)
    return bags


def mean_pixel_scores(bags) -> np.ndarray:
    """Whole-bag mean intensity, the trivial baseline the generator must defeat."""
    return np.array([np.mean([inst.pixels.mean() for inst in bag.instances])
                     for bag in bags])


# -- bag files --------------------------------------------------------------


def write_bag(path, bag: Bag) -> None:
    """Write one bag: magic, length-prefixed JSON header, float32 pixels."""
    path = Path(path)
    for inst in bag.instances:
        if inst.pixels.shape != (PATCH_HW, PATCH_HW):
            raise ContractError(
                f"bag file format stores {PATCH_HW}x{PATCH_HW} patches, "
                f"got {inst.pixels.shape}")
    header = {
        "schema_version": 1,
        "id": bag.id,
        "label": bag.label,
        "k": bag.k,
        "patch_hw": PATCH_HW,
        "is_virtual": bag.is_virtual,
        "instances": [
            {"slice_index": inst.slice_index,
             "grid_position": inst.grid_position,
             "metadata_valid": inst.metadata_valid}
            for inst in bag.instances
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.stack([inst.pixels for inst in bag.instances]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload.tobytes())


def read_bag(path) -> Bag:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(BAG_MAGIC)] != BAG_MAGIC:
        raise FormatError(f"{path.name}: bad magic, not a bag file", offset=0)
    pos = len(BAG_MAGIC)
    if len(blob) < pos + _HEADER_LEN_BYTES:
        raise FormatError(f"{path.name}: truncated before header length", offset=pos)
    (header_len,) = struct.unpack_from("<I", blob, pos)
    pos += _HEADER_LEN_BYTES
    if len(blob) < pos + header_len:
        raise FormatError(f"{path.name}: truncated header", offset=pos)
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path.name}: malformed header ({e})", offset=pos) from e
    header_start = pos
    pos += header_len
    try:
        k = int(header["k"])
        label = int(header["label"])
        bag_id = str(header["id"])
        patch_hw = int(header["patch_hw"])
        is_virtual = bool(header.get("is_virtual", False))
        metas = header["instances"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path.name}: header missing fields ({e})", offset=header_start) from e
    if patch_hw != PATCH_HW:
        raise FormatError(f"{path.name}: unsupported patch size {patch_hw}", offset=header_start)
    if label not in (0, 1) or k < 1 or len(metas) != k:
        raise FormatError(f"{path.name}: inconsistent header (k={k}, label={label}, "
                          f"{len(metas)} instance records)", offset=header_start)
    expected = k * PATCH_HW * PATCH_HW * 4
    if len(blob) - pos < expected:
        raise FormatError(f"{path.name}: truncated payload, expected {expected} bytes, "
                          f"got {len(blob) - pos}", offset=pos)
    if len(blob) - pos > expected:
        raise FormatError(f"{path.name}: {len(blob) - pos - expected} trailing bytes "
                          f"after payload", offset=pos + expected)
    pixels = np.frombuffer(blob, dtype="<f4", count=k * PATCH_HW * PATCH_HW,
                           offset=pos).reshape(k, PATCH_HW, PATCH_HW)
    if not np.isfinite(pixels).all() or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise FormatError(f"{path.name}: pixel values outside [0, 1]", offset=pos)
    instances = []
    for i, meta in enumerate(metas):
        try:
            instances.append(Instance(
                pixels=np.array(pixels[i], dtype=np.float32),
                slice_index=int(meta["slice_index"]),
                grid_position=int(meta["grid_position"]),
                metadata_valid=bool(meta.get("metadata_valid", True)),
            ))
        except (KeyError, TypeError, ValueError, ContractError) as e:
            raise FormatError(f"{path.name}: invalid instance record {i} ({e})",
                              offset=header_start) from e
    return Bag(id=bag_id, label=label, instances=instances, is_virtual=is_virtual)


# -- dataset directories -----------------------------------------------------


INDEX_NAME = "index.json"


def write_dataset(directory, bags) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    histogram = {"0": 0, "1": 0}
    for bag in bags:
        name = f"{bag.id}.milbag"
        write_bag(directory / name, bag)
        names.append(name)
        histogram[str(bag.label)] += 1
    index = {"schema_version": 1, "bags": names, "label_histogram": histogram}
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=2, sort_keys=True))


def read_dataset(directory) -> list[Bag]:
    directory = Path(directory)
    index_path = directory / INDEX_NAME
    if not index_path.exists():
        raise FormatError(f"{directory} has no {INDEX_NAME}")
    try:
        index = json.loads(index_path.read_text())
        names = index["bags"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{index_path}: malformed index ({e})") from e
    return [read_bag(directory / name) for name in names]
