"""Deterministic multi-crop farm data.

Each crop has its own linear response to the features plus an optional fixed
sinusoidal interaction; each farm adds a constant yield offset. Features are
abstract (think temperature, rainfall, soil index, fertilizer, ...); only
their count ``d`` matters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Dataset

CROP_NAMES = ("corn", "wheat", "cotton", "rice", "soybean", "barley")

# stream tags mixed into sub-seeds
TAG_PROFILE = 1
TAG_TRAIN = 2
TAG_TEST = 3
TAG_OFFSET = 4
TAG_SUBSCRIBE = 5

MAX_PROFILE_ATTEMPTS = 1000
# separation is reached by rescaling at most this much; beyond it we redraw
MAX_SEPARATION_SCALE = 4.0
BASE_YIELD_RANGE = (4.0, 8.0)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sub_seed(*parts: int) -> int:
    """Mix integer parts into one 64-bit seed; order-sensitive."""
    h = 0
    for p in parts:
        h = splitmix64(h ^ (int(p) & _MASK64))
    return h


def crop_name(crop_id: int) -> str:
    if crop_id < len(CROP_NAMES):
        return CROP_NAMES[crop_id]
    return f"crop{crop_id}"


@dataclass(frozen=True, eq=False)
class CropProfile:
    crop_id: int
    base_yield: float
    weight_vector: np.ndarray
    nonlinearity_scale: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        w = np.array(self.weight_vector, dtype=np.float64).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weight_vector", w)
        if self.noise_std < 0 or self.nonlinearity_scale < 0:
            raise ValueError("noise_std and nonlinearity_scale must be non-negative")

    @property
    def name(self) -> str:
        return crop_name(self.crop_id)

    def same_as(self, other: CropProfile) -> bool:
        return (self.crop_id == other.crop_id and self.base_yield == other.base_yield
                and np.array_equal(self.weight_vector, other.weight_vector)
                and self.nonlinearity_scale == other.nonlinearity_scale
                and self.noise_std == other.noise_std)


@dataclass(frozen=True)
class FarmProfile:
    farm_id: int
    crop_id: int
    farm_offset: float = 0.0
    n_train: int = 60
    n_test: int = 30

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError(f"farm {self.farm_id}: n_train and n_test must be >= 1")


@dataclass(frozen=True, eq=False)
class GeneratorConfig:
    d: int
    profiles: tuple[CropProfile, ...]
    feature_low: np.ndarray
    feature_high: np.ndarray
    farm_offset_std: float = 0.0
    seed: int = 0
    K: int = field(init=False)

    def __post_init__(self):
        profiles = tuple(self.profiles)
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "K", len(profiles))
        lo = np.broadcast_to(np.asarray(self.feature_low, dtype=np.float64), (self.d,)).copy()
        hi = np.broadcast_to(np.asarray(self.feature_high, dtype=np.float64), (self.d,)).copy()
        object.__setattr__(self, "feature_low", lo)
        object.__setattr__(self, "feature_high", hi)
        if not np.all(lo < hi):
            raise ValueError("feature_low must be below feature_high in every dimension")
        ids = [p.crop_id for p in profiles]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"crop ids must be exactly 0..K-1, got {ids}")
        for p in profiles:
            if p.weight_vector.shape[0] != self.d:
                raise ValueError(f"crop {p.crop_id}: weight vector length != d={self.d}")
        if self.farm_offset_std < 0:
            raise ValueError("farm_offset_std must be non-negative")

    def profile(self, crop_id: int) -> CropProfile:
        for p in self.profiles:
            if p.crop_id == crop_id:
                return p
        raise KeyError(f"unknown crop_id {crop_id}")


def _min_pairwise_distance(ws: np.ndarray) -> float:
    if ws.shape[0] < 2:
        return math.inf
    return min(float(np.linalg.norm(ws[i] - ws[j]))
               for i, j in combinations(range(ws.shape[0]), 2))


def make_crop_profiles(d: int, K: int, heterogeneity: float, seed: int, *,
                       nonlinearity_scale: float = 0.0, noise_std: float = 0.0,
                       identical: bool = False) -> list[CropProfile]:
    """Draw ``K`` crop response profiles whose weight vectors are pairwise
    at least ``heterogeneity`` apart in L2.

    With ``identical=True`` every crop reuses crop 0's draw (a homogeneous
    world, used as the null case).
    """
    if d < 1 or K < 1:
        raise ValueError("d and K must be >= 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be non-negative")
    n_draw = 1 if identical else K
    for attempt in range(MAX_PROFILE_ATTEMPTS):
        rng = np.random.default_rng(sub_seed(seed, TAG_PROFILE, attempt))
        ws = rng.uniform(-1.0, 1.0, size=(n_draw, d))
        bases = rng.uniform(*BASE_YIELD_RANGE, size=n_draw)
        gap = _min_pairwise_distance(ws)
        if heterogeneity > 0 and gap < heterogeneity:
            scale = heterogeneity / gap if gap > 0 else math.inf
            if scale > MAX_SEPARATION_SCALE:
                continue
            ws = ws * scale
            # guard against the rescaled minimum rounding just under the target
            while _min_pairwise_distance(ws) < heterogeneity:
                ws = ws * (1.0 + 1e-12)
        if identical:
            ws = np.repeat(ws, K, axis=0)
            bases = np.repeat(bases, K)
        return [CropProfile(k, float(bases[k]), ws[k], nonlinearity_scale, noise_std)
                for k in range(K)]
    raise ValueError(
        f"could not separate {K} crops by {heterogeneity} in d={d} "
        f"after {MAX_PROFILE_ATTEMPTS} attempts")


def true_yield(profile: CropProfile, farm_offset: float, x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(_true_yield_rows(profile, farm_offset, x[None, :])[0])


def _true_yield_rows(profile: CropProfile, farm_offset: float, x: np.ndarray) -> np.ndarray:
    d = profile.weight_vector.shape[0]
    if x.shape[1] != d:
        raise ValueError(f"expected {d} features, got {x.shape[1]}")
    inter = np.sin(x[:, 0] * x[:, min(1, d - 1)])
    return profile.base_yield + x @ profile.weight_vector + profile.nonlinearity_scale * inter + farm_offset


def farm_offset_for(gen: GeneratorConfig, farm_id: int) -> float:
    if gen.farm_offset_std == 0:
        return 0.0
    rng = np.random.default_rng(sub_seed(gen.seed, farm_id, TAG_OFFSET))
    return float(rng.normal(0.0, gen.farm_offset_std))


def _sample(gen: GeneratorConfig, farm: FarmProfile, tag: int, n: int) -> Dataset:
    profile = gen.profile(farm.crop_id)
    rng = np.random.default_rng(sub_seed(gen.seed, farm.farm_id, tag))
    x = rng.uniform(gen.feature_low, gen.feature_high, size=(n, gen.d))
    y = _true_yield_rows(profile, farm.farm_offset, x)
    if profile.noise_std > 0:
        y = y + rng.normal(0.0, profile.noise_std, size=n)
    return Dataset(x, y, farm.farm_id)


def generate_farm_dataset(gen: GeneratorConfig, farm: FarmProfile) -> tuple[Dataset, Dataset]:
    try:
        gen.profile(farm.crop_id)
    except KeyError:
        raise ValueError(f"farm {farm.farm_id}: crop_id {farm.crop_id} not in generator") from None
    return (_sample(gen, farm, TAG_TRAIN, farm.n_train),
            _sample(gen, farm, TAG_TEST, farm.n_test))


def write_dataset_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow([f"f{j}" for j in range(data.d)] + ["y"])
        for row, y in zip(data.features, data.targets):
            w.writerow([format(float(v), ".17g") for v in row] + [format(float(y), ".17g")])


def read_dataset_csv(path: str | Path, farm_id: int = 0, d: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    width = len(header) - 1
    expected = [f"f{j}" for j in range(width)] + ["y"]
    if width < 1 or header != expected:
        raise ValueError(f"{path}: bad header {header}")
    if d is not None and width != d:
        raise ValueError(f"{path}: {width} features, expected {d}")
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != width + 1:
            raise ValueError(f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}")
    arr = np.array([[float(v) for v in row] for row in body], dtype=np.float64).reshape(-1, width + 1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite values")
    return Dataset(arr[:, :width], arr[:, width], farm_id)
