"""
Синтетическая 7-классовая задача по мотивам феррограмм.

Классы: 0=фон, 1=A, 2=B, 3=C, 4=A+B, 5=A+C, 6=B+C, где
A - вытянутые чешуйки (усталостный износ), B - темные неровные пятна (оксиды),
C - яркие круги (сферические частицы).
Каждый сэмпл рисуется из собственного seed, поэтому порядок генерации не важен.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError, RangeError, SplitError

NUM_CLASSES = 7
CLASS_NAMES = ("background", "A", "B", "C", "A+B", "A+C", "B+C")
CLASS_PARTICLES: Dict[int, Tuple[str, ...]] = {
    0: (),
    1: ("A",),
    2: ("B",),
    3: ("C",),
    4: ("A", "B"),
    5: ("A", "C"),
    6: ("B", "C"),
}

Color = Tuple[float, float, float]


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(32, ge=16)
    channels: int = Field(3, ge=1, le=3)
    background_mean: float = Field(0.30, ge=0.0, le=1.0)
    background_var: float = Field(0.004, gt=0.0)
    background_tint: Color = (1.0, 0.95, 0.85)
    color_a: Color = (0.85, 0.55, 0.25)
    color_b: Color = (0.12, 0.10, 0.12)
    color_c: Color = (0.95, 0.95, 0.80)
    texture_a: float = Field(0.35, ge=0.0, le=1.0)
    texture_b: float = Field(0.30, ge=0.0, le=1.0)
    texture_c: float = Field(0.40, ge=0.0, le=1.0)
    size_min: float = Field(0.10, gt=0.0)
    size_max: float = Field(0.20, gt=0.0, le=0.5)
    noise_std: float = Field(0.03, ge=0.0)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def _check_ranges(self) -> "TaskSpec":
        if self.size_min >= self.size_max:
            raise ValueError(f"size_min {self.size_min} must be below size_max {self.size_max}")
        if self.channels == 2:
            raise ValueError("channels must be 1 (grayscale) or 3 (RGB)")
        return self


# максимальные сдвиги домена при shift_magnitude = 1
SHIFT_MAXIMA = {
    "background_mean": 0.25,
    "background_var": 0.006,
    "noise_std": 0.05,
    "background_tint": (-0.20, 0.0, 0.20),
    "color_a": (-0.25, 0.10, 0.25),
    "color_b": (0.20, 0.15, 0.0),
    "color_c": (-0.20, -0.10, 0.10),
}


# ==================== DATASET ====================

@dataclass
class Sample:
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Sample:
        return Sample(self.images[index], int(self.labels[index]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices])

    def class_counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


# ==================== RENDERING ====================

def _soft_mask(distance: np.ndarray, sharpness: float = 10.0) -> np.ndarray:
    # distance < 1 внутри фигуры
    return 1.0 / (1.0 + np.exp(np.clip((distance - 1.0) * sharpness, -50, 50)))


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    img *= 1.0 - mask[None]
    img += color * mask[None]


def _draw_flake(img, spec: TaskSpec, grid, cx, cy, r, rng) -> None:
    yy, xx = grid
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    major, minor = r * rng.uniform(1.5, 1.9), r * rng.uniform(0.35, 0.5)
    mask = _soft_mask(np.sqrt((u / major) ** 2 + (v / minor) ** 2))
    stripes = 1.0 - spec.texture_a * 0.5 * (1.0 + np.cos(2 * np.pi * u / max(r * 0.45, 1.0)))
    color = np.asarray(spec.color_a)[:, None, None] * stripes[None]
    _paint(img, mask, color)


def _draw_oxide(img, spec: TaskSpec, grid, cx, cy, r, rng) -> None:
    yy, xx = grid
    mask = np.zeros(yy.shape)
    for _ in range(rng.integers(3, 5)):
        bx = cx + rng.uniform(-0.6, 0.6) * r
        by = cy + rng.uniform(-0.6, 0.6) * r
        br = r * rng.uniform(0.45, 0.7)
        mask = np.maximum(mask, _soft_mask(np.hypot(xx - bx, yy - by) / br, 6.0))
    rough = 1.0 + spec.texture_b * rng.standard_normal(yy.shape)
    color = np.asarray(spec.color_b)[:, None, None] * rough[None]
    _paint(img, mask, color)


def _draw_sphere(img, spec: TaskSpec, grid, cx, cy, r, rng) -> None:
    yy, xx = grid
    radius = r * rng.uniform(0.7, 0.9)
    rho = np.hypot(xx - cx, yy - cy) / radius
    mask = _soft_mask(rho, 14.0)
    shade = 1.0 - spec.texture_c * 0.6 * np.clip(rho, 0, 1) ** 2
    glint = spec.texture_c * 0.3 * np.exp(-(np.hypot(xx - cx + radius / 3, yy - cy + radius / 3) / (radius / 3)) ** 2)
    color = np.asarray(spec.color_c)[:, None, None] * shade[None] + glint[None]
    _paint(img, mask, color)


_PAINTERS = {"A": _draw_flake, "B": _draw_oxide, "C": _draw_sphere}


def render_sample(spec: TaskSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """Одно изображение [C, H, W] со значениями в [0, 1]"""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    coarse = rng.standard_normal((4, 4))
    cells = (np.arange(size) * 4) // size
    lowfreq = coarse[cells[:, None], cells[None, :]]
    background = spec.background_mean + np.sqrt(spec.background_var) * lowfreq
    img = background[None] * np.asarray(spec.background_tint)[:, None, None]

    particles = CLASS_PARTICLES[label]
    if len(particles) == 1:
        centers = [(size * (0.5 + rng.uniform(-0.15, 0.15)), size * (0.5 + rng.uniform(-0.15, 0.15)))]
        scale = 1.0
    else:
        quadrants = rng.permutation(4)[:len(particles)]
        centers = [(size * ((q % 2) * 0.5 + 0.25 + rng.uniform(-0.06, 0.06)),
                    size * ((q // 2) * 0.5 + 0.25 + rng.uniform(-0.06, 0.06))) for q in quadrants]
        scale = 0.8
    for kind, (cx, cy) in zip(particles, centers):
        r = rng.uniform(spec.size_min, spec.size_max) * size * scale
        _PAINTERS[kind](img, spec, (yy, xx), cx, cy, r, rng)

    img += spec.noise_std * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    if spec.channels == 1:
        img = img.mean(axis=0, keepdims=True)
    return img.astype(np.float32)


# ==================== OPERATIONS ====================

def generate_dataset(spec: TaskSpec, n_per_class: int, seed: int, stream: int = 0) -> Dataset:
    """
    Ровно 7 * n_per_class сэмплов, классы по порядку меток.
    Сэмпл (label, i) рисуется из SeedSequence([spec.seed, seed, stream, label, i]).
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    images = np.empty((NUM_CLASSES * n_per_class, spec.channels, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(NUM_CLASSES * n_per_class, dtype=np.int64)
    row = 0
    for label in range(NUM_CLASSES):
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed, stream, label, i]))
            images[row] = render_sample(spec, label, rng)
            labels[row] = label
            row += 1
    logger.debug(f"Generated {row} samples (seed={seed}, stream={stream})")
    return Dataset(images, labels)


def generate_splits(spec: TaskSpec, n_train_per_class: int, n_test_per_class: int,
                    seed: int) -> Tuple[Dataset, Dataset]:
    """Train и фиксированный test из разных потоков seed"""
    return (generate_dataset(spec, n_train_per_class, seed, stream=0),
            generate_dataset(spec, n_test_per_class, seed, stream=1))


def _shift_tuple(base: Color, delta: Color, magnitude: float) -> Color:
    return tuple(b + magnitude * d for b, d in zip(base, delta))


def make_source_target_pair(shift_magnitude: float, seed: int,
                            base: Optional[TaskSpec] = None) -> Tuple[TaskSpec, TaskSpec]:
    """
    Source и target с одной геометрией классов; фон, цвета и шум target
    сдвинуты пропорционально shift_magnitude (0 - одинаковые спеки).
    """
    if not 0.0 <= shift_magnitude <= 1.0:
        raise RangeError(f"shift_magnitude must be in [0, 1], got {shift_magnitude}")
    source = (base or TaskSpec()).model_copy(update={"seed": seed})
    if shift_magnitude == 0.0:
        return source, source

    update = {
        "background_mean": source.background_mean + shift_magnitude * SHIFT_MAXIMA["background_mean"],
        "background_var": source.background_var + shift_magnitude * SHIFT_MAXIMA["background_var"],
        "noise_std": source.noise_std + shift_magnitude * SHIFT_MAXIMA["noise_std"],
    }
    for key in ("background_tint", "color_a", "color_b", "color_c"):
        update[key] = _shift_tuple(getattr(source, key), SHIFT_MAXIMA[key], shift_magnitude)
    return source, source.model_copy(update=update)


def few_shot_split(dataset: Dataset, k_per_class: int, seed: int) -> Tuple[Dataset, Dataset]:
    """k сэмплов каждого класса без возвращения + остаток (не пересекаются)"""
    if k_per_class < 1:
        raise SplitError(f"k_per_class must be >= 1, got {k_per_class}")
    rng = np.random.default_rng(seed)
    chosen = []
    for label, available in sorted(dataset.class_counts().items()):
        if k_per_class > available:
            raise SplitError(f"class {label} has {available} samples, cannot take {k_per_class}")
        members = np.flatnonzero(dataset.labels == label)
        chosen.append(np.sort(rng.choice(members, size=k_per_class, replace=False)))
    picked = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    remainder = np.setdiff1d(np.arange(len(dataset)), picked)
    return dataset.subset(picked), dataset.subset(remainder)
