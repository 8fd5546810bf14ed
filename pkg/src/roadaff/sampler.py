"""Standard / positive / negative training views around annotated attention centers.

Crops are given by their top-left corner ``(left, top)`` in source pixels;
images are channel-first ``(C, H, W)`` arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .annotation import PartialAffordance
from .labels import K, Action

logger = logging.getLogger(__name__)


class NoValidPositionError(ValueError):
    pass


class ViewType(str, Enum):
    STANDARD = "Standard"
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


@dataclass(frozen=True)
class SamplerConfig:
    view_size: tuple[int, int] = (224, 224)     # (height, width)
    safe_zone: tuple[int, int] = (90, 160)      # (height, width)
    straight_keep_ratio: float = 1.0 / 6.0
    mirror_prob: float = 0.5
    max_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        vh, vw = self.view_size
        zh, zw = self.safe_zone
        if min(vh, vw, zh, zw) <= 0:
            raise ValueError("view and safe-zone sizes must be positive")
        if zh > vh or zw > vw:
            raise ValueError(f"safe zone {self.safe_zone} larger than view {self.view_size}")
        if not 0.0 < self.straight_keep_ratio <= 1.0:
            raise ValueError("straight_keep_ratio must be in (0, 1]")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError("mirror_prob must be in [0, 1]")


@dataclass(frozen=True)
class Rect:
    left: int
    top: int
    width: int
    height: int

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def bottom(self) -> int:
        return self.top + self.height

    def contains(self, other: "Rect") -> bool:
        return (self.left <= other.left and other.right <= self.right
                and self.top <= other.top and other.bottom <= self.bottom)

    def intersects(self, other: "Rect") -> bool:
        return (self.left < other.right and other.left < self.right
                and self.top < other.bottom and other.top < self.bottom)


def safe_zone(center: tuple[float, float], image_hw: tuple[int, int],
              size_hw: tuple[int, int] = (90, 160)) -> Rect:
    """Safe-zone rectangle centered on ``center`` and clipped to the image."""
    H, W = image_hw
    zh, zw = size_hw
    left = int(round(center[0] - zw / 2.0))
    top = int(round(center[1] - zh / 2.0))
    l0, t0 = max(left, 0), max(top, 0)
    l1, t1 = min(left + zw, W), min(top + zh, H)
    if l1 <= l0 or t1 <= t0:
        raise NoValidPositionError(f"attention center {center} lies outside the {W}x{H} image")
    return Rect(l0, t0, l1 - l0, t1 - t0)


@dataclass(frozen=True)
class ViewSample:
    crop: np.ndarray
    view_type: ViewType
    label_vector: np.ndarray
    attention_in_view: tuple[float, float] | None
    distance_label: float | None
    origin: tuple[int, int] = (0, 0)   # (left, top) of the crop in the source image
    mirrored: bool = False
    frame_id: str = ""

    @property
    def width(self) -> int:
        return int(self.crop.shape[-1])

    @property
    def height(self) -> int:
        return int(self.crop.shape[-2])

    @property
    def rect(self) -> Rect:
        return Rect(self.origin[0], self.origin[1], self.width, self.height)


def _check_image(img: np.ndarray, cfg: SamplerConfig):
    vh, vw = cfg.view_size
    H, W = img.shape[-2:]
    if H < vh or W < vw:
        raise ValueError(f"image {W}x{H} smaller than view {vw}x{vh}")
    return H, W


def _positive_vector(label: PartialAffordance) -> np.ndarray:
    y = np.zeros(K)
    y[label.known_class.index] = 1.0
    return y


def _view(img, label, cfg, left, top, view_type, y, distance):
    vh, vw = cfg.view_size
    u, v = label.attention_center
    return ViewSample(
        crop=np.ascontiguousarray(img[..., top:top + vh, left:left + vw]),
        view_type=view_type, label_vector=y,
        attention_in_view=(u - left, v - top), distance_label=distance,
        origin=(left, top), frame_id=label.frame_id)


def sample_standard(img: np.ndarray, label: PartialAffordance, cfg: SamplerConfig = SamplerConfig()) -> ViewSample:
    """Crop centered horizontally on the attention center and reaching the image bottom."""
    H, W = _check_image(img, cfg)
    vh, vw = cfg.view_size
    left = int(np.clip(int(round(label.attention_center[0])) - vw // 2, 0, W - vw))
    distance = float(label.distance) if label.distance_valid else None
    return _view(img, label, cfg, left, H - vh, ViewType.STANDARD, _positive_vector(label), distance)


def positive_positions(image_hw, zone: Rect, cfg: SamplerConfig):
    """Inclusive ranges ``((lo_left, hi_left), (lo_top, hi_top))`` of crops containing ``zone``."""
    H, W = image_hw
    vh, vw = cfg.view_size
    lx, hx = max(0, zone.right - vw), min(W - vw, zone.left)
    ly, hy = max(0, zone.bottom - vh), min(H - vh, zone.top)
    if lx > hx or ly > hy:
        raise NoValidPositionError(f"no {vw}x{vh} crop contains safe zone {zone}")
    return (lx, hx), (ly, hy)


def negative_mask(image_hw, zone: Rect, cfg: SamplerConfig) -> np.ndarray:
    """Boolean (top, left) grid of crop positions disjoint from ``zone``."""
    H, W = image_hw
    vh, vw = cfg.view_size
    lefts = np.arange(W - vw + 1)
    tops = np.arange(H - vh + 1)
    x_ok = (lefts + vw <= zone.left) | (lefts >= zone.right)
    y_ok = (tops + vh <= zone.top) | (tops >= zone.bottom)
    return x_ok[None, :] | y_ok[:, None]


def sample_positive(img: np.ndarray, label: PartialAffordance, rng: np.random.Generator,
                    cfg: SamplerConfig = SamplerConfig()) -> ViewSample:
    """Crop drawn uniformly among positions whose rectangle contains the safe zone."""
    H, W = _check_image(img, cfg)
    zone = safe_zone(label.attention_center, (H, W), cfg.safe_zone)
    (lx, hx), (ly, hy) = positive_positions((H, W), zone, cfg)
    left = int(rng.integers(lx, hx + 1))
    top = int(rng.integers(ly, hy + 1))
    return _view(img, label, cfg, left, top, ViewType.POSITIVE, _positive_vector(label), None)


def sample_negative(img: np.ndarray, label: PartialAffordance, rng: np.random.Generator,
                    cfg: SamplerConfig = SamplerConfig()) -> ViewSample:
    """Crop drawn uniformly among positions disjoint from the safe zone.

    Rejection sampling over all positions; after ``cfg.max_attempts`` misses
    the valid set is enumerated and sampled directly.
    """
    H, W = _check_image(img, cfg)
    vh, vw = cfg.view_size
    zone = safe_zone(label.attention_center, (H, W), cfg.safe_zone)
    pick = None
    for _ in range(cfg.max_attempts):
        left = int(rng.integers(0, W - vw + 1))
        top = int(rng.integers(0, H - vh + 1))
        if not Rect(left, top, vw, vh).intersects(zone):
            pick = (left, top)
            break
    if pick is None:
        tops, lefts = np.nonzero(negative_mask((H, W), zone, cfg))
        if tops.size == 0:
            raise NoValidPositionError(f"no {vw}x{vh} crop avoids safe zone {zone} in a {W}x{H} image")
        i = int(rng.integers(tops.size))
        pick = (int(lefts[i]), int(tops[i]))
    y = np.zeros(K)
    y[label.known_class.index] = -1.0
    return _view(img, label, cfg, pick[0], pick[1], ViewType.NEGATIVE, y, None)


def mirror(sample: ViewSample) -> ViewSample:
    """Horizontal flip; Left and Right labels swap (the class vector is reversed)."""
    att = sample.attention_in_view
    if att is not None:
        att = (sample.width - 1 - att[0], att[1])
    return replace(sample, crop=np.ascontiguousarray(sample.crop[..., ::-1]),
                   label_vector=sample.label_vector[::-1].copy(),
                   attention_in_view=att, mirrored=not sample.mirrored)


def context_window(img: np.ndarray, sample: ViewSample, margin: int) -> np.ndarray:
    """The view's crop extended by ``margin`` pixels of its source image on every side.

    Pixels outside the image are zero; a mirrored view gives a mirrored window.
    """
    C, H, W = img.shape
    left, top = sample.origin
    out = np.zeros((C, sample.height + 2 * margin, sample.width + 2 * margin), dtype=img.dtype)
    x0, y0 = left - margin, top - margin
    sx, sy = max(x0, 0), max(y0, 0)
    ex, ey = min(x0 + out.shape[2], W), min(y0 + out.shape[1], H)
    out[:, sy - y0:ey - y0, sx - x0:ex - x0] = img[:, sy:ey, sx:ex]
    return np.ascontiguousarray(out[..., ::-1]) if sample.mirrored else out


class FrameDataset:
    """Images paired with partial labels; ``images[i]`` is a (C, H, W) array."""

    def __init__(self, images, labels: Sequence[PartialAffordance]):
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        self.images = images
        self.labels = list(labels)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]


def select_frames(labels: Sequence[PartialAffordance], rng: np.random.Generator,
                  keep_ratio: float) -> np.ndarray:
    """Indices kept for one epoch: every turning frame plus a fresh Straight subset."""
    straight = np.array([i for i, lb in enumerate(labels) if lb.known_class is Action.STRAIGHT], dtype=np.int64)
    turning = np.array([i for i, lb in enumerate(labels) if lb.known_class is not Action.STRAIGHT], dtype=np.int64)
    n_keep = int(round(straight.size * keep_ratio))
    if straight.size and n_keep == 0 and turning.size == 0:
        n_keep = 1
    kept = rng.choice(straight, size=n_keep, replace=False) if n_keep else straight[:0]
    return np.sort(np.concatenate([turning, kept]))


def make_epoch(dataset: FrameDataset, rng: np.random.Generator,
               cfg: SamplerConfig = SamplerConfig()) -> Iterator[ViewSample]:
    """Shuffled stream of one standard, one positive and one negative view per kept frame.

    Views are produced lazily; each is mirrored with probability ``cfg.mirror_prob``.
    A negative view that cannot avoid the safe zone is skipped with a warning.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    kept = select_frames(dataset.labels, rng, cfg.straight_keep_ratio)
    jobs = [(int(i), vt) for i in kept for vt in ViewType]
    order = rng.permutation(len(jobs))
    for j in order:
        i, vt = jobs[j]
        img, label = dataset[i]
        try:
            if vt is ViewType.STANDARD:
                s = sample_standard(img, label, cfg)
            elif vt is ViewType.POSITIVE:
                s = sample_positive(img, label, rng, cfg)
            else:
                s = sample_negative(img, label, rng, cfg)
        except NoValidPositionError as exc:
            logger.warning("skipping %s view of %s: %s", vt.value, label.frame_id, exc)
            continue
        if rng.random() < cfg.mirror_prob:
            s = mirror(s)
        yield s
