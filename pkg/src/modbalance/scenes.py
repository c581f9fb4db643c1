"""Synthetic nested-ellipse scenes with per-modality appearance.

Each sample is a stack of strictly nested elliptical regions (class c+1
inside class c, mirroring nested tumor sub-regions). Modalities differ in
which classes they can see, what intensity they assign, and their noise
level; a class invisible to a modality takes on the intensity of its
nearest visible enclosing region, so that modality carries literally no
contrast for it. Modality 0 conventionally sees everything (the dominant
modality); later modalities see strict subsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

STANDARDIZE_EPS = 1e-8


@dataclass(frozen=True)
class Ellipse:
    """Axis lengths are semi-axes in pixels; rotation in radians."""

    center: Tuple[float, float]  # (row, col)
    axes: Tuple[float, float]
    rotation: float = 0.0

    def __post_init__(self):
        if min(self.axes) <= 0.0:
            raise ValueError(f"degenerate ellipse: axes {self.axes}")

    def contains(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        dr = rows - self.center[0]
        dc = cols - self.center[1]
        cos_t, sin_t = math.cos(self.rotation), math.sin(self.rotation)
        u = cos_t * dr + sin_t * dc
        v = -sin_t * dr + cos_t * dc
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class ModalityRenderer:
    """Intensity transfer curve, class visibility, and noise of one modality."""

    intensities: Tuple[float, ...]  # one plateau value per class index
    visible_classes: Tuple[int, ...]
    noise_sigma: float = 0.0

    def effective_class(self, c: int) -> int:
        """Nearest visible enclosing class: max visible index <= c (0 is always visible)."""
        candidates = [v for v in self.visible_classes if v <= c]
        return max(candidates, default=0)

    def transfer_table(self, n_classes: int) -> np.ndarray:
        return np.array(
            [self.intensities[self.effective_class(c)] for c in range(n_classes)],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class SceneSpec:
    """Scene geometry ranges and modality appearance for corpus generation.

    The outer foreground ellipse is drawn per sample (center jitter around
    the image center, semi-axes and rotation in the given ranges); each
    deeper class shrinks its parent's axes by a factor from `shrink_range`,
    sharing center and rotation, which guarantees strict nesting.
    Zero-width ranges make the geometry deterministic.
    """

    image_size: Tuple[int, int] = (64, 64)
    n_classes: int = 3
    renderers: Tuple[ModalityRenderer, ...] = ()
    center_jitter: float = 0.1  # fraction of each image dimension
    outer_axes_range: Tuple[float, float] = (0.5, 0.8)  # fraction of min(H, W)/2
    rotation_range: Tuple[float, float] = (0.0, math.pi)
    shrink_range: Tuple[float, float] = (0.45, 0.7)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least background plus one foreground class")
        if not self.renderers:
            raise ValueError("at least one modality renderer required")
        covered = set()
        for m, r in enumerate(self.renderers):
            if len(r.intensities) != self.n_classes:
                raise ValueError(f"modality {m}: transfer curve must list {self.n_classes} classes")
            for v in r.visible_classes:
                if not (1 <= v < self.n_classes):
                    raise ValueError(f"modality {m}: visible class {v} out of range")
            covered.update(r.visible_classes)
        missing = set(range(1, self.n_classes)) - covered
        if missing:
            raise ValueError(f"classes {sorted(missing)} invisible to every modality")
        for c in range(1, self.n_classes):
            if not any(self._has_contrast(r, c) for r in self.renderers):
                raise ValueError(f"class {c} has zero contrast in every modality")
        if self.outer_axes_range[0] <= 0 or self.shrink_range[0] <= 0:
            raise ValueError("axis and shrink ranges must be positive")
        if self.shrink_range[1] >= 1.0:
            raise ValueError("shrink factors must stay below 1 for strict nesting")

    @staticmethod
    def _has_contrast(renderer: ModalityRenderer, c: int) -> bool:
        if c not in renderer.visible_classes:
            return False
        surround = renderer.effective_class(c - 1)
        return renderer.intensities[c] != renderer.intensities[surround]

    @property
    def n_modalities(self) -> int:
        return len(self.renderers)

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "n_classes": self.n_classes,
            "renderers": [
                {
                    "intensities": list(r.intensities),
                    "visible_classes": list(r.visible_classes),
                    "noise_sigma": r.noise_sigma,
                }
                for r in self.renderers
            ],
            "center_jitter": self.center_jitter,
            "outer_axes_range": list(self.outer_axes_range),
            "rotation_range": list(self.rotation_range),
            "shrink_range": list(self.shrink_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            image_size=tuple(d["image_size"]),
            n_classes=d["n_classes"],
            renderers=tuple(
                ModalityRenderer(
                    intensities=tuple(r["intensities"]),
                    visible_classes=tuple(r["visible_classes"]),
                    noise_sigma=r["noise_sigma"],
                )
                for r in d["renderers"]
            ),
            center_jitter=d["center_jitter"],
            outer_axes_range=tuple(d["outer_axes_range"]),
            rotation_range=tuple(d["rotation_range"]),
            shrink_range=tuple(d["shrink_range"]),
        )


def default_scene_spec(
    n_modalities: int = 3, n_classes: int = 3, image_size: Tuple[int, int] = (64, 64),
    noise_sigma: float = 0.08,
) -> SceneSpec:
    """Heterogeneous-contribution default: modality 0 sees every class,
    modality m >= 1 sees the single class ((m-1) mod (C-1)) + 1."""
    if n_modalities < 1:
        raise ValueError("need at least one modality")
    renderers = []
    full_curve = tuple(np.linspace(0.0, 0.9, n_classes).tolist())
    renderers.append(
        ModalityRenderer(
            intensities=full_curve,
            visible_classes=tuple(range(1, n_classes)),
            noise_sigma=noise_sigma,
        )
    )
    for m in range(1, n_modalities):
        c = (m - 1) % (n_classes - 1) + 1
        curve = [0.0] * n_classes
        curve[c] = 0.8
        renderers.append(
            ModalityRenderer(
                intensities=tuple(curve), visible_classes=(c,), noise_sigma=noise_sigma
            )
        )
    return SceneSpec(image_size=image_size, n_classes=n_classes, renderers=tuple(renderers))


@dataclass
class ModalitySample:
    """One rendered sample: M standardized images, a label map, availability."""

    images: np.ndarray  # (M, H, W) float32, zero-filled where absent
    label: np.ndarray  # (H, W) uint8
    presence: np.ndarray  # (M,) int8
    sample_id: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.uint8)
        self.presence = np.asarray(self.presence, dtype=np.int8)
        if self.images.ndim != 3 or self.label.shape != self.images.shape[1:]:
            raise ValueError("images must be (M, H, W) matching the label map")
        if self.presence.shape != (self.images.shape[0],):
            raise ValueError("presence length must equal the modality count")
        for m in np.flatnonzero(self.presence == 0):
            if self.images[m].any():
                raise ValueError(f"absent modality {m} must be zero-filled")


def draw_geometry(spec: SceneSpec, rng: np.random.Generator) -> List[Ellipse]:
    """Per-sample nested ellipses, outermost (class 1) first."""
    h, w = spec.image_size
    cy = (h - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter) * h
    cx = (w - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter) * w
    half = min(h, w) / 2.0
    lo, hi = spec.outer_axes_range
    axes = (rng.uniform(lo, hi) * half, rng.uniform(lo, hi) * half)
    rotation = rng.uniform(*spec.rotation_range)
    ellipses = [Ellipse(center=(cy, cx), axes=axes, rotation=rotation)]
    for _ in range(2, spec.n_classes):
        s = rng.uniform(*spec.shrink_range)
        parent = ellipses[-1]
        ellipses.append(
            Ellipse(center=parent.center, axes=(parent.axes[0] * s, parent.axes[1] * s),
                    rotation=parent.rotation)
        )
    return ellipses


def rasterize_labels(ellipses: Sequence[Ellipse], image_size: Tuple[int, int]) -> np.ndarray:
    """Paint nested regions outermost-first; pixel centers at integer coordinates."""
    h, w = image_size
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.zeros((h, w), dtype=np.uint8)
    for c, e in enumerate(ellipses, start=1):
        label[e.contains(rows, cols)] = c
    return label


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero-mean the image; divide by the standard deviation unless it vanishes."""
    x = np.asarray(image, dtype=np.float64)
    x = x - x.mean()
    std = x.std()
    if std >= STANDARDIZE_EPS:
        x = x / std
    return x


def render_sample(
    spec: SceneSpec,
    presence_row: Sequence[int],
    rng: np.random.Generator,
    sample_id: str = "sample",
) -> ModalitySample:
    """Rasterize one scene and render each present modality's view of it."""
    presence = np.asarray(presence_row, dtype=np.int8)
    if presence.shape != (spec.n_modalities,):
        raise ValueError("presence row length must match the renderer count")
    ellipses = draw_geometry(spec, rng)
    label = rasterize_labels(ellipses, spec.image_size)
    h, w = spec.image_size
    images = np.zeros((spec.n_modalities, h, w), dtype=np.float32)
    for m, renderer in enumerate(spec.renderers):
        # Absent modalities still consume their noise draw so presence does
        # not shift other modalities' randomness.
        noise = rng.standard_normal((h, w)) if renderer.noise_sigma > 0 else 0.0
        if not presence[m]:
            continue
        plateau = renderer.transfer_table(spec.n_classes)[label]
        image = plateau + renderer.noise_sigma * noise
        images[m] = standardize(image).astype(np.float32)
    return ModalitySample(images=images, label=label, presence=presence, sample_id=sample_id)
