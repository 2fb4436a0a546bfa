"""Deterministic synthesis of occluded-shapes scenes with layered ground truth.

A scene is a set of fixed-size shapes (one kind per class) with random
locations, orientations, and a total depth order. Rasterization produces an
outline-only grayscale image at canvas resolution and exact label maps at a
coarser label resolution: the top-most (foreground) and second-from-top
(occlusion) instance and class at every pixel, plus full amodal masks.

Determinism: every sample is a pure function of (config, sample_index). The
per-sample random stream is PCG64 seeded by
``SeedSequence(entropy=config.seed, spawn_key=(sample_index,))``; resampling
rounds consume further draws from the same stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import SHAPE_KINDS, shape_contains, shape_signed_distance


class SceneInfeasibleError(RuntimeError):
    """Raised when placements cannot satisfy the visibility requirement."""


@dataclass(frozen=True)
class SceneConfig:
    classes: tuple[str, ...] = ("triangle", "rectangle", "circle")
    instances_per_class: int = 6
    canvas_size: int = 256
    label_size: int = 64
    shape_scale: float = 48.0
    outline_width: float = 3.0
    min_visible_pixels: int = 5
    seed: int = 0
    max_resample_rounds: int = 1000

    def __post_init__(self):
        if not self.classes:
            raise ValueError("classes must be nonempty")
        for kind in self.classes:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind: {kind!r}")
        if self.instances_per_class < 1:
            raise ValueError("instances_per_class must be >= 1")
        if self.canvas_size % self.label_size != 0:
            raise ValueError("canvas_size must be an integer multiple of label_size")
        if self.shape_scale <= 0 or self.outline_width <= 0:
            raise ValueError("shape_scale and outline_width must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_instances(self) -> int:
        return self.num_classes * self.instances_per_class


@dataclass(frozen=True)
class ShapeInstance:
    instance_id: int
    class_id: int
    center: tuple[float, float]
    orientation: float
    depth_rank: int  # 0 = topmost


@dataclass(frozen=True)
class Scene:
    instances: tuple[ShapeInstance, ...]

    def depth_ranks(self) -> np.ndarray:
        return np.array([inst.depth_rank for inst in self.instances], dtype=np.int64)

    def class_ids(self) -> np.ndarray:
        return np.array([inst.class_id for inst in self.instances], dtype=np.int64)


@dataclass
class RenderedSample:
    """Input raster plus exact two-layer ground truth at label resolution.

    Label map convention: value 0 means background/none, value v > 0 refers
    to instance (or class) v - 1. ``image`` is None when rasterized with
    ``render_image=False`` (label-only fast path).
    """

    image: Optional[np.ndarray]          # (canvas, canvas) uint8, 255 = background
    fg_class: np.ndarray                 # (label, label) uint16
    occ_class: np.ndarray                # (label, label) uint16
    fg_instance: np.ndarray              # (label, label) uint16
    occ_instance: np.ndarray             # (label, label) uint16
    amodal_masks: np.ndarray             # (N, label, label) bool
    occlusion_fraction: np.ndarray       # (N,) float64 in [0, 1)


@dataclass
class DatasetSample:
    scene: Scene
    rendered: RenderedSample


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample deterministic PCG64 stream (documented splitting rule)."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


def occlusion_category(q: float, t_partial_max: float = 0.25) -> str:
    """Map an occlusion fraction to one of 'none', 'partial', 'heavy'.

    The three bins partition [0, 1]: none <=> q == 0,
    partial <=> 0 < q <= t_partial_max, heavy <=> q > t_partial_max.
    """
    if q == 0.0:
        return "none"
    if q <= t_partial_max:
        return "partial"
    return "heavy"


def _label_pixel_centers(config: SceneConfig) -> np.ndarray:
    """Centers of label-resolution pixels in canvas coordinates, (label^2, 2)."""
    s = config.canvas_size / config.label_size
    coords = (np.arange(config.label_size) + 0.5) * s
    xx, yy = np.meshgrid(coords, coords)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _cover_stack(centers: np.ndarray, orientations: np.ndarray,
                 class_ids: np.ndarray, config: SceneConfig,
                 points: np.ndarray) -> np.ndarray:
    """(N, label, label) membership of each instance at label pixel centers."""
    n = len(centers)
    ls = config.label_size
    cover = np.zeros((n, ls, ls), dtype=bool)
    for i in range(n):
        kind = config.classes[class_ids[i]]
        cover[i] = shape_contains(
            kind, centers[i], orientations[i], config.shape_scale, points
        ).reshape(ls, ls)
    return cover


def _layer_maps(cover: np.ndarray, depth_ranks: np.ndarray):
    """Per-pixel depth sort of the cover stack into the two layer maps."""
    n, h, w = cover.shape
    fg = np.zeros((h, w), dtype=np.uint16)
    occ = np.zeros((h, w), dtype=np.uint16)
    count = np.zeros((h, w), dtype=np.int32)
    for i in np.argsort(depth_ranks):  # topmost first
        m = cover[i]
        fg[m & (count == 0)] = i + 1
        occ[m & (count == 1)] = i + 1
        count[m] += 1
    return fg, occ


def _visible_counts(cover: np.ndarray, depth_ranks: np.ndarray) -> np.ndarray:
    fg, _ = _layer_maps(cover, depth_ranks)
    return np.bincount(fg.ravel(), minlength=cover.shape[0] + 1)[1:]


def generate_scene(config: SceneConfig, sample_index: int = 0) -> Scene:
    """Draw a scene whose every instance keeps at least ``min_visible_pixels``
    visible label pixels, resampling individual placements until satisfied.

    Fully determined by (config, sample_index). Raises SceneInfeasibleError
    after ``max_resample_rounds`` single-instance redraws.
    """
    rng = sample_rng(config.seed, sample_index)
    n = config.num_instances
    class_ids = np.repeat(np.arange(config.num_classes), config.instances_per_class)
    depth_ranks = rng.permutation(n)
    centers = rng.uniform(0.0, config.canvas_size, size=(n, 2))
    orientations = rng.uniform(0.0, 2.0 * np.pi, size=n)

    points = _label_pixel_centers(config)
    cover = _cover_stack(centers, orientations, class_ids, config, points)
    for round_idx in range(config.max_resample_rounds + 1):
        counts = _visible_counts(cover, depth_ranks)
        bad = np.flatnonzero(counts < config.min_visible_pixels)
        if bad.size == 0:
            break
        if round_idx == config.max_resample_rounds:
            raise SceneInfeasibleError(
                f"scene infeasible: {bad.size} instance(s) below "
                f"{config.min_visible_pixels} visible pixels after "
                f"{config.max_resample_rounds} resampling rounds "
                f"(canvas over-packed for {n} instances?)"
            )
        # redraw the worst-hidden instance; ties resolve to the lowest id
        victim = bad[np.argmin(counts[bad])]
        centers[victim] = rng.uniform(0.0, config.canvas_size, size=2)
        orientations[victim] = rng.uniform(0.0, 2.0 * np.pi)
        cover[victim] = shape_contains(
            config.classes[class_ids[victim]], centers[victim],
            orientations[victim], config.shape_scale, points,
        ).reshape(config.label_size, config.label_size)

    instances = tuple(
        ShapeInstance(
            instance_id=i,
            class_id=int(class_ids[i]),
            center=(float(centers[i, 0]), float(centers[i, 1])),
            orientation=float(orientations[i]),
            depth_rank=int(depth_ranks[i]),
        )
        for i in range(n)
    )
    return Scene(instances=instances)


def _render_image(scene: Scene, config: SceneConfig) -> np.ndarray:
    """Outline-only rendering: dark anti-aliased strokes on white background.

    A shape's outline is hidden wherever a strictly shallower shape's filled
    region covers the pixel (opaque shapes). Interiors stay at background
    intensity so instances are distinguished by outlines alone.
    """
    cs = config.canvas_size
    n = len(scene.instances)
    half_w = config.outline_width / 2.0
    margin = config.shape_scale + half_w + 2.0

    def bbox(center):
        x0 = max(int(np.floor(center[0] - margin)), 0)
        x1 = min(int(np.ceil(center[0] + margin)) + 1, cs)
        y0 = max(int(np.floor(center[1] - margin)), 0)
        y1 = min(int(np.ceil(center[1] + margin)) + 1, cs)
        return x0, x1, y0, y1

    def local_points(x0, x1, y0, y1):
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        xx, yy = np.meshgrid(xs, ys)
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    # minimum depth rank of any covering instance, per canvas pixel
    no_cover = n  # sentinel deeper than every rank
    min_rank = np.full((cs, cs), no_cover, dtype=np.int32)
    for inst in scene.instances:
        x0, x1, y0, y1 = bbox(inst.center)
        if x0 >= x1 or y0 >= y1:
            continue
        pts = local_points(x0, x1, y0, y1)
        inside = shape_contains(
            config.classes[inst.class_id], inst.center, inst.orientation,
            config.shape_scale, pts,
        ).reshape(y1 - y0, x1 - x0)
        sub = min_rank[y0:y1, x0:x1]
        np.minimum(sub, np.where(inside, inst.depth_rank, no_cover), out=sub)

    alpha = np.zeros((cs, cs), dtype=np.float64)
    for inst in scene.instances:
        x0, x1, y0, y1 = bbox(inst.center)
        if x0 >= x1 or y0 >= y1:
            continue
        pts = local_points(x0, x1, y0, y1)
        d = np.abs(shape_signed_distance(
            config.classes[inst.class_id], inst.center, inst.orientation,
            config.shape_scale, pts,
        )).reshape(y1 - y0, x1 - x0)
        coverage = np.clip(0.5 + (half_w - d), 0.0, 1.0)
        visible = min_rank[y0:y1, x0:x1] >= inst.depth_rank
        sub = alpha[y0:y1, x0:x1]
        np.maximum(sub, np.where(visible, coverage, 0.0), out=sub)

    return np.rint(255.0 * (1.0 - alpha)).astype(np.uint8)


def rasterize_scene(scene: Scene, config: SceneConfig,
                    render_image: bool = True) -> RenderedSample:
    """Rasterize a scene into the input image and exact layered label maps.

    Label maps are computed by sampling shape membership at label pixel
    centers (no anti-aliasing) and depth-sorting the covering instances.
    """
    centers = np.array([inst.center for inst in scene.instances])
    orientations = np.array([inst.orientation for inst in scene.instances])
    class_ids = np.array([inst.class_id for inst in scene.instances])
    depth_ranks = np.array([inst.depth_rank for inst in scene.instances])

    points = _label_pixel_centers(config)
    cover = _cover_stack(centers, orientations, class_ids, config, points)
    fg_inst, occ_inst = _layer_maps(cover, depth_ranks)

    class_lut = np.concatenate([[0], class_ids + 1]).astype(np.uint16)
    fg_class = class_lut[fg_inst]
    occ_class = class_lut[occ_inst]

    amodal_area = cover.reshape(len(scene.instances), -1).sum(axis=1)
    visible = np.bincount(fg_inst.ravel(), minlength=len(scene.instances) + 1)[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(amodal_area > 0, 1.0 - visible / amodal_area, 0.0)

    image = _render_image(scene, config) if render_image else None
    return RenderedSample(
        image=image,
        fg_class=fg_class,
        occ_class=occ_class,
        fg_instance=fg_inst,
        occ_instance=occ_inst,
        amodal_masks=cover,
        occlusion_fraction=q.astype(np.float64),
    )


def layered_gt_masks(rendered: RenderedSample, scene: Scene, layers: int) -> np.ndarray:
    """Per-instance masks of pixels where the instance is among the top
    ``layers`` covering instances. layers=1 gives visible masks; any value
    >= the deepest stack reproduces the amodal masks."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    cover = rendered.amodal_masks
    depth_ranks = scene.depth_ranks()
    count = np.zeros(cover.shape[1:], dtype=np.int32)
    out = np.zeros_like(cover)
    for i in np.argsort(depth_ranks):
        out[i] = cover[i] & (count < layers)
        count[cover[i]] += 1
    return out


def generate_dataset(config: SceneConfig, num_samples: int,
                     render_image: bool = True,
                     start_index: int = 0) -> list[DatasetSample]:
    """Generate and rasterize a deterministic sequence of samples."""
    out = []
    for i in range(start_index, start_index + num_samples):
        scene = generate_scene(config, sample_index=i)
        out.append(DatasetSample(scene=scene,
                                 rendered=rasterize_scene(scene, config, render_image)))
    return out
