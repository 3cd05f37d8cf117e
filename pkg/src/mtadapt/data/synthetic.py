"""Procedural driving-like scenes with exact ground truth for all three tasks.

A scene is first sampled as a :class:`SceneLayout` (horizon, road band, lanes,
roadside blocks and objects), then rasterized into masks and boxes, and
finally rendered into a noisy RGB image. Everything is a pure function of
``(spec.rng_seed, index)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..exceptions import ConfigurationError
from ..tasks import DET, DRIV, IGNORE_INDEX, SEM, TASKS, check_task

DEFAULT_DETECTION_CLASSES = ("car", "truck", "bus", "pedestrian", "rider", "traffic sign")
DEFAULT_SEMANTIC_CLASSES = (
    "road",
    "sidewalk",
    "building",
    "vegetation",
    "sky",
    "vehicle",
    "person",
    "traffic sign",
)
DEFAULT_DRIVABLE_CLASSES = ("directly drivable", "alternatively drivable", "background")
DEFAULT_OBJECT_SEMANTICS = {
    "car": "vehicle",
    "truck": "vehicle",
    "bus": "vehicle",
    "pedestrian": "person",
    "rider": "person",
    "traffic sign": "traffic sign",
}

GROUND_TRUTH = "ground_truth"
PSEUDO = "pseudo"


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (64, 64)
    num_objects_range: tuple = (1, 4)
    detection_classes: tuple = DEFAULT_DETECTION_CLASSES
    semantic_classes: tuple = DEFAULT_SEMANTIC_CLASSES
    drivable_classes: tuple = DEFAULT_DRIVABLE_CLASSES
    drivable_background: str = "background"
    object_semantics: dict = field(default_factory=lambda: dict(DEFAULT_OBJECT_SEMANTICS))
    rng_seed: int = 0
    noise_std: float = 0.03

    def __post_init__(self):
        for name in ("image_size", "num_objects_range", "detection_classes",
                     "semantic_classes", "drivable_classes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "object_semantics", dict(self.object_semantics))
        self.validate()

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigurationError(f"image_size {self.image_size} must be positive multiples of 32")
        lo, hi = self.num_objects_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad num_objects_range {self.num_objects_range}")
        for name in ("detection_classes", "semantic_classes", "drivable_classes"):
            names = getattr(self, name)
            if not names:
                raise ConfigurationError(f"{name} must be non-empty")
            if len(set(names)) != len(names):
                raise ConfigurationError(f"{name} contains duplicates: {names}")
        if self.drivable_classes.count(self.drivable_background) != 1:
            raise ConfigurationError(
                f"drivable_classes must contain the background name {self.drivable_background!r} exactly once"
            )
        if len(self.drivable_classes) < 2:
            raise ConfigurationError("drivable_classes needs at least one non-background class")
        for det_name in self.detection_classes:
            target = self.object_semantics.get(det_name)
            if target not in self.semantic_classes:
                raise ConfigurationError(
                    f"detection class {det_name!r} maps to unknown semantic class {target!r}"
                )
        if not self.stuff_classes:
            raise ConfigurationError("semantic_classes needs at least one class not used by objects")
        if max(len(self.semantic_classes), len(self.drivable_classes)) >= IGNORE_INDEX:
            raise ConfigurationError("too many classes for the ignore index")

    @property
    def stuff_classes(self):
        """Semantic classes that are not the target of any detection class, in order."""
        used = set(self.object_semantics[n] for n in self.detection_classes)
        return tuple(c for c in self.semantic_classes if c not in used)

    def vocabulary(self, task):
        check_task(task)
        return list({DET: self.detection_classes, SEM: self.semantic_classes,
                     DRIV: self.drivable_classes}[task])

    def num_classes(self, task):
        return len(self.vocabulary(task))

    def to_dict(self):
        return {
            "image_size": list(self.image_size),
            "num_objects_range": list(self.num_objects_range),
            "detection_classes": list(self.detection_classes),
            "semantic_classes": list(self.semantic_classes),
            "drivable_classes": list(self.drivable_classes),
            "drivable_background": self.drivable_background,
            "object_semantics": dict(self.object_semantics),
            "rng_seed": int(self.rng_seed),
            "noise_std": float(self.noise_std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def class_vocabulary(task, spec: Optional[SceneSpec] = None):
    """Class names for ``task``; list position is the class index."""
    return (spec or SceneSpec()).vocabulary(task)


@dataclass
class ImageSample:
    """One image plus whichever annotations are present.

    ``boxes`` is an ``(n, 5)`` float32 array of ``(x1, y1, x2, y2, class)`` in
    pixel coordinates (``x2``/``y2`` exclusive). A missing annotation is ``None``.
    """

    image: np.ndarray
    boxes: Optional[np.ndarray] = None
    semantic_mask: Optional[np.ndarray] = None
    drivable_mask: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)
    index: int = -1
    pseudo_source: dict = field(default_factory=dict)

    @property
    def availability(self):
        return (self.boxes is not None, self.semantic_mask is not None, self.drivable_mask is not None)

    def annotation(self, task):
        check_task(task)
        return {DET: self.boxes, SEM: self.semantic_mask, DRIV: self.drivable_mask}[task]

    def has(self, task):
        return self.annotation(task) is not None

    def with_annotation(self, task, value, provenance=GROUND_TRUTH, source=None):
        """Copy of this sample with annotation ``task`` replaced (``None`` removes it)."""
        attr = {DET: "boxes", SEM: "semantic_mask", DRIV: "drivable_mask"}[check_task(task)]
        prov = dict(self.provenance)
        pseudo_source = dict(self.pseudo_source)
        if value is None:
            prov.pop(task, None)
            pseudo_source.pop(task, None)
        else:
            prov[task] = provenance
            if source is not None:
                pseudo_source[task] = source
        kwargs = dict(image=self.image, boxes=self.boxes, semantic_mask=self.semantic_mask,
                      drivable_mask=self.drivable_mask, provenance=prov, index=self.index,
                      pseudo_source=pseudo_source)
        kwargs[attr] = value
        return ImageSample(**kwargs)

    def check(self, spec: SceneSpec):
        """Raise ``ConfigurationError`` if an annotation breaks the sample invariants."""
        h, w = self.image.shape[:2]
        if self.boxes is not None:
            b = np.asarray(self.boxes)
            if b.ndim != 2 or b.shape[1] != 5:
                raise ConfigurationError(f"boxes must have shape (n, 5), got {b.shape}")
            if len(b) and not (
                np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])
                and np.all(b[:, :2] >= 0) and np.all(b[:, 2] <= w) and np.all(b[:, 3] <= h)
            ):
                raise ConfigurationError("box outside image or degenerate")
            if len(b) and not np.all((b[:, 4] >= 0) & (b[:, 4] < len(spec.detection_classes))):
                raise ConfigurationError("box class index out of range")
        for task, mask in ((SEM, self.semantic_mask), (DRIV, self.drivable_mask)):
            if mask is None:
                continue
            k = spec.num_classes(task)
            if mask.shape != (h, w):
                raise ConfigurationError(f"{task} mask shape {mask.shape} != image {(h, w)}")
            if not np.all((mask < k) | (mask == IGNORE_INDEX)) or np.any(mask < 0):
                raise ConfigurationError(f"{task} mask has invalid values")
        for task in TASKS:
            if self.has(task) != (task in self.provenance):
                raise ConfigurationError(f"provenance for {task} inconsistent with availability")


# Layout


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "rect" or "ellipse"
    det_class: int
    x1: int
    y1: int
    x2: int
    y2: int


@dataclass(frozen=True)
class SceneLayout:
    height: int
    width: int
    horizon: int
    sidewalk: int
    lane: tuple  # [start, end) columns of the directly drivable lane
    blocks: tuple  # (col_start, col_end, top_row, stuff_class_index)
    objects: tuple


def _ellipse_inside(xs, ys, obj):
    cx = 0.5 * (obj.x1 + obj.x2)
    cy = 0.5 * (obj.y1 + obj.y2)
    rx = 0.5 * (obj.x2 - obj.x1)
    ry = 0.5 * (obj.y2 - obj.y1)
    return ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0


def object_footprint(obj: SceneObject, height: int, width: int):
    """Boolean ``(height, width)`` mask of pixels covered by ``obj``."""
    ys, xs = np.mgrid[0:height, 0:width]
    inside = (xs >= obj.x1) & (xs < obj.x2) & (ys >= obj.y1) & (ys < obj.y2)
    if obj.kind == "ellipse":
        inside &= _ellipse_inside(xs, ys, obj)
    return inside


def sample_layout(spec: SceneSpec, index: int) -> SceneLayout:
    if index < 0:
        raise ConfigurationError(f"scene index must be >= 0, got {index}")
    rng = np.random.default_rng([int(spec.rng_seed) & 0xFFFFFFFFFFFFFFFF, int(index), 1])
    h, w = spec.image_size
    horizon = int(rng.integers(int(0.35 * h), int(0.5 * h) + 1))
    sidewalk = int(rng.integers(max(1, w // 16), max(2, w // 8) + 1))
    road_w = w - 2 * sidewalk
    lane_w = int(rng.integers(max(2, road_w // 4), max(3, road_w // 2) + 1))
    lane_start = sidewalk + int(rng.integers(0, road_w - lane_w + 1))
    lane = (lane_start, lane_start + lane_w)

    stuff = spec.stuff_classes
    upper = [spec.semantic_classes.index(c) for c in stuff[2:-1]] if len(stuff) > 3 else []
    blocks = []
    col = 0
    while col < w and upper:
        bw = int(rng.integers(max(2, w // 10), max(3, w // 4) + 1))
        end = min(w, col + bw)
        if rng.random() < 0.75:
            top = int(rng.integers(max(0, horizon - h // 3), max(1, horizon - 2)))
            blocks.append((col, end, top, int(upper[rng.integers(len(upper))])))
        col = end

    lo, hi = spec.num_objects_range
    n_obj = int(rng.integers(lo, hi + 1))
    n_det = len(spec.detection_classes)
    objects = []
    occupied = np.zeros((h, w), dtype=bool)
    attempts = 0
    while len(objects) < n_obj and attempts < 200:
        attempts += 1
        cls = int(rng.integers(n_det))
        ow = int(rng.integers(max(3, w // 12), max(4, w // 4) + 1))
        oh = int(rng.integers(max(3, h // 12), max(4, h // 4) + 1))
        x1 = int(rng.integers(0, w - ow + 1))
        y_lo = max(0, horizon - oh)
        y1 = int(rng.integers(y_lo, h - oh + 1))
        kind = "ellipse" if rng.random() < 0.4 else "rect"
        obj = SceneObject(kind, cls, x1, y1, x1 + ow, y1 + oh)
        # one-pixel margin so footprints never touch
        if occupied[max(0, y1 - 1):y1 + oh + 1, max(0, x1 - 1):x1 + ow + 1].any():
            continue
        occupied[y1:y1 + oh, x1:x1 + ow] = True
        objects.append(obj)
    return SceneLayout(h, w, horizon, sidewalk, lane, tuple(blocks), tuple(objects))


def rasterize(layout: SceneLayout, spec: SceneSpec):
    """Render ``layout`` into ``(semantic_mask, drivable_mask, boxes)``."""
    h, w = layout.height, layout.width
    stuff = [spec.semantic_classes.index(c) for c in spec.stuff_classes]
    road = stuff[0]
    edge = stuff[1] if len(stuff) > 1 else road
    sky = stuff[-1]
    sem = np.full((h, w), sky, dtype=np.int64)
    for c0, c1, top, cls in layout.blocks:
        sem[top:layout.horizon, c0:c1] = cls
    sem[layout.horizon:, :] = road
    sem[layout.horizon:, :layout.sidewalk] = edge
    sem[layout.horizon:, w - layout.sidewalk:] = edge

    drivable_fg = [i for i, c in enumerate(spec.drivable_classes) if c != spec.drivable_background]
    bg = spec.drivable_classes.index(spec.drivable_background)
    direct = drivable_fg[0]
    alternative = drivable_fg[1] if len(drivable_fg) > 1 else direct
    driv = np.full((h, w), bg, dtype=np.int64)
    driv[layout.horizon:, layout.sidewalk:w - layout.sidewalk] = alternative
    driv[layout.horizon:, layout.lane[0]:layout.lane[1]] = direct

    boxes = []
    for obj in layout.objects:
        fp = object_footprint(obj, h, w)
        sem_cls = spec.semantic_classes.index(spec.object_semantics[spec.detection_classes[obj.det_class]])
        sem[fp] = sem_cls
        driv[fp] = bg
        ys, xs = np.nonzero(fp)
        boxes.append((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1, obj.det_class))
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 5)
    return sem, driv, boxes


def _palette(n, rng_key):
    rng = np.random.default_rng(rng_key)
    return rng.uniform(0.1, 0.9, size=(n, 3))


def render(layout: SceneLayout, spec: SceneSpec, sem, driv, index: int):
    """RGB image in [0, 1] of shape (H, W, 3)."""
    sem_colors = _palette(len(spec.semantic_classes), [7, len(spec.semantic_classes)])
    det_colors = _palette(len(spec.detection_classes), [11, len(spec.detection_classes)])
    image = sem_colors[sem]
    bg = spec.drivable_classes.index(spec.drivable_background)
    # lanes get distinguishable tints so the drivable split is visible
    tints = np.linspace(-0.15, 0.15, len(spec.drivable_classes))
    road_px = driv != bg
    image[road_px] += tints[driv[road_px]][:, None]
    for obj in layout.objects:
        fp = object_footprint(obj, layout.height, layout.width)
        image[fp] = det_colors[obj.det_class]
    rng = np.random.default_rng([int(spec.rng_seed) & 0xFFFFFFFFFFFFFFFF, int(index), 2])
    image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec, index: int) -> ImageSample:
    """Fully annotated synthetic sample number ``index``."""
    spec.validate()
    layout = sample_layout(spec, index)
    sem, driv, boxes = rasterize(layout, spec)
    image = render(layout, spec, sem, driv, index)
    return ImageSample(
        image=image,
        boxes=boxes,
        semantic_mask=sem,
        drivable_mask=driv,
        provenance={t: GROUND_TRUTH for t in TASKS},
        index=int(index),
    )


def generate_scenes(spec: SceneSpec, n: int, start: int = 0):
    return [generate_scene(spec, i) for i in range(start, start + n)]
