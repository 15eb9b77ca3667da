"""Synthetic moving-sprite video generator with exact optical flow.

Every clip shows one sprite of a class-determining shape following a
class-determining motion pattern over a static textured background with one
or two static distractor sprites of non-class shapes.  Rendering uses hard
edges and integer displacements, so the ground-truth flow is exactly the
sprite's per-frame displacement on sprite pixels and zero elsewhere; warping
frame t by flow[t] reproduces frame t+1 on sprite pixels bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .config import stream_rng
from .errors import ConfigError, InputError


# ------------------------------------------------------------------ sprites

def _square(n):
    return np.ones((n, n), dtype=bool)


def _disc(n):
    mid = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    return (yy - mid) ** 2 + (xx - mid) ** 2 <= (n / 2) ** 2


def _cross(n):
    mid = (n - 1) // 2
    yy, xx = np.mgrid[0:n, 0:n]
    return (yy == mid) | (xx == mid)


def _ring(n):
    yy, xx = np.mgrid[0:n, 0:n]
    return (yy == 0) | (yy == n - 1) | (xx == 0) | (xx == n - 1)


def _triangle(n):
    yy, xx = np.mgrid[0:n, 0:n]
    return xx <= yy


def _diamond(n):
    mid = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    return np.abs(yy - mid) + np.abs(xx - mid) <= mid + 0.5


def _corners(n):
    half = n // 2
    yy, xx = np.mgrid[0:n, 0:n]
    return ((yy < half) & (xx < half)) | ((yy > n - 1 - half) & (xx > n - 1 - half))


SHAPES = {
    "square": _square,
    "disc": _disc,
    "cross": _cross,
    "ring": _ring,
    "triangle": _triangle,
    "diamond": _diamond,
    "corners": _corners,
}

# Class shapes are chosen for distinct coarse mass layouts (solid block,
# axis lines, border frame, diagonal blocks) so silhouettes stay separable
# after the backbone's spatial downsampling.
CLASS_SHAPES = ("square", "cross", "ring", "corners")
DISTRACTOR_SHAPES = ("disc", "diamond", "triangle")


# ------------------------------------------------------------------ motions

def _legs(steps, directions, leg):
    out = []
    i = 0
    while len(out) < steps:
        out.extend([directions[i % len(directions)]] * leg)
        i += 1
    return out[:steps]


def _drift_right(steps, speed):
    return [(speed, 0)] * steps


def _drift_down(steps, speed):
    return [(0, speed)] * steps


def _circular(steps, speed):
    # clockwise rectangular orbit: right, down, left, up
    leg = max(1, round(steps / 4))
    dirs = [(speed, 0), (0, speed), (-speed, 0), (0, -speed)]
    return _legs(steps, dirs, leg)


def _oscillate(steps, speed):
    leg = max(1, round(steps / 4))
    return _legs(steps, [(speed, 0), (-speed, 0)], leg)


def _static(steps, speed):
    return [(0, 0)] * steps


MOTIONS = {
    "drift-right": _drift_right,
    "drift-down": _drift_down,
    "circular": _circular,
    "oscillate": _oscillate,
    "static": _static,
}

CLASS_MOTIONS = ("drift-right", "drift-down", "circular", "oscillate")

STATIC_MOTIONS = {"static"}


# ------------------------------------------------------------------- config

@dataclass
class DatasetConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    sprite_size: int = 7
    shapes: tuple = CLASS_SHAPES
    motions: tuple = CLASS_MOTIONS
    train_per_class: int = 16
    test_per_class: int = 8
    speeds: tuple = (1, 2)
    distractor_counts: tuple = (1, 2)
    background_amplitude: float = 0.4

    def __post_init__(self):
        if self.sprite_size > min(self.height, self.width):
            raise InputError(
                f"sprite of size {self.sprite_size} does not fit a "
                f"{self.height}x{self.width} frame")
        if self.frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.frames}")
        unknown = [s for s in self.shapes if s not in SHAPES]
        unknown += [m for m in self.motions if m not in MOTIONS]
        if unknown:
            raise ConfigError(f"unknown shapes/motions: {unknown}")
        overlap = set(self.shapes) & set(DISTRACTOR_SHAPES)
        if overlap:
            raise ConfigError(f"distractor shapes may not be class shapes: {overlap}")

    @property
    def num_classes(self):
        return len(self.shapes) * len(self.motions)

    def label_of(self, shape, motion):
        return self.shapes.index(shape) * len(self.motions) + self.motions.index(motion)

    def class_name(self, label):
        shape = self.shapes[label // len(self.motions)]
        motion = self.motions[label % len(self.motions)]
        return f"{shape}/{motion}"

    def motion_of_label(self, label):
        return self.motions[label % len(self.motions)]

    def static_labels(self):
        return [l for l in range(self.num_classes)
                if self.motion_of_label(l) in STATIC_MOTIONS]

    def motion_only_pairs(self):
        """Label pairs sharing a shape but not a motion."""
        pairs = []
        nm = len(self.motions)
        for s in range(len(self.shapes)):
            for i in range(nm):
                for j in range(i + 1, nm):
                    pairs.append((s * nm + i, s * nm + j))
        return pairs


@dataclass
class SceneSpec:
    """Everything needed to render one clip deterministically."""
    shape: str
    motion: str
    speed: int
    start: tuple          # (x, y) of the sprite's top-left corner at frame 0
    color: tuple          # sprite rgb in [0, 1]
    distractors: list     # (shape, x, y, color) static sprites
    background_seed: int


@dataclass
class SyntheticSample:
    rgb: np.ndarray       # (T,H,W,3) float32 in [0,1]
    flow: np.ndarray      # (T,H,W,2) float32, (dx,dy) px/frame on sprite pixels
    label: int
    boxes: np.ndarray     # (T,4) int, (x0,y0,x1,y1) with exclusive ends


# -------------------------------------------------------------- trajectories

def _trajectory(config, motion, speed, start):
    """Integer positions for all frames; clamped to keep the sprite inside."""
    steps = MOTIONS[motion](config.frames - 1, speed)
    lim_x = config.width - config.sprite_size
    lim_y = config.height - config.sprite_size
    pos = [np.array(start, dtype=int)]
    for dx, dy in steps:
        raw = pos[-1] + (dx, dy)
        pos.append(np.array([np.clip(raw[0], 0, lim_x), np.clip(raw[1], 0, lim_y)]))
    return np.stack(pos)


def _draw_start(config, motion, speed, rng):
    """Uniform over starts that avoid clamping; degenerate spans pin the axis."""
    steps = MOTIONS[motion](config.frames - 1, speed)
    cum = np.concatenate([[(0, 0)], np.cumsum(steps, axis=0)])
    start = []
    for axis, limit in ((0, config.width - config.sprite_size),
                       (1, config.height - config.sprite_size)):
        lo = int(-cum[:, axis].min())
        hi = int(limit - cum[:, axis].max())
        if hi >= lo:
            start.append(int(rng.integers(lo, hi + 1)))
        else:
            start.append(int(np.clip((lo + hi) // 2, 0, limit)))
    return tuple(start)


# ---------------------------------------------------------------- rendering

def draw_scene_spec(config, label, rng):
    shape = config.shapes[label // len(config.motions)]
    motion = config.motions[label % len(config.motions)]
    speed = int(rng.choice(config.speeds))
    start = _draw_start(config, motion, speed, rng)
    color = tuple(rng.uniform(0.55, 1.0, size=3))
    count = int(rng.choice(config.distractor_counts))
    distractors = []
    for _ in range(count):
        dshape = str(rng.choice(DISTRACTOR_SHAPES))
        dx = int(rng.integers(0, config.width - config.sprite_size + 1))
        dy = int(rng.integers(0, config.height - config.sprite_size + 1))
        dcolor = tuple(rng.uniform(0.55, 1.0, size=3))
        distractors.append((dshape, dx, dy, dcolor))
    return SceneSpec(shape=shape, motion=motion, speed=speed, start=start,
                     color=color, distractors=distractors,
                     background_seed=int(rng.integers(0, 2 ** 31)))


def _stamp(frame, mask, x, y, color):
    n = mask.shape[0]
    frame[y:y + n, x:x + n][mask] = color


def render_clip(spec, config):
    """Render a SceneSpec into a SyntheticSample."""
    n = config.sprite_size
    t_frames, h, w = config.frames, config.height, config.width
    mask = SHAPES[spec.shape](n)
    positions = _trajectory(config, spec.motion, spec.speed, spec.start)

    bg_rng = np.random.default_rng(spec.background_seed)
    background = bg_rng.uniform(0.0, config.background_amplitude,
                                size=(h, w, 3)).astype(np.float32)
    for dshape, dx, dy, dcolor in spec.distractors:
        _stamp(background, SHAPES[dshape](n), dx, dy,
               np.asarray(dcolor, dtype=np.float32))

    color = np.asarray(spec.color, dtype=np.float32)
    rgb = np.empty((t_frames, h, w, 3), dtype=np.float32)
    flow = np.zeros((t_frames, h, w, 2), dtype=np.float32)
    boxes = np.zeros((t_frames, 4), dtype=np.int64)
    for t in range(t_frames):
        frame = background.copy()
        x, y = positions[t]
        _stamp(frame, mask, x, y, color)
        rgb[t] = frame
        boxes[t] = (x, y, x + n, y + n)
        if t < t_frames - 1:
            eff = positions[t + 1] - positions[t]
            flow[t, y:y + n, x:x + n][mask] = eff.astype(np.float32)
    flow[t_frames - 1] = flow[t_frames - 2]
    if spec.shape in config.shapes and spec.motion in config.motions:
        label = config.label_of(spec.shape, spec.motion)
    else:
        label = -1  # probe clip outside the label set
    return SyntheticSample(rgb=rgb, flow=flow, label=label, boxes=boxes)


# ------------------------------------------------------------------ dataset

class Dataset:
    """In-memory clip collection with aligned label and box tables."""

    def __init__(self, rgb, flow, labels, boxes, meta=None):
        self.rgb = rgb
        self.flow = flow
        self.labels = labels
        self.boxes = boxes
        self.meta = dict(meta or {})
        if not (len(rgb) == len(flow) == len(labels) == len(boxes)):
            raise InputError("dataset component lengths disagree")

    def __len__(self):
        return len(self.labels)

    def sample(self, i):
        return SyntheticSample(rgb=self.rgb[i], flow=self.flow[i],
                               label=int(self.labels[i]), boxes=self.boxes[i])

    @classmethod
    def from_samples(cls, samples, meta=None):
        return cls(rgb=np.stack([s.rgb for s in samples]),
                   flow=np.stack([s.flow for s in samples]),
                   labels=np.array([s.label for s in samples], dtype=np.int64),
                   boxes=np.stack([s.boxes for s in samples]),
                   meta=meta)


def generate_split(config, seed, split, per_class):
    """Class-balanced sample list with per-sample seed streams."""
    samples = []
    for label in range(config.num_classes):
        for idx in range(per_class):
            rng = stream_rng(seed, f"datagen:{split}", label, idx)
            spec = draw_scene_spec(config, label, rng)
            samples.append(render_clip(spec, config))
    return samples


def generate_dataset(config, seed):
    """Returns (train, test) Datasets with disjoint per-sample streams."""
    train = Dataset.from_samples(generate_split(config, seed, "train",
                                                config.train_per_class),
                                 meta={"split": "train", "seed": seed})
    test = Dataset.from_samples(generate_split(config, seed, "test",
                                               config.test_per_class),
                                meta={"split": "test", "seed": seed})
    return train, test


# ----------------------------------------------------------------- reversal

def _shift2d(field, dx, dy):
    """Translate a (H,W,C) field by integer (dx,dy), zero-filling edges."""
    out = np.zeros_like(field)
    h, w = field.shape[:2]
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = field[src_y, src_x]
    return out


def reverse_clip(sample):
    """Time-reverse a sample, recomputing the exact reversed-motion flow.

    The reversed flow at frame t is the negated original flow of the
    transition being undone, translated so its support sits where the sprite
    is in reversed frame t.  Applying reverse_clip twice returns a sample
    bit-identical to the input.
    """
    t_frames = sample.rgb.shape[0]
    rgb = sample.rgb[::-1].copy()
    boxes = sample.boxes[::-1].copy()
    flow = np.zeros_like(sample.flow)
    for t in range(t_frames - 1):
        k = t_frames - 2 - t
        dx = int(sample.boxes[k + 1, 0]) - int(sample.boxes[k, 0])
        dy = int(sample.boxes[k + 1, 1]) - int(sample.boxes[k, 1])
        flow[t] = -_shift2d(sample.flow[k], dx, dy)
    flow[t_frames - 1] = flow[t_frames - 2]
    return SyntheticSample(rgb=rgb, flow=flow, label=sample.label, boxes=boxes)


def reverse_dataset(dataset):
    reversed_samples = [reverse_clip(dataset.sample(i)) for i in range(len(dataset))]
    meta = dict(dataset.meta)
    meta["reversed"] = True
    return Dataset.from_samples(reversed_samples, meta=meta)


# ------------------------------------------------------------------- oracle

def warp_consistency_error(sample):
    """Worst pixel error of warping frame t by flow[t] against frame t+1.

    Checked on pixels with nonzero flow; exact rendering keeps this at 0.
    """
    t_frames, h, w, _ = sample.rgb.shape
    worst = 0.0
    for t in range(t_frames - 1):
        mask = np.any(sample.flow[t] != 0, axis=-1)
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        dx = sample.flow[t, ys, xs, 0].astype(int)
        dy = sample.flow[t, ys, xs, 1].astype(int)
        ty = ys + dy
        tx = xs + dx
        if ty.min() < 0 or ty.max() >= h or tx.min() < 0 or tx.max() >= w:
            return float("inf")
        diff = np.abs(sample.rgb[t + 1, ty, tx] - sample.rgb[t, ys, xs])
        worst = max(worst, float(diff.max()))
    return worst
