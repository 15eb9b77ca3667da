"""Evaluation protocols: accuracy, attention localization, map export.

Accuracy is averaged per class. Localization sweeps every distinct
attention value as a detection threshold on maps rescaled to a fixed
resolution, scoring predicted pixels against the sprite box with a
tolerance zone that compensates for the coarse attention grid.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from .errors import EvaluationError, InputError
from .harness import model_from_checkpoint
from .model import StudentModel, TeacherModel

EVAL_RESOLUTION = 32
TOLERANCE_BASE = 10  # pixels at the 56x56 reference scale


# ------------------------------------------------------------------ accuracy

def _clips_for(model, dataset):
    if isinstance(model, TeacherModel):
        if dataset.flow.shape[-1] != 2:
            raise EvaluationError("teacher evaluation needs two-channel flow clips")
        return dataset.flow
    if dataset.rgb.shape[-1] != 3:
        raise EvaluationError("student evaluation needs three-channel colour clips")
    return dataset.rgb


def _forward_dist(model, clips, flow=None, teacher=None):
    override = None
    if teacher is not None:
        override = teacher.reference_attention(ad.Tensor(flow)).values
    if isinstance(model, TeacherModel):
        return model.forward(ad.Tensor(clips)).dist
    return model.forward(ad.Tensor(clips), motion_override=override).dist


def _needs_teacher(ckpt_config):
    return ckpt_config.role == "student-rgb-oracle-attn"


def mean_class_accuracy(pred, labels):
    """Accuracy averaged over the classes present in the labels."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise InputError("prediction and label counts disagree")
    per_class = [np.mean(pred[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(per_class))


def predict_labels(ckpt, dataset, teacher=None, batch_size=16):
    """Argmax class predictions of a checkpointed model over a dataset."""
    model, config = model_from_checkpoint(ckpt)
    teacher_model = None
    if _needs_teacher(config):
        if teacher is None:
            raise EvaluationError("this checkpoint substitutes reference attention "
                                  "maps; pass the teacher checkpoint")
        teacher_model, tconf = model_from_checkpoint(teacher)
        if tconf.role != "teacher-flow":
            raise EvaluationError(f"reference checkpoint has role {tconf.role!r}")
    clips = _clips_for(model, dataset)
    preds = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        flow = dataset.flow[sl] if teacher_model is not None else None
        dist = _forward_dist(model, clips[sl], flow=flow, teacher=teacher_model)
        preds.append(np.argmax(dist.values.data, axis=-1))
    return np.concatenate(preds)


def evaluate_accuracy(ckpt, dataset, reversed_clips=False, teacher=None,
                      batch_size=16):
    """Mean per-class accuracy of a checkpointed model on a dataset.

    reversed_clips=True evaluates on time-reversed copies of every sample.
    The attention-bypass student needs the teacher checkpoint to supply its
    motion maps (and therefore reads the dataset's flow at test time).
    """
    if reversed_clips:
        dataset = dg.reverse_dataset(dataset)
    pred = predict_labels(ckpt, dataset, teacher=teacher, batch_size=batch_size)
    return mean_class_accuracy(pred, dataset.labels)


def arrow_of_time_report(ckpt, dataset, teacher=None):
    """Forward vs reversed accuracy and their gap."""
    forward = evaluate_accuracy(ckpt, dataset, teacher=teacher)
    backward = evaluate_accuracy(ckpt, dataset, reversed_clips=True, teacher=teacher)
    return {"forward": forward, "reversed": backward, "drop": forward - backward}


# ------------------------------------------------------------------ maps

def motion_attention_maps(ckpt, dataset, teacher=None, batch_size=16):
    """Test-time motion-head maps for every clip, shape (N, T_grid, H, W)."""
    model, config = model_from_checkpoint(ckpt)
    teacher_model = None
    if _needs_teacher(config):
        if teacher is None:
            raise EvaluationError("this checkpoint substitutes reference attention "
                                  "maps; pass the teacher checkpoint")
        teacher_model, _ = model_from_checkpoint(teacher)
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        if isinstance(model, TeacherModel):
            maps = model.forward(ad.Tensor(dataset.flow[sl])).attention
        elif teacher_model is not None:
            maps = teacher_model.reference_attention(ad.Tensor(dataset.flow[sl]))
        else:
            maps = model.forward(ad.Tensor(dataset.rgb[sl])).attn_motion
        out.append(np.asarray(maps.data, dtype=np.float64))
    return np.concatenate(out)


def bilinear_resize(plane, out_h, out_w):
    """Align-corners bilinear interpolation of a 2-D array."""
    in_h, in_w = plane.shape
    ys = np.linspace(0, in_h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, in_w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = plane[np.ix_(y0, x0)] * (1 - wx) + plane[np.ix_(y0, x1)] * wx
    bot = plane[np.ix_(y1, x0)] * (1 - wx) + plane[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def expand_map_to_frames(amap, frames):
    """Repeat grid slices to per-frame maps by nearest temporal assignment."""
    t_grid = amap.shape[0]
    idx = np.minimum((np.arange(frames) * t_grid) // frames, t_grid - 1)
    return amap[idx]


# ------------------------------------------------------------------ pr curve

@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass
class LocalizationReport:
    curve: list
    best: PRPoint
    per_class: dict
    resolution: int
    tolerance: int

    def lines(self, class_names=None):
        """Machine-readable rows: class threshold precision recall f1."""
        rows = []
        for label in sorted(self.per_class):
            p = self.per_class[label]
            name = class_names(label) if class_names else str(label)
            rows.append(f"{name} {p.threshold:.9g} {p.precision:.6f} "
                        f"{p.recall:.6f} {p.f1:.6f}")
        return rows


def _box_masks(box, scale_x, scale_y, resolution, tolerance):
    x0, y0, x1, y1 = box
    sx0 = int(np.floor(x0 * scale_x))
    sy0 = int(np.floor(y0 * scale_y))
    sx1 = max(sx0 + 1, int(np.ceil(x1 * scale_x)))
    sy1 = max(sy0 + 1, int(np.ceil(y1 * scale_y)))
    tight = np.zeros((resolution, resolution), dtype=bool)
    tight[max(0, sy0):min(resolution, sy1), max(0, sx0):min(resolution, sx1)] = True
    wide = np.zeros((resolution, resolution), dtype=bool)
    wide[max(0, sy0 - tolerance):min(resolution, sy1 + tolerance),
         max(0, sx0 - tolerance):min(resolution, sx1 + tolerance)] = True
    return tight, wide


def _sweep(values, masks, thresholds):
    """Counts of pixels >= each threshold, total and within each named mask.

    Sorting once descending makes every threshold a prefix of the array, so
    cumulative sums give all counts for the whole sweep.
    """
    order = np.argsort(values, kind="stable")[::-1]
    sorted_vals = values[order]
    counts = len(values) - np.searchsorted(sorted_vals[::-1], thresholds, side="left")
    hits = {}
    for name, m in masks.items():
        csum = np.cumsum(m[order].astype(np.int64))
        hits[name] = np.where(counts > 0, csum[np.maximum(counts - 1, 0)], 0)
    return counts, hits


def localization_pr(maps, boxes, frame_size, resolution=EVAL_RESOLUTION,
                    tolerance_base=TOLERANCE_BASE, labels=None,
                    recall_dilated=False):
    """PR curve of thresholded attention against sprite boxes.

    maps: (N, T_grid, H, W) per-slice attention distributions.
    boxes: (N, T_frames, 4) exclusive-end pixel boxes at frame resolution.
    A predicted pixel counts as correct inside the tolerance-dilated box;
    recall is scored against the tight box unless recall_dilated is set.
    Returns a LocalizationReport; per-class entries need `labels`.
    """
    if len(maps) != len(boxes) or len(maps) == 0:
        raise InputError("need one box track per attention map")
    frame_h, frame_w = frame_size
    tolerance = int(round(tolerance_base * resolution / 56))
    scale_x = resolution / frame_w
    scale_y = resolution / frame_h

    all_vals, all_tight, all_wide, clip_ids = [], [], [], []
    for i, (amap, track) in enumerate(zip(maps, boxes)):
        frames = len(track)
        per_frame = expand_map_to_frames(np.asarray(amap, dtype=np.float64), frames)
        for t in range(frames):
            plane = bilinear_resize(per_frame[t], resolution, resolution)
            tight, wide = _box_masks(track[t], scale_x, scale_y, resolution, tolerance)
            all_vals.append(plane.ravel())
            all_tight.append(tight.ravel())
            all_wide.append(wide.ravel())
            clip_ids.append(np.full(plane.size, i, dtype=np.int32))
    values = np.concatenate(all_vals)
    tight = np.concatenate(all_tight)
    wide = np.concatenate(all_wide)
    clip_ids = np.concatenate(clip_ids)

    recall_mask = wide if recall_dilated else tight

    def curve_for(mask):
        vals = values[mask]
        thresholds = np.unique(vals)
        counts, hits = _sweep(vals, {"wide": wide[mask],
                                     "recall": recall_mask[mask]}, thresholds)
        denom = recall_mask[mask].sum()
        points = []
        for th, n, hit_w, hit_r in zip(thresholds, counts,
                                       hits["wide"], hits["recall"]):
            precision = float(hit_w / n) if n else 0.0
            recall = float(hit_r / denom) if denom else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            points.append(PRPoint(float(th), precision, recall, f1))
        return points

    full = curve_for(np.ones(len(values), dtype=bool))
    best = max(full, key=lambda p: p.f1)
    per_class = {}
    if labels is not None:
        labels = np.asarray(labels)
        for label in np.unique(labels):
            member = np.isin(clip_ids, np.nonzero(labels == label)[0])
            pts = curve_for(member)
            per_class[int(label)] = max(pts, key=lambda p: p.f1)
    return LocalizationReport(curve=full, best=best, per_class=per_class,
                              resolution=resolution, tolerance=tolerance)


def center_prior_baseline(grid_shape, resolution=EVAL_RESOLUTION, sigma=None):
    """Per-slice-normalized isotropic Gaussian centered on the frame."""
    if sigma is None:
        sigma = resolution / 4
    if sigma <= 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    t = grid_shape[0]
    coords = np.arange(resolution) - (resolution - 1) / 2
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.broadcast_to(g, (t, resolution, resolution)).copy()


# ------------------------------------------------------------------ export

def export_attention(amap, path, fmt="pgm"):
    """Write one clip's map as per-slice PGM images or a single CSV.

    pgm scales each slice so its max lands at 255; csv stores exact values
    row-major under a `t h w` dims header.
    """
    amap = np.asarray(amap, dtype=np.float64)
    if amap.ndim != 3:
        raise InputError(f"expected one clip's (T,H,W) map, got shape {amap.shape}")
    t, h, w = amap.shape
    written = []
    if fmt == "pgm":
        for i in range(t):
            plane = amap[i]
            peak = plane.max()
            scaled = np.zeros_like(plane) if peak <= 0 else plane / peak * 255.0
            pixels = np.round(scaled).astype(np.uint8)
            target = f"{path}_t{i}.pgm"
            with open(target, "wb") as fh:
                fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
                fh.write(pixels.tobytes())
            written.append(target)
    elif fmt == "csv":
        target = path if path.endswith(".csv") else path + ".csv"
        with open(target, "w") as fh:
            fh.write(f"# dims {t} {h} {w}\n")
            for plane in amap:
                for row in plane:
                    fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
        written.append(target)
    else:
        raise InputError(f"unknown export format {fmt!r}")
    return written


def read_attention_csv(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[:2] != ["#", "dims"]:
            raise InputError(f"missing dims header in {path}")
        t, h, w = (int(x) for x in header[2:])
        rows = [np.array(line.strip().split(","), dtype=np.float64) for line in fh]
    flat = np.concatenate(rows)
    if flat.size != t * h * w:
        raise InputError(f"csv holds {flat.size} values, dims say {t * h * w}")
    return flat.reshape(t, h, w)


def write_report(path, lines, header=None):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        if header:
            for line in header:
                fh.write(f"# {line}\n")
        for line in lines:
            fh.write(line + "\n")
