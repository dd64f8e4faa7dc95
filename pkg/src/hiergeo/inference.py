"""Prediction and distance-threshold evaluation.

Inference picks the scene whose query rows have the highest mean confidence
(channel 0), reads each hierarchy's class probabilities at that scene row,
and scores every finest-level class by the product of its own probability and
the probabilities of its ancestors.

Image preprocessing for evaluation: bilinear resize (half-pixel centres, no
antialiasing, source coordinates clamped to the image) to
``round(image_size * 256 / 224)`` square, then either the centre crop or ten
crops of ``image_size``. Single-crop inputs that already have the model's
resolution are used unchanged. Ten-crop order is top-left, top-right, bottom-left,
bottom-right, centre, followed by the horizontal mirror of each of those five
in the same order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geocell import GeoPoint, PartitionStack
from .model import ConfigError, ForwardOutput, GeoDecoderModel

EARTH_RADIUS_KM = 6371.0
THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)
THRESHOLD_NAMES = ("street", "city", "region", "country", "continent")


class CompositionError(ValueError):
    pass


# -- geodesy -------------------------------------------------------------------

def haversine_km(a, b) -> float:
    """Great-circle distance between two GeoPoints on a sphere of radius ``EARTH_RADIUS_KM``."""
    return float(haversine_km_array(np.array([[a.lat_deg, a.lon_deg]]), np.array([[b.lat_deg, b.lon_deg]]))[0])


def haversine_km_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise distances between ``[N, 2]`` arrays of (lat, lon) degrees."""
    a = np.radians(np.asarray(a, dtype=np.float64).reshape(-1, 2))
    b = np.radians(np.asarray(b, dtype=np.float64).reshape(-1, 2))
    dlat = b[:, 0] - a[:, 0]
    dlon = b[:, 1] - a[:, 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[:, 0]) * np.cos(b[:, 0]) * np.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


# -- scene selection and composition ---------------------------------------------

def select_scenes(out: ForwardOutput) -> np.ndarray:
    """Per item, the scene with the highest mean channel-0 value (lowest index on ties)."""
    b = out.queries.shape[0]
    if out.S == 0 or out.scene_logits is None:
        return np.zeros(b, dtype=np.int64)
    return np.argmax(out.scene_logits.data, axis=-1)


def select_scene(out: ForwardOutput, item: int = 0) -> int:
    return int(select_scenes(out)[item])


def chain_table(parent_maps: Sequence[np.ndarray], class_counts: Sequence[int]) -> np.ndarray:
    """``[C_fine, H]`` ancestor indices, validated against the class counts."""
    H = len(class_counts)
    if len(parent_maps) != H - 1:
        raise CompositionError(f"{H} hierarchies need {H - 1} parent maps, got {len(parent_maps)}")
    n = int(class_counts[-1])
    table = np.zeros((n, H), dtype=np.int64)
    idx = np.arange(n)
    table[:, -1] = idx
    for h in range(H - 2, -1, -1):
        pm = np.asarray(parent_maps[h], dtype=np.int64)
        if pm.shape != (class_counts[h + 1],):
            raise CompositionError(f"parent map {h} has {pm.shape[0]} entries for {class_counts[h + 1]} classes")
        if pm.size and (pm.min() < 0 or pm.max() >= class_counts[h]):
            raise CompositionError(f"dangling parent in map {h}: indices must lie in [0, {class_counts[h]})")
        idx = pm[idx]
        table[:, h] = idx
    return table


def compose(per_h_probs: Sequence[np.ndarray], stack) -> np.ndarray:
    """Score each finest class by the product of probabilities along its ancestor chain.

    ``per_h_probs`` holds one ``[..., C_h]`` array per hierarchy (coarse to
    fine); ``stack`` is a :class:`PartitionStack` or a list of parent maps.
    Scores are not renormalised.
    """
    parent_maps = stack.parent_maps if isinstance(stack, PartitionStack) else stack
    probs = [np.asarray(p, dtype=np.float64) for p in per_h_probs]
    counts = [p.shape[-1] for p in probs]
    if isinstance(stack, PartitionStack) and counts != stack.classes_per_hierarchy:
        raise CompositionError(f"probability widths {counts} do not match classes {stack.classes_per_hierarchy}")
    table = chain_table(parent_maps, counts)
    scores = probs[-1].copy()
    for h in range(len(probs) - 2, -1, -1):
        scores = scores * probs[h][..., table[:, h]]
    return scores


@dataclass
class Prediction:
    fine_class: int
    point: GeoPoint
    composed_scores: np.ndarray = field(repr=False)
    scene: int


# -- image preprocessing -------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``[C, H, W]`` array with half-pixel centres."""
    c, h, w = image.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def _crop_origins(h: int, w: int, size: int) -> list[tuple[int, int]]:
    ch, cw = int(round((h - size) / 2.0)), int(round((w - size) / 2.0))
    return [(0, 0), (0, w - size), (h - size, 0), (h - size, w - size), (ch, cw)]


def ten_crop(image: np.ndarray, size: int = 224) -> np.ndarray:
    """``[10, C, size, size]``: four corners, centre, then their mirrors."""
    image = np.asarray(image)
    _, h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size} crop")
    crops = [image[:, y:y + size, x:x + size] for y, x in _crop_origins(h, w, size)]
    crops += [c[:, :, ::-1] for c in crops]
    return np.stack(crops)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size} crop")
    y, x = _crop_origins(h, w, size)[4]
    return image[:, y:y + size, x:x + size]


def resize_size(image_size: int) -> int:
    return int(round(image_size * 256 / 224))


def eval_views(image: np.ndarray, image_size: int, use_tencrop: bool) -> np.ndarray:
    """Crops fed to the model for one image: ``[1 or 10, C, image_size, image_size]``.

    A single-crop view of an image already at model resolution is the image
    itself; everything else goes through the resize-then-crop path.
    """
    r = resize_size(image_size)
    img = np.asarray(image, dtype=np.float64)
    if not use_tencrop and img.shape[1:] == (image_size, image_size):
        return img[None]
    if img.shape[1:] != (r, r):
        img = resize_bilinear(img, r, r)
    if use_tencrop:
        return ten_crop(img, image_size)
    return center_crop(img, image_size)[None]


# -- prediction -----------------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_batch(inputs, model: GeoDecoderModel, stack: PartitionStack, use_tencrop: bool = False) -> list[Prediction]:
    """Predict a batch of images ``[B, C, H, W]`` or precomputed tokens ``[B, T, D_in]``.

    Crop probabilities are averaged per hierarchy after the scene has been
    chosen from the crop-averaged scene confidences.
    """
    model.check_classes(stack.classes_per_hierarchy)
    cfg = model.config
    inputs = np.asarray(inputs)
    if cfg.encoder.kind == "image":
        views = np.stack([eval_views(img, cfg.encoder.image_size, use_tencrop) for img in inputs])
    else:
        if use_tencrop:
            raise ConfigError("ten-crop evaluation needs an image encoder")
        views = inputs[:, None]
    b, k = views.shape[:2]
    with nx.no_grad():
        out = model(views.reshape(b * k, *views.shape[2:]))
    if out.S > 0:
        scenes = np.argmax(out.scene_logits.data.reshape(b, k, -1).mean(axis=1), axis=-1)
    else:
        scenes = np.zeros(b, dtype=np.int64)
    per_h = []
    for logits in out.geo_logits:
        lg = logits.data.reshape(b, k, logits.shape[1], -1)[np.arange(b), :, scenes]  # [B, K, C]
        per_h.append(_softmax(lg).mean(axis=1))
    scores = compose(per_h, stack)
    fine = np.argmax(scores, axis=-1)
    centroids = stack.finest.centroids
    return [Prediction(int(f), centroids[int(f)], scores[i], int(scenes[i])) for i, f in enumerate(fine)]


def predict(image, model: GeoDecoderModel, stack: PartitionStack, use_tencrop: bool = False) -> Prediction:
    return predict_batch(np.asarray(image)[None], model, stack, use_tencrop)[0]


def predict_many(inputs, model, stack, use_tencrop=False, batch_size=16, threads=1) -> list[Prediction]:
    """Chunked prediction; chunks run on a thread pool when ``threads > 1``."""
    inputs = np.asarray(inputs)
    chunks = [inputs[i:i + batch_size] for i in range(0, len(inputs), batch_size)]
    run = lambda chunk: predict_batch(chunk, model, stack, use_tencrop)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [p for part in parts for p in part]


# -- evaluation ----------------------------------------------------------------------

@dataclass
class EvalReport:
    thresholds_km: tuple[float, ...]
    accuracy: list[float]
    n: int
    hits: list[int]

    def to_dict(self) -> dict:
        return {
            "thresholds_km": list(self.thresholds_km),
            "names": list(THRESHOLD_NAMES[: len(self.thresholds_km)]),
            "accuracy": self.accuracy,
            "hits": self.hits,
            "n": self.n,
        }


def _as_points(items) -> np.ndarray:
    rows = []
    for p in items:
        if isinstance(p, Prediction):
            p = p.point
        if isinstance(p, GeoPoint):
            rows.append((p.lat_deg, p.lon_deg))
        else:
            rows.append(tuple(p))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def evaluate(predictions, ground_truth, thresholds_km: Sequence[float] = THRESHOLDS_KM) -> EvalReport:
    """Fraction of images whose error is at most each threshold."""
    pred, gt = _as_points(predictions), _as_points(ground_truth)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions but {len(gt)} ground-truth points")
    d = haversine_km_array(pred, gt)
    hits = [int(np.count_nonzero(d <= t)) for t in thresholds_km]
    n = len(d)
    acc = [h / n if n else 0.0 for h in hits]
    return EvalReport(tuple(float(t) for t in thresholds_km), acc, n, hits)


def prediction_record(image_id, pred: Prediction, truth: GeoPoint | None) -> dict:
    rec = {
        "id": image_id,
        "lat": pred.point.lat_deg,
        "lon": pred.point.lon_deg,
        "fine_class": pred.fine_class,
        "scene": pred.scene,
    }
    if truth is not None:
        err = haversine_km(pred.point, truth)
        rec["error_km"] = err
        rec["hits"] = {name: bool(err <= t) for name, t in zip(THRESHOLD_NAMES, THRESHOLDS_KM)}
    return rec


def write_jsonl(path, records, extra: dict | None = None) -> None:
    with open(Path(path), "w") as fh:
        for rec in records:
            fh.write(json.dumps({**rec, **(extra or {})}, sort_keys=True) + "\n")
