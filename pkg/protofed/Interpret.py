import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .Model import ParamGroups, class_identity, model_forward
from .RunSettings import BackboneConfig
from .SiteData import SiteDataset
from .Tensor import get_dtype, inference_mode
from .image_utils import diverging_palette, draw_box, save_pnm, to_rgb, upsample_bilinear
from .protofed_aux import Box, ConfigurationError

logger = logging.getLogger(__name__)

EXPLANATION_HEADER = ["prototype", "class", "score", "box_x", "box_y", "box_w",
                      "box_h"]
LOCALIZATION_HEADER = ["image", "label", "prototype", "iou", "box_x", "box_y",
                       "box_w", "box_h", "truth_x", "truth_y", "truth_w",
                       "truth_h"]
LOCALIZATION_IOU = 0.3


@dataclass
class PrototypeActivation(object):
    index: int
    class_identity: int
    similarity_map: np.ndarray
    heatmap: np.ndarray
    score: float
    box: Box
    degenerate: bool = False

    def __repr__(self):
        return "'PrototypeActivation: prototype {} (class {}), score {:.4g}, {}'".format(
            self.index, self.class_identity, self.score, self.box)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    span = np.ptp(values)
    if span == 0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def activation_bbox(heatmap: np.ndarray, percentile: float = 95.0
                    ) -> tuple[Box, bool]:
    """Smallest rectangle covering every pixel at or above the percentile.

    Returns the box and a flag that is set when the map is constant, in which
    case the box spans the whole map.
    """
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2 or heatmap.size == 0:
        raise ConfigurationError(
            f"activation_bbox expects a nonempty 2-d map, got {heatmap.shape}")
    h, w = heatmap.shape
    if np.ptp(heatmap) == 0:
        logger.warning("constant activation map, using the full %dx%d box", w, h)
        return Box(0, 0, w, h), True
    mask = heatmap >= np.percentile(heatmap, percentile)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1),
               int(rows[-1] - rows[0] + 1)), False


def iou(a: Box, b: Box) -> float:
    if min(a.w, a.h, b.w, b.h) < 0:
        raise ConfigurationError(f"boxes need non-negative extents: {a}, {b}")
    iw = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def prototype_activations(image: np.ndarray, params: ParamGroups,
                          config: BackboneConfig, percentile: float = 95.0
                          ) -> tuple[list, int]:
    """Activations of every prototype for one C×H×W image, in prototype
    order, and the predicted class."""
    image = np.asarray(image, dtype=get_dtype())
    if image.ndim == 2:
        image = image[None]
    with inference_mode():
        out = model_forward(image[None], params, config)
    identity = class_identity(config)
    target = image.shape[-2:]
    activations = []
    for j in range(out.scores.shape[1]):
        similarity = -out.distance_maps.data[0, j].astype(np.float64)
        heatmap = normalize_map(upsample_bilinear(similarity, target))
        box, degenerate = activation_bbox(heatmap, percentile)
        activations.append(PrototypeActivation(
            j, int(identity[j]), similarity, heatmap,
            float(out.scores.data[0, j]), box, degenerate))
    return activations, int(out.logits.data[0].argmax())


def explain(image: np.ndarray, params: ParamGroups, config: BackboneConfig,
            top_k: int = 3, percentile: float = 95.0) -> list:
    """The ``top_k`` prototypes by score, highest first."""
    if top_k < 1:
        raise ConfigurationError("top_k must be >= 1")
    activations, _ = prototype_activations(image, params, config, percentile)
    order = sorted(activations, key=lambda a: (-a.score, a.index))
    return order[:top_k]


def top_class_activation(image: np.ndarray, params: ParamGroups,
                         config: BackboneConfig, target: Optional[int] = None,
                         percentile: float = 95.0) -> PrototypeActivation:
    """Highest-scoring prototype of class ``target`` (default: the predicted
    class)."""
    activations, predicted = prototype_activations(image, params, config,
                                                   percentile)
    target = predicted if target is None else target
    candidates = [a for a in activations if a.class_identity == target]
    if not candidates:
        raise ConfigurationError(f"class {target} has no prototypes")
    return max(candidates, key=lambda a: (a.score, -a.index))


def render_overlay(image: np.ndarray, activation: PrototypeActivation
                   ) -> np.ndarray:
    return draw_box(to_rgb(image), activation.box)


def render_panel(image: np.ndarray, activation: PrototypeActivation
                 ) -> np.ndarray:
    """Overlay and diverging-colour heatmap side by side."""
    return np.concatenate([render_overlay(image, activation),
                           diverging_palette(activation.heatmap)], axis=2)


def write_explanation(image: np.ndarray, activations: Sequence[PrototypeActivation],
                      directory: Union[str, Path], stem: str) -> Path:
    """Writes one overlay and one panel PPM per activation and a CSV of
    scores and boxes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for a in activations:
        save_pnm(render_overlay(image, a),
                 directory / f"{stem}_proto{a.index}_overlay.ppm")
        save_pnm(render_panel(image, a),
                 directory / f"{stem}_proto{a.index}_panel.ppm")
    path = directory / f"{stem}.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EXPLANATION_HEADER)
        for a in activations:
            writer.writerow([a.index, a.class_identity, format(a.score, ".10g")]
                            + list(a.box.as_tuple()))
    return path


def cross_client_agreement(image: np.ndarray, client_params: Sequence[ParamGroups],
                           config: BackboneConfig, percentile: float = 95.0
                           ) -> np.ndarray:
    """N×N IoU of the clients' top predicted-class prototype boxes."""
    if len(client_params) < 2:
        raise ConfigurationError("agreement needs at least two clients")
    boxes = [top_class_activation(image, p, config, percentile=percentile).box
             for p in client_params]
    n = len(boxes)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = iou(boxes[i], boxes[j])
    return matrix


def mean_off_diagonal(matrix: np.ndarray) -> float:
    n = matrix.shape[0]
    if n < 2:
        return float("nan")
    return float((matrix.sum() - np.trace(matrix)) / (n * (n - 1)))


@dataclass
class LocalizationResult(object):
    image: int
    label: int
    prototype: int
    iou: float
    box: Box
    truth: Box


def localization_study(params: ParamGroups, config: BackboneConfig,
                       dataset: SiteDataset, percentile: float = 95.0,
                       max_images: Optional[int] = None) -> list:
    """IoU of the top true-class prototype box with the planted box, for
    every diseased image."""
    results = []
    for i in dataset.diseased[:max_images]:
        label = int(dataset.labels[i])
        a = top_class_activation(dataset.images[i], params, config, target=label,
                                 percentile=percentile)
        truth = dataset.boxes[i]
        results.append(LocalizationResult(int(i), label, a.index,
                                          iou(a.box, truth), a.box, truth))
    return results


def localization_rate(results: Sequence[LocalizationResult],
                      threshold: float = LOCALIZATION_IOU) -> float:
    if not results:
        return float("nan")
    return float(np.mean([r.iou >= threshold for r in results]))


def write_localization(results: Sequence[LocalizationResult],
                       path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOCALIZATION_HEADER)
        for r in results:
            writer.writerow([r.image, r.label, r.prototype, format(r.iou, ".10g")]
                            + list(r.box.as_tuple()) + list(r.truth.as_tuple()))
    return path
