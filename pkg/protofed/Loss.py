import logging
from dataclasses import dataclass, fields
from typing import Mapping, Optional

import numpy as np

from .Model import ModelOutput, ParamGroups, PrototypeLayer, PROTOTYPES
from .RunSettings import LossWeights
from .Tensor import (Tensor, abs_sum, amin, clamp_max, log_softmax, pick, reduce_mean,
                     square_sum)
from .protofed_aux import ConfigurationError, DataError, ProtocolError

logger = logging.getLogger(__name__)


def _zero() -> Tensor:
    return Tensor(0.0)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise DataError("labels must be a nonempty 1-d array of class indices")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at index {bad[0]} is outside "
                        f"[0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise DataError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    return -reduce_mean(pick(log_softmax(logits), labels))


def _class_min(distance_maps: Tensor, mask: np.ndarray) -> Tensor:
    """Per-sample min over the masked prototypes of the spatial-min distance."""
    spatial = amin(distance_maps, axis=(2, 3))
    return amin(spatial, axis=1, mask=mask)


def cluster_loss(distance_maps: Tensor, labels, layer: PrototypeLayer) -> Tensor:
    """Batch mean of the smallest correct-class distance."""
    labels = np.asarray(labels)
    for c in np.unique(labels):
        if not np.any(layer.class_identity == c):
            raise ConfigurationError(f"class {c} has no prototypes")
    return reduce_mean(_class_min(distance_maps, layer.class_mask(labels)))


def separation_loss(distance_maps: Tensor, labels, layer: PrototypeLayer,
                    cap: Optional[float] = None) -> Tensor:
    """Batch mean of the smallest wrong-class distance, optionally capped."""
    labels = np.asarray(labels)
    wrong = ~layer.class_mask(labels)
    if not wrong.any(axis=1).all():
        logger.warning("separation loss undefined without wrong-class "
                       "prototypes, using 0")
        return _zero()
    per_sample = _class_min(distance_maps, wrong)
    if cap is not None:
        per_sample = clamp_max(per_sample, cap)
    return reduce_mean(per_sample)


def adapter_l2(alpha: Mapping[str, Tensor]) -> Tensor:
    """Unweighted squared l2 norm of the whole adapter group."""
    total = _zero()
    for t in alpha.values():
        total = total + square_sum(t)
    return total


def head_l1(head) -> Tensor:
    return abs_sum(head.weights)


def proximal(alpha_local: Mapping[str, Tensor], phi_local: Mapping[str, Tensor],
             alpha_global: Mapping[str, np.ndarray],
             phi_global: Mapping[str, np.ndarray], mu1: float, mu2: float
             ) -> Tensor:
    """(mu1/2)·‖α - α^g‖² + (mu2/2)·‖φ - φ^g‖²."""
    total = _zero()
    for local, reference, mu in ((alpha_local, alpha_global, mu1),
                                 (phi_local, phi_global, mu2)):
        if list(local) != list(reference):
            raise ProtocolError(
                f"proximal groups differ: local {list(local)}, global "
                f"{list(reference)}")
        for name, t in local.items():
            ref = np.asarray(getattr(reference[name], "data", reference[name]))
            if ref.shape != t.shape:
                raise ProtocolError(
                    f"proximal tensor '{name}' has extents {t.shape}, global "
                    f"reference {ref.shape}")
            if mu == 0:
                continue
            total = total + (0.5 * mu) * square_sum(t - ref)
    return total


@dataclass
class LossBreakdown(object):
    ce: Tensor
    clst: Tensor
    sep: Tensor
    l1: Tensor
    adapter_l2: Tensor
    prox: Tensor
    total: Tensor

    def __repr__(self):
        return "'LossBreakdown: " + ", ".join(
            f"{k} {v:.4g}" for k, v in self.as_row().items()) + "'"

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


def local_loss(output: ModelOutput, labels, params: ParamGroups,
               layer: PrototypeLayer, weights: LossWeights,
               reference=None) -> LossBreakdown:
    """ce + λ_clst·clst − λ_sep·sep + γ·l1 + β·adapter_l2 + prox.

    ``reference`` is the broadcast global state (``alpha``/``phi`` name →
    array mappings covering the communicated tensors); without it the
    proximal term is zero.
    """
    ce = cross_entropy(output.logits, labels)
    clst = cluster_loss(output.distance_maps, labels, layer)
    sep = separation_loss(output.distance_maps, labels, layer, weights.sep_cap)
    l1 = head_l1(params.head())
    if weights.l1_on_prototypes:
        l1 = l1 + abs_sum(params.phi[PROTOTYPES])
    a_l2 = adapter_l2(params.alpha)
    if reference is None:
        prox = _zero()
    else:
        prox = proximal({n: params.alpha[n] for n in reference.alpha},
                        {n: params.phi[n] for n in reference.phi},
                        reference.alpha, reference.phi, weights.mu1, weights.mu2)
    total = ce
    for coefficient, term in ((weights.lambda_clst, clst),
                              (-weights.lambda_sep, sep), (weights.gamma, l1),
                              (weights.beta, a_l2)):
        if coefficient != 0:
            total = total + coefficient * term
    total = total + prox
    return LossBreakdown(ce=ce, clst=clst, sep=sep, l1=l1, adapter_l2=a_l2,
                         prox=prox, total=total)
