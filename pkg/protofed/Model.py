import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .Optimizer import Adam
from .Payload import encode_checkpoint, load_checkpoint, save_checkpoint
from .RunSettings import BackboneConfig
from .Tensor import (Tensor, _as_tensor, amin, conv2d, inference_mode, linear, maxpool2d,
                     reduce_mean, relu, sliding_sq_l2)
from .protofed_aux import ConfigurationError, VersionError

logger = logging.getLogger(__name__)

GROUP_NAMES = ("omega", "alpha", "phi")
PROTOTYPES = "prototypes"
HEAD = "head"


def _block_names(b: int) -> tuple[str, str]:
    return f"block{b + 1}.weight", f"block{b + 1}.bias"


def _adapter_names(b: int) -> tuple[str, str]:
    return f"adapter{b + 1}.down", f"adapter{b + 1}.up"


@dataclass
class AdapterModule(object):
    """Residual 1×1 bottleneck: D → r → D."""
    down: Tensor
    up: Tensor

    def __post_init__(self):
        r, d = self.down.shape[:2]
        if self.up.shape[:2] != (d, r) or self.down.shape[2:] != (1, 1) \
                or self.up.shape[2:] != (1, 1):
            raise ConfigurationError(
                f"adapter kernels {self.down.shape} / {self.up.shape} are not "
                f"a D→r→D 1x1 bottleneck")
        if r >= d:
            raise ConfigurationError(
                f"adapter bottleneck width {r} must be smaller than depth {d}")

    @property
    def width(self) -> int:
        return self.down.shape[0]

    @property
    def depth(self) -> int:
        return self.down.shape[1]


@dataclass
class PrototypeLayer(object):
    prototypes: Tensor
    class_identity: np.ndarray

    def __post_init__(self):
        m = self.prototypes.shape[0]
        if self.class_identity.shape != (m,):
            raise ConfigurationError(
                f"{m} prototypes need {m} class identities, got "
                f"{self.class_identity.shape}")

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def depth(self) -> int:
        return self.prototypes.shape[1]

    def counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.class_identity, minlength=num_classes)

    def class_mask(self, labels: np.ndarray) -> np.ndarray:
        """N×m mask, True where prototype j belongs to sample n's class."""
        return self.class_identity[None, :] == np.asarray(labels)[:, None]


@dataclass
class ClassificationHead(object):
    weights: Tensor

    @staticmethod
    def default_weights(class_identity: np.ndarray, num_classes: int
                        ) -> np.ndarray:
        weights = np.full((class_identity.shape[0], num_classes), -0.5)
        weights[np.arange(class_identity.shape[0]), class_identity] = 1.0
        return weights


def class_identity(config: BackboneConfig) -> np.ndarray:
    return np.repeat(np.arange(config.num_classes), config.prototypes_per_class)


@dataclass
class ParamGroups(object):
    """The ω (frozen backbone), α (adapters) and φ (prototypes + head)
    partition. Each group is an ordered name → Tensor mapping."""
    omega: dict = field(default_factory=dict)
    alpha: dict = field(default_factory=dict)
    phi: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [set(g) for g in self.groups().values()]
        if names[0] & names[1] or names[0] & names[2] or names[1] & names[2]:
            raise ConfigurationError("parameter groups must be disjoint")

    def groups(self) -> dict:
        return {"omega": self.omega, "alpha": self.alpha, "phi": self.phi}

    def named_tensors(self) -> dict:
        return {**self.omega, **self.alpha, **self.phi}

    def trainable(self) -> list:
        return [t for t in self.named_tensors().values() if t.trainable]

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    def adapters(self) -> list:
        names = sorted({n.split(".")[0] for n in self.alpha},
                       key=lambda n: int(n[len("adapter"):]))
        return [AdapterModule(self.alpha[f"{n}.down"], self.alpha[f"{n}.up"])
                for n in names]

    def prototype_layer(self, config: BackboneConfig) -> PrototypeLayer:
        return PrototypeLayer(self.phi[PROTOTYPES], class_identity(config))

    def head(self) -> ClassificationHead:
        return ClassificationHead(self.phi[HEAD])

    def to_arrays(self) -> dict:
        return {g: {n: t.data for n, t in tensors.items()}
                for g, tensors in self.groups().items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParamGroups":
        missing = set(GROUP_NAMES) - set(arrays)
        if missing:
            raise VersionError(f"checkpoint lacks parameter group(s) {sorted(missing)}")
        return cls(**{g: {n: Tensor(a, trainable=g != "omega", name=n,
                                    dtype=a.dtype)
                          for n, a in arrays[g].items()}
                      for g in GROUP_NAMES})

    def copy(self) -> "ParamGroups":
        return ParamGroups(**{g: {n: t.copy() for n, t in tensors.items()}
                              for g, tensors in self.groups().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1)
                               for t in self.named_tensors().values()])

    def unflatten(self, vector: np.ndarray) -> "ParamGroups":
        """Returns a copy whose elements are read from ``vector`` in
        ``flatten`` order."""
        vector = np.asarray(vector)
        if vector.ndim != 1 or vector.size != self.num_elements():
            raise ConfigurationError(
                f"flat vector has extents {vector.shape}, groups need "
                f"{self.num_elements()} elements")
        out = self.copy()
        offset = 0
        for t in out.named_tensors().values():
            t.data = np.asarray(vector[offset:offset + t.size],
                                dtype=t.dtype).reshape(t.shape).copy()
            offset += t.size
        return out

    def num_elements(self, group: Optional[str] = None) -> int:
        tensors = self.named_tensors() if group is None else self.groups()[group]
        return sum(t.size for t in tensors.values())


class ModelOutput(NamedTuple):
    logits: Tensor
    distance_maps: Tensor
    scores: Tensor


def adapter_forward(h: Tensor, adapter: AdapterModule) -> Tensor:
    """h' = h + relu(h * W_down) * W_up with 1×1 convolutions."""
    if h.shape[1] != adapter.depth:
        raise ConfigurationError(
            f"adapter depth {adapter.depth} does not match feature depth "
            f"{h.shape[1]}")
    return h + conv2d(relu(conv2d(h, adapter.down)), adapter.up)


def backbone_forward(x, params: ParamGroups, config: BackboneConfig,
                     use_adapters: bool = True) -> Tensor:
    """Frozen conv blocks, each followed by its adapter. Every block but the
    last is max-pooled; ``pool_last_block`` pools the last one too."""
    z = _as_tensor(x)
    expected = (config.in_channels,) + tuple(config.image_size)
    if z.ndim != 4 or z.shape[1:] != expected:
        raise ConfigurationError(
            f"input extents {z.shape[1:]} do not match configured {expected}")
    adapters = params.adapters() if use_adapters else []
    for b in range(config.num_blocks):
        weight, bias = _block_names(b)
        z = conv2d(z, params.omega[weight], params.omega[bias], stride=1,
                     padding=config.kernel_size // 2)
        z = relu(z)
        if b < config.num_blocks - 1 or config.pool_last_block:
            z = maxpool2d(z, window=2, stride=2)
        if use_adapters:
            z = adapter_forward(z, adapters[b])
    return z


def prototype_similarities(z: Tensor, layer: PrototypeLayer
                           ) -> tuple[Tensor, Tensor]:
    """Distance maps batch×m×H'×W' and scores batch×m (negated minimum
    distance)."""
    if z.shape[1] != layer.depth:
        raise ConfigurationError(
            f"feature depth {z.shape[1]} does not match prototype depth "
            f"{layer.depth}")
    distances = sliding_sq_l2(z, layer.prototypes)
    scores = -amin(distances, axis=(2, 3))
    return distances, scores


def head_logits(scores: Tensor, head: ClassificationHead) -> Tensor:
    if scores.ndim != 2 or scores.shape[1] != head.weights.shape[0]:
        raise ConfigurationError(
            f"scores {scores.shape} do not match head {head.weights.shape}")
    return linear(scores, head.weights)


def model_forward(x, params: ParamGroups, config: BackboneConfig,
                  use_adapters: bool = True) -> ModelOutput:
    z = backbone_forward(x, params, config, use_adapters)
    distances, scores = prototype_similarities(z, params.prototype_layer(config))
    return ModelOutput(head_logits(scores, params.head()), distances, scores)


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int
                ) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: BackboneConfig, seed: int) -> ParamGroups:
    """Deterministic initialization.

    Backbone and W_down are He-style uniform, W_up is zero so every adapter
    starts as the identity, prototypes are uniform in [0, 1) and the head
    uses the +1 / -0.5 class pattern.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    omega, alpha = {}, {}
    k = config.kernel_size
    in_ch = config.in_channels
    for b, out_ch in enumerate(config.channels):
        weight, bias = _block_names(b)
        omega[weight] = Tensor(_he_uniform(rng, (out_ch, in_ch, k, k),
                                           in_ch * k * k), name=weight)
        omega[bias] = Tensor(np.zeros(out_ch), name=bias)
        in_ch = out_ch
    for b, depth in enumerate(config.channels):
        down, up = _adapter_names(b)
        r = config.bottleneck(b)
        alpha[down] = Tensor(_he_uniform(rng, (r, depth, 1, 1), depth),
                             trainable=True, name=down)
        alpha[up] = Tensor(np.zeros((depth, r, 1, 1)), trainable=True, name=up)
    identity = class_identity(config)
    ph, pw = config.prototype_shape
    phi = {
        PROTOTYPES: Tensor(rng.uniform(0.0, 1.0, size=(
            config.num_prototypes, config.depth, ph, pw)),
            trainable=True, name=PROTOTYPES),
        HEAD: Tensor(ClassificationHead.default_weights(identity,
                                                        config.num_classes),
                     trainable=True, name=HEAD),
    }
    return ParamGroups(omega=omega, alpha=alpha, phi=phi)


def pretrain_backbone(params: ParamGroups, config: BackboneConfig,
                      images: np.ndarray, labels: np.ndarray, seed: int,
                      batch_size: int = 16) -> ParamGroups:
    """Trains the backbone centrally with a throw-away linear classifier on
    globally pooled features, then freezes it again."""
    from .Loss import cross_entropy

    rng = np.random.default_rng(seed)
    classifier = Tensor(_he_uniform(rng, (config.depth, config.num_classes),
                                    config.depth), trainable=True,
                        name="warmup_classifier")
    backbone = list(params.omega.values())
    for t in backbone:
        t.trainable = True
        t._requires_grad = True
    optimizer = Adam(backbone + [classifier], learning_rate=config.warmup_learning_rate)
    try:
        for step in range(config.warmup_steps):
            idx = rng.choice(len(labels), size=min(batch_size, len(labels)),
                             replace=False)
            z = backbone_forward(images[idx], params, config, use_adapters=False)
            pooled = reduce_mean(z, axis=(2, 3))
            loss = cross_entropy(linear(pooled, classifier), labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if step % 50 == 0:
                logger.debug("warm-up step %d: loss %.4f", step, loss.item())
    finally:
        for t in backbone:
            t.trainable = False
            t._requires_grad = False
            t.zero_grad()
    logger.info("backbone warm-up finished after %d steps", config.warmup_steps)
    return params



def _features(params: ParamGroups, config: BackboneConfig, images: np.ndarray,
              batch_size: int = 64) -> np.ndarray:
    with inference_mode():
        return np.concatenate([
            backbone_forward(images[i:i + batch_size], params, config).data
            for i in range(0, len(images), batch_size)])


def _chunk_means(vectors: np.ndarray, count: int, rng: np.random.Generator
                 ) -> np.ndarray:
    chunks = np.array_split(rng.permutation(len(vectors)),
                            min(count, len(vectors)))
    means = np.stack([vectors[c].mean(axis=0) for c in chunks])
    return means[np.arange(count) % len(means)]


def _sq_distances(windows: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """N×L×F windows against K×F centers, N×L×K."""
    return (np.sum(windows ** 2, axis=-1)[..., None]
            - 2.0 * windows @ centers.T + np.sum(centers ** 2, axis=-1))


def _balanced_accuracy(predicted: np.ndarray, labels: np.ndarray,
                       num_classes: int) -> float:
    return float(np.mean([np.mean(predicted[labels == c] == c)
                          for c in range(num_classes)]))


def calibrate_prototypes(params: ParamGroups, config: BackboneConfig,
                         images: np.ndarray, labels: np.ndarray, seed: int,
                         grid: int = 129) -> ParamGroups:
    """Places the prototypes in the frozen feature space of a labelled set.

    The last block is rescaled so that feature vectors have unit mean square
    per channel. Disease prototypes are seeded with the window of each
    diseased image farthest from the healthy background mean. Healthy
    prototypes start at healthy image means and are moved away from the
    lesion mean by the offset that maximizes balanced accuracy of the
    default head on the given set.
    """
    labels = np.asarray(labels)
    num_classes = config.num_classes
    counts = np.bincount(labels, minlength=num_classes)
    if num_classes < 2 or np.any(counts == 0):
        logger.warning("prototype calibration needs every class, got counts %s",
                       counts.tolist())
        return params
    z = _features(params, config, images)
    mean_sq = float(np.mean(np.sum(z ** 2, axis=1)))
    if mean_sq == 0.0:
        logger.warning("backbone features are all zero, prototypes keep "
                       "their initial values")
        return params
    scale = np.sqrt(config.depth / mean_sq)
    for name in _block_names(config.num_blocks - 1):
        tensor = params.omega[name]
        tensor.data = (tensor.data * scale).astype(tensor.dtype)
    z = z * scale

    ph, pw = config.prototype_shape
    n = len(labels)
    windows = sliding_window_view(z, (ph, pw), axis=(2, 3))
    windows = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        n, -1, config.depth * ph * pw)
    healthy = labels == 0
    background = windows[healthy].reshape(-1, windows.shape[-1]).mean(axis=0)
    spread = np.sum((windows - background) ** 2, axis=-1)
    lesions = windows[np.arange(n), spread.argmax(axis=1)]

    rng = np.random.default_rng(seed)
    ppc = config.prototypes_per_class
    bases = _chunk_means(windows[healthy].mean(axis=1), ppc, rng)
    disease = [_chunk_means(lesions[labels == c], ppc, rng)
               for c in range(1, num_classes)]
    lesion_mean = lesions[~healthy].mean(axis=0)
    gap = float(np.linalg.norm(background - lesion_mean))
    offset = 0.0
    if gap > 0.0:
        direction = (background - lesion_mean) / gap
        fixed = -_sq_distances(windows, np.concatenate(disease)).min(axis=1)
        base_sq = _sq_distances(windows, bases)
        along = (windows @ direction)[..., None] - bases @ direction
        head = params.phi[HEAD].data
        trials = np.linspace(0.0, 2.0 * gap, grid)
        scores = []
        for t in trials:
            healthy_scores = -(base_sq - 2.0 * t * along + t * t).min(axis=1)
            logits = np.concatenate([healthy_scores, fixed], axis=1) @ head
            scores.append(_balanced_accuracy(logits.argmax(axis=1), labels,
                                             num_classes))
        scores = np.asarray(scores)
        best = trials[scores == scores.max()]
        offset = float(best[len(best) // 2])
        bases = bases + offset * direction
    else:
        logger.warning("healthy and lesion features coincide, healthy "
                       "prototypes are not offset")
    prototypes = np.concatenate([bases] + disease).reshape(
        config.num_prototypes, config.depth, ph, pw)
    params.phi[PROTOTYPES].data = prototypes.astype(params.phi[PROTOTYPES].dtype)
    logger.info("calibrated prototypes: feature scale %.4g, healthy offset "
                "%.4g of %.4g, balanced accuracy %.4f", scale, offset, gap,
                _balanced_accuracy(predict(params, config, images), labels,
                                   num_classes))
    return params

def predict(params: ParamGroups, config: BackboneConfig, images: np.ndarray,
            batch_size: int = 64) -> np.ndarray:
    with inference_mode():
        preds = [model_forward(images[i:i + batch_size], params, config)
                 .logits.data.argmax(axis=1)
                 for i in range(0, len(images), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(params: ParamGroups, config: BackboneConfig, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of samples whose predicted class is their label; nan when
    there are no samples."""
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(params, config, images, batch_size) == labels))


def checkpoint_size(params: ParamGroups) -> int:
    return len(encode_checkpoint(params.to_arrays()))


def save_params(params: ParamGroups, path: Union[str, Path]) -> int:
    return save_checkpoint(params.to_arrays(), path)


def load_params(path: Union[str, Path], config: BackboneConfig) -> ParamGroups:
    """Loads a checkpoint and verifies it matches ``config``."""
    params = ParamGroups.from_arrays(load_checkpoint(path))
    reference = init_params(config, seed=0)
    for group, tensors in reference.groups().items():
        loaded = params.groups()[group]
        if list(loaded) != list(tensors):
            raise VersionError(
                f"checkpoint {path} group '{group}' has tensors {list(loaded)}, "
                f"model config expects {list(tensors)}")
        for name, t in tensors.items():
            if loaded[name].shape != t.shape:
                raise VersionError(
                    f"checkpoint {path} tensor '{name}' has extents "
                    f"{loaded[name].shape}, model config expects {t.shape}")
    return params
