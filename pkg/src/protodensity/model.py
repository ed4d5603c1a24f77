"""The counting network: frozen convolutional feature extractor, a 1x1
processing layer squashing features into (0,1), a bank of learnable
prototypes compared to every feature location by squared L2 distance, and a
per-prototype weighted sum of similarity maps that forms the density map.

The predicted count is the sum over the density map. Prototype provenance
(which training image and location each prototype was projected onto) lives
on the model so explanations can point back to real patches.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

EXTRACTOR_WIDTHS = (1, 16, 32, 64)
EXTRACTOR_BLOCKS = len(EXTRACTOR_WIDTHS) - 1
DOWNSAMPLE = 2 ** EXTRACTOR_BLOCKS  # three 2x2 pools: spatial /8
FEATURE_DIM = EXTRACTOR_WIDTHS[-1]

CHECKPOINT_MANIFEST = "checkpoint.txt"
CHECKPOINT_FORMAT = "protodensity-checkpoint-v1"


@dataclass
class ModelConfig:
    """Architecture dims: prototype counts per group, prototype depth, and
    the epsilon of the distance-to-similarity transform."""

    k_cell: int = 4
    k_bg: int = 4
    d: int = 64
    epsilon: float = 1e-4

    @property
    def k_total(self) -> int:
        return self.k_cell + self.k_bg

    def validate(self) -> None:
        if self.k_cell < 1 or self.k_bg < 1:
            raise ValueError(f"k_cell and k_bg must each be >= 1, got {self.k_cell}/{self.k_bg}")
        if self.d < 1:
            raise ValueError(f"prototype depth d must be >= 1, got {self.d}")
        if self.epsilon <= 0 or self.epsilon >= 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


class FeatureExtractor:
    """Three {3x3 conv, relu, 2x2 max-pool} blocks, widths 1->16->32->64.

    Downsamples by exactly 8. Pretrained once, then frozen: after
    ``freeze()`` no gradient ever reaches these weights.
    """

    def __init__(self, rng: np.random.Generator):
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for i in range(EXTRACTOR_BLOCKS):
            c_in, c_out = EXTRACTOR_WIDTHS[i], EXTRACTOR_WIDTHS[i + 1]
            limit = np.sqrt(6.0 / (c_in * 9))
            w = rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3))
            self.weights.append(Parameter(w, name=f"extractor.block{i}.weight"))
            self.biases.append(Parameter(np.zeros(c_out), name=f"extractor.block{i}.bias"))

    def forward(self, x) -> Tensor:
        out = x if isinstance(x, Tensor) else Tensor(x)
        for w, b in zip(self.weights, self.biases):
            out = T.maxpool2x2(T.relu(T.conv3x3(out, w, b)))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    @property
    def frozen(self) -> bool:
        return all(not p.trainable for p in self.parameters())

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


class ProcessingLayer:
    """1x1 convolution plus sigmoid mapping extractor features into (0,1)^d."""

    def __init__(self, d: int, rng: np.random.Generator, d_in: int = FEATURE_DIM):
        limit = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-limit, limit, size=(d, d_in)),
                                name="processing.weight")
        self.bias = Parameter(np.zeros(d), name="processing.bias")

    def forward(self, features) -> Tensor:
        return T.sigmoid(T.conv1x1(features, self.weight, self.bias))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class PrototypeLayer:
    """K learnable d-dim prototypes: the first k_cell are cell prototypes,
    the remaining k_bg are background prototypes."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.k_cell = config.k_cell
        self.k_bg = config.k_bg
        self.epsilon = config.epsilon
        self.prototypes = Parameter(rng.uniform(0.0, 1.0, size=(config.k_total, config.d)),
                                    name="prototypes")

    @property
    def k_total(self) -> int:
        return self.k_cell + self.k_bg

    def distances(self, processed) -> Tensor:
        return T.distance_map(processed, self.prototypes)

    def parameters(self) -> list[Parameter]:
        return [self.prototypes]


def similarity_from_distance(distances, epsilon: float) -> Tensor:
    """log((dist + 1) / (dist + epsilon)): strictly decreasing in distance,
    maxing out at log(1/epsilon) for a zero distance."""
    dist = distances if isinstance(distances, Tensor) else Tensor(distances)
    if np.any(dist.data < 0):
        raise ValueError("similarity_from_distance: distances must be nonnegative")
    return T.sub(T.log(T.add(dist, 1.0)), T.log(T.add(dist, epsilon)))


class DensityHead:
    """Per-prototype weights theta; the density map is sum_i theta_i * S_i.

    No bias and no sign constraint: background similarities may contribute
    negatively or not at all.
    """

    def __init__(self, k_total: int):
        self.theta = Parameter(np.zeros(k_total), name="head.theta")

    def forward(self, similarities) -> Tensor:
        k = self.theta.shape[0]
        weight = T.reshape(self.theta, (1, k))
        out = T.conv1x1(similarities, weight)
        if out.ndim == 3:          # (1, Hf, Wf) -> (Hf, Wf)
            return out[0]
        return out[:, 0]           # (B, 1, Hf, Wf) -> (B, Hf, Wf)

    def parameters(self) -> list[Parameter]:
        return [self.theta]


@dataclass
class PrototypeProvenance:
    """Where a prototype was projected from: training image id and feature
    grid location, plus the squared distance it moved."""

    prototype_id: int
    image_id: int
    h: int
    w: int
    distance_before: float


@dataclass
class ModelOutputs:
    """Every intermediate of one forward pass."""

    features: Tensor       # extractor output
    processed: Tensor      # post 1x1+sigmoid
    distances: Tensor      # per-prototype squared L2
    similarities: Tensor   # log-transformed distances
    density: Tensor        # (Hf, Wf) or (B, Hf, Wf)
    count: float | np.ndarray


class CountModel:
    """Extractor + processing + prototypes + density head, with provenance."""

    def __init__(self, config: ModelConfig, extractor: FeatureExtractor,
                 seed: int = 0):
        config.validate()
        self.config = config
        self.extractor = extractor
        rng = np.random.default_rng([seed, 1])
        self.processing = ProcessingLayer(config.d, rng)
        self.prototype_layer = PrototypeLayer(config, rng)
        self.head = DensityHead(config.k_total)
        self.provenance: list[PrototypeProvenance | None] = [None] * config.k_total

    # -- stages ---------------------------------------------------------------

    def extract_features(self, x) -> Tensor:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        h, w = xd.shape[-2], xd.shape[-1]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise T.ShapeError(f"input spatial dims {h}x{w} must be divisible by {DOWNSAMPLE}")
        return self.extractor.forward(x)

    def process_features(self, features) -> Tensor:
        return self.processing.forward(features)

    def similarity_map(self, distances) -> Tensor:
        return similarity_from_distance(distances, self.config.epsilon)

    def predict_density(self, similarities) -> Tensor:
        return self.head.forward(similarities)

    def forward_from_features(self, features) -> ModelOutputs:
        feats = features if isinstance(features, Tensor) else Tensor(features)
        processed = self.process_features(feats)
        distances = self.prototype_layer.distances(processed)
        similarities = self.similarity_map(distances)
        density = self.predict_density(similarities)
        return ModelOutputs(feats, processed, distances, similarities, density,
                            count(density))

    def forward(self, x) -> ModelOutputs:
        return self.forward_from_features(self.extract_features(x))

    # -- parameter plumbing ---------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        params = (self.extractor.parameters() + self.processing.parameters()
                  + self.prototype_layer.parameters() + self.head.parameters())
        return {p.name: p for p in params}

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters().items() if p.trainable}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def count(density) -> float | np.ndarray:
    """Total count: the sum over the density map. For a batched map, one
    count per batch element."""
    data = density.data if isinstance(density, Tensor) else np.asarray(density)
    if data.ndim == 2:
        return float(data.sum())
    return data.sum(axis=(-2, -1))


# -- checkpoint I/O -----------------------------------------------------------


def save_checkpoint(model: CountModel, ckpt_dir: str) -> None:
    """Write architecture manifest, every parameter as a PDTF tensor, and the
    prototype provenance table into ``ckpt_dir``."""
    os.makedirs(ckpt_dir, exist_ok=True)
    cfg = model.config
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"k_cell = {cfg.k_cell}",
        f"k_bg = {cfg.k_bg}",
        f"d = {cfg.d}",
        f"epsilon = {cfg.epsilon!r}",
        f"extractor_widths = {','.join(str(w) for w in EXTRACTOR_WIDTHS)}",
        f"extractor_frozen = {model.extractor.frozen}",
        f"extractor_checksum = {model.extractor.checksum()}",
    ]
    with open(os.path.join(ckpt_dir, CHECKPOINT_MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")
    for name, p in model.named_parameters().items():
        T.save_tensor(os.path.join(ckpt_dir, f"{name}.pdt"), p.data)
    with open(os.path.join(ckpt_dir, "provenance.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["prototype_id", "image_id", "h", "w", "distance_before"])
        for i, rec in enumerate(model.provenance):
            if rec is None:
                writer.writerow([i, "", "", "", ""])
            else:
                writer.writerow([rec.prototype_id, rec.image_id, rec.h, rec.w,
                                 repr(rec.distance_before)])


def _require(kv: dict, key: str, path: str) -> str:
    if key not in kv:
        raise ValueError(f"{path}: checkpoint manifest missing field {key!r}")
    return kv[key]


def load_checkpoint(ckpt_dir: str) -> CountModel:
    """Rebuild a model from ``ckpt_dir``, validating every tensor dimension
    against the manifest."""
    manifest = os.path.join(ckpt_dir, CHECKPOINT_MANIFEST)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    kv: dict[str, str] = {}
    with open(manifest) as f:
        for line in f:
            key, _, value = line.strip().partition("=")
            if key.strip():
                kv[key.strip()] = value.strip()
    if kv.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest}: unknown checkpoint format {kv.get('format')!r}")
    widths = tuple(int(w) for w in _require(kv, "extractor_widths", manifest).split(","))
    if widths != EXTRACTOR_WIDTHS:
        raise ValueError(f"{manifest}: extractor widths {widths} != supported {EXTRACTOR_WIDTHS}")
    config = ModelConfig(
        k_cell=int(_require(kv, "k_cell", manifest)),
        k_bg=int(_require(kv, "k_bg", manifest)),
        d=int(_require(kv, "d", manifest)),
        epsilon=float(_require(kv, "epsilon", manifest)),
    )
    extractor = FeatureExtractor(np.random.default_rng(0))
    model = CountModel(config, extractor, seed=0)
    for name, p in model.named_parameters().items():
        path = os.path.join(ckpt_dir, f"{name}.pdt")
        if not os.path.isfile(path):
            raise FileNotFoundError(f"checkpoint tensor missing: {path}")
        data = np.asarray(T.load_tensor(path), dtype=np.float64)
        if data.shape != p.shape:
            raise ValueError(f"{path}: shape {data.shape} does not match "
                             f"expected {p.shape} for parameter {name}")
        p.data = data
    if kv.get("extractor_frozen") == "True":
        model.extractor.freeze()
        stored = _require(kv, "extractor_checksum", manifest)
        if model.extractor.checksum() != stored:
            raise ValueError(f"{manifest}: extractor checksum mismatch after load")
    prov_path = os.path.join(ckpt_dir, "provenance.csv")
    if os.path.isfile(prov_path):
        with open(prov_path, newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                pid = int(row[0])
                if row[1] != "":
                    model.provenance[pid] = PrototypeProvenance(
                        pid, int(row[1]), int(row[2]), int(row[3]), float(row[4]))
    return model


def save_extractor(extractor: FeatureExtractor, ckpt_dir: str) -> None:
    """Persist a (typically frozen) extractor on its own."""
    os.makedirs(ckpt_dir, exist_ok=True)
    lines = [
        "format = protodensity-extractor-v1",
        f"extractor_widths = {','.join(str(w) for w in EXTRACTOR_WIDTHS)}",
        f"frozen = {extractor.frozen}",
        f"checksum = {extractor.checksum()}",
    ]
    with open(os.path.join(ckpt_dir, "extractor.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    for p in extractor.parameters():
        T.save_tensor(os.path.join(ckpt_dir, f"{p.name}.pdt"), p.data)


def load_extractor(ckpt_dir: str) -> FeatureExtractor:
    manifest = os.path.join(ckpt_dir, "extractor.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no extractor manifest at {manifest}")
    kv: dict[str, str] = {}
    with open(manifest) as f:
        for line in f:
            key, _, value = line.strip().partition("=")
            if key.strip():
                kv[key.strip()] = value.strip()
    if kv.get("format") != "protodensity-extractor-v1":
        raise ValueError(f"{manifest}: unknown extractor format {kv.get('format')!r}")
    extractor = FeatureExtractor(np.random.default_rng(0))
    for p in extractor.parameters():
        data = np.asarray(T.load_tensor(os.path.join(ckpt_dir, f"{p.name}.pdt")),
                          dtype=np.float64)
        if data.shape != p.shape:
            raise ValueError(f"{p.name}: shape {data.shape} != expected {p.shape}")
        p.data = data
    if kv.get("frozen") == "True":
        extractor.freeze()
        if extractor.checksum() != kv.get("checksum"):
            raise ValueError(f"{manifest}: checksum mismatch after load")
    return extractor
