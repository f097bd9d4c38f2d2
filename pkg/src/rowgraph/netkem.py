"""Backbone, multi-stage knowledge estimation module, edge head and their training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .diffkernel import Param, SgdConfig, Tensor
from .fieldgen import GroundTruthBundle, PlantationScene
from .linegraph import sample_edge_points_batch, sample_map_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _scaled(n: int, width_scale: float) -> int:
    return max(1, int(round(n * width_scale)))


@dataclass
class BackboneConfig:
    block1: tuple = (64, 64)
    block2: tuple = (128, 128, 256, 256, 256, 256)
    head: tuple = (256, 128)
    width_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.width_scale <= 1:
            raise ValueError("width_scale must lie in (0, 1]")
        if self.channels < 8:
            raise ValueError(f"feature channels {self.channels} < 8; raise width_scale")

    @property
    def channels(self) -> int:
        return _scaled(self.head[-1], self.width_scale)


@dataclass
class KemConfig:
    stages: int = 2
    stage1: tuple = (128, 128, 128)  # 3x3
    stage1_fuse: int = 512  # 1x1
    stage_t: tuple = (128, 128, 128, 128, 128)  # 7x7
    stage_t_fuse: int = 128  # 1x1
    width_scale: float = 1.0
    # one trunk per stage feeding three heads, or one trunk per branch
    shared_trunk: bool = False

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("KEM needs at least one stage")


@dataclass
class EcmConfig:
    widths: tuple = (128, 256, 512)
    kernel: int = 3
    sample_points: int = 16
    width_scale: float = 1.0


class Conv:
    def __init__(self, name, c_in, c_out, k, rng, gain=2.0, dtype=np.float32, dims=2):
        shape = (c_out, c_in) + (k,) * dims
        fan_in = c_in * k ** dims
        self.w = Param(rng.normal(0, np.sqrt(gain / fan_in), shape).astype(dtype), f"{name}.w")
        self.b = Param(np.zeros(c_out, dtype=dtype), f"{name}.b")
        self.dims = dims

    def __call__(self, x):
        op = dk.conv2d if self.dims == 2 else dk.conv1d
        return op(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class Backbone:
    """Truncated VGG-style stack: convs, pool, convs, pool, bilinear x2, two convs."""

    def __init__(self, config: BackboneConfig, rng, dtype=np.float32):
        self.config = config
        s = config.width_scale
        c = 3
        self.block1, self.block2, self.head = [], [], []
        for group, widths, tag in ((self.block1, config.block1, "b1"),
                                   (self.block2, config.block2, "b2"),
                                   (self.head, config.head, "hd")):
            for i, n in enumerate(widths):
                group.append(Conv(f"backbone.{tag}.{i}", c, _scaled(n, s), 3, rng, dtype=dtype))
                c = _scaled(n, s)

    @property
    def channels(self):
        return self.config.channels

    def __call__(self, image: Tensor) -> Tensor:
        H, W = image.shape[-2:]
        if H % 4 or W % 4:
            raise ValueError(f"input extents must be divisible by 4, got {H}x{W}")
        x = image
        for conv in self.block1:
            x = dk.relu(conv(x))
        x = dk.maxpool2(x)
        for conv in self.block2:
            x = dk.relu(conv(x))
        x = dk.maxpool2(x)
        x = dk.upsample_bilinear2(x)
        for conv in self.head:
            x = dk.relu(conv(x))
        return x

    def params(self):
        return [p for conv in self.block1 + self.block2 + self.head for p in conv.params()]


@dataclass
class StageOutputs:
    plant: Tensor  # [.., 1, H/2, W/2]
    line: Tensor  # [.., 1, H/2, W/2]
    vectors: Tensor  # [.., 2, H/2, W/2]


class _Trunk:
    def __init__(self, name, c_in, widths, k, fuse, heads, rng, dtype):
        self.convs = []
        c = c_in
        for i, n in enumerate(widths):
            self.convs.append(Conv(f"{name}.c{i}", c, n, k, rng, dtype=dtype))
            c = n
        self.convs.append(Conv(f"{name}.fuse", c, fuse, 1, rng, dtype=dtype))
        self.heads = [Conv(f"{name}.{tag}", fuse, n_out, 1, rng, gain=1.0, dtype=dtype)
                      for tag, n_out in heads]

    def __call__(self, x):
        for conv in self.convs:
            x = dk.relu(conv(x))
        return [head(x) for head in self.heads]

    def params(self):
        return [p for c in self.convs + self.heads for p in c.params()]


class Kem:
    """T refinement stages, each estimating plant map, line map and vector field."""

    HEADS = (("plant", 1), ("line", 1), ("vec", 2))

    def __init__(self, config: KemConfig, in_channels: int, rng, dtype=np.float32):
        self.config = config
        self.in_channels = in_channels
        s = config.width_scale
        self.stages = []
        for t in range(config.stages):
            if t == 0:
                c_in, widths, k, fuse = in_channels, config.stage1, 3, config.stage1_fuse
            else:
                c_in, widths, k, fuse = in_channels + 4, config.stage_t, 7, config.stage_t_fuse
            widths = [_scaled(n, s) for n in widths]
            fuse = _scaled(fuse, s)
            name = f"kem.s{t + 1}"
            if config.shared_trunk:
                trunks = [_Trunk(name, c_in, widths, k, fuse, self.HEADS, rng, dtype)]
            else:
                trunks = [_Trunk(f"{name}.{tag}", c_in, widths, k, fuse, [(tag, n)], rng, dtype)
                          for tag, n in self.HEADS]
            self.stages.append(trunks)

    def stage_input_channels(self, t: int) -> int:
        return self.in_channels if t == 0 else self.in_channels + 4

    def __call__(self, features: Tensor) -> list:
        outputs = []
        x = features
        for t, trunks in enumerate(self.stages):
            if t > 0:
                prev = outputs[-1]
                x = dk.concat_channels([features, prev.plant, prev.line, prev.vectors])
            maps = [m for trunk in trunks for m in trunk(x)]
            outputs.append(StageOutputs(*maps))
        return outputs

    def params(self):
        return [p for trunks in self.stages for tr in trunks for p in tr.params()]


class EcmHead:
    """Three 1-D convolutions over the L sampled feature vectors, then a sigmoid unit."""

    def __init__(self, config: EcmConfig, in_channels: int, rng, dtype=np.float32):
        self.config = config
        self.in_channels = in_channels
        self.convs = []
        c = in_channels
        for i, n in enumerate(config.widths):
            n = _scaled(n, config.width_scale)
            self.convs.append(Conv(f"ecm.c{i}", c, n, config.kernel, rng, dtype=dtype, dims=1))
            c = n
        fan_in = c * config.sample_points
        self.dense_w = Param(rng.normal(0, np.sqrt(1.0 / fan_in), (1, fan_in)).astype(dtype), "ecm.dense.w")
        self.dense_b = Param(np.zeros(1, dtype=dtype), "ecm.dense.b")

    def __call__(self, features: Tensor) -> Tensor:
        """[C, L] or [B, C, L] edge features -> probability [1] or [B, 1]."""
        L = features.shape[-1]
        if L != self.config.sample_points:
            raise ValueError(f"edge features carry {L} points, head expects {self.config.sample_points}")
        x = features
        for conv in self.convs:
            x = dk.relu(conv(x))
        flat = dk.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
        return dk.sigmoid(dk.dense(flat, self.dense_w, self.dense_b))

    def params(self):
        return [p for c in self.convs for p in c.params()] + [self.dense_w, self.dense_b]


def ecm_visual_forward(head: EcmHead, features) -> Tensor:
    return head(features if isinstance(features, Tensor) else Tensor(features))


# ---------------------------------------------------------------- KEM losses

def _stack_targets(bundles, stage):
    plant = np.stack([b.plant_maps[stage] for b in bundles])[:, None]
    line = np.stack([b.line_maps[stage] for b in bundles])[:, None]
    vec = np.stack([b.displacement_field for b in bundles])
    return plant, line, vec


def kem_loss(outputs: list, ground_truths) -> Tensor:
    """Sum over stages of the squared errors of all three branches.

    ``ground_truths`` is one :class:`GroundTruthBundle` (unbatched outputs) or
    a list of them matching the batch axis.
    """
    batched = not isinstance(ground_truths, GroundTruthBundle)
    bundles = list(ground_truths) if batched else [ground_truths]
    n_stages = len(bundles[0].plant_maps)
    if len(outputs) != n_stages:
        raise ValueError(f"{len(outputs)} stage outputs but ground truth has {n_stages} stages")
    total = None
    for t, out in enumerate(outputs):
        plant, line, vec = _stack_targets(bundles, t)
        if not batched:
            plant, line, vec = plant[0], line[0], vec[0]
        for pred, target in ((out.plant, plant), (out.line, line), (out.vectors, vec)):
            term = dk.mse_loss(pred, target)
            total = term if total is None else dk.add(total, term)
    return total


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 100
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    grad_clip: float | None = None  # global-norm clip, off unless set


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for e, tr, va in zip(self.epochs, self.train_loss, self.val_loss):
            rows.append(f"{e},{tr!r},{va!r}")
        return "\n".join(rows) + "\n"


def _clip(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total


class KemModel:
    """Backbone plus KEM, the part trained with the regression losses."""

    def __init__(self, backbone_cfg: BackboneConfig, kem_cfg: KemConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng([seed, 7])
        self.backbone = Backbone(backbone_cfg, rng, dtype)
        self.kem = Kem(kem_cfg, self.backbone.channels, rng, dtype)
        self.dtype = dtype

    def __call__(self, images):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        features = self.backbone(x)
        return features, self.kem(features)

    def params(self):
        return self.backbone.params() + self.kem.params()

    def state(self):
        return {p.name: p.data.copy() for p in self.params()}

    def load_state(self, state):
        for p in self.params():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name}: {state[p.name].shape} vs {p.data.shape}")
            p.data[...] = state[p.name]


def _batch_loss(model, images, bundles):
    _, outputs = model(np.stack(images))
    loss = kem_loss(outputs, bundles)
    return dk.scale(loss, 1.0 / len(images))


def evaluate_kem_loss(model, samples, batch_size=4) -> float:
    total = 0.0
    with dk.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            _, outputs = model(np.stack([s[0] for s in chunk]))
            total += float(kem_loss(outputs, [s[1] for s in chunk]).data)
    return total / max(len(samples), 1)


def train_kem(model: KemModel, train, val, config: TrainConfig) -> History:
    """SGD with momentum over shuffled mini-batches; keeps the best-validation weights.

    ``train``/``val`` are sequences of (image [3,H,W], GroundTruthBundle).
    """
    if not train:
        raise ValueError("empty training set")
    params = model.params()
    hist = History()
    best = np.inf
    best_state = model.state()
    bs = config.sgd.batch_size
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        running = 0.0
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            loss = _batch_loss(model, [train[j][0] for j in idx], [train[j][1] for j in idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite KEM loss at epoch {epoch + 1}, step {hist.steps + 1}")
            running += value * len(idx)
            loss.backward()
            if config.grad_clip:
                _clip(params, config.grad_clip)
            dk.sgd_step(params, config.sgd)
            hist.steps += 1
        train_loss = running / len(train)
        val_loss = evaluate_kem_loss(model, val, bs) if val else train_loss
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch + 1}")
        hist.epochs.append(epoch + 1)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        if val_loss < best:
            best, best_state, hist.best_epoch = val_loss, model.state(), epoch + 1
        log.info("kem epoch %d train %.4f val %.4f", epoch + 1, train_loss, val_loss)
    model.load_state(best_state)
    return hist


# ----------------------------------------------------------------- ECM data

def scene_edges(scene: PlantationScene):
    """All unordered plant pairs (i < j) with label 1 iff both share a line id."""
    ids = scene.plant_line_ids
    n = len(ids)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1), (ids[i] == ids[j]).astype(np.float64)


def sample_training_edges(scene, rng, neg_ratio=3.0, max_positive=None):
    """Keep positives (optionally capped) and draw negatives at ``neg_ratio`` per positive."""
    pairs, labels = scene_edges(scene)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if max_positive is not None and len(pos) > max_positive:
        pos = np.sort(rng.choice(pos, max_positive, replace=False))
    n_neg = min(len(neg), int(round(neg_ratio * max(len(pos), 1))))
    if n_neg < len(neg):
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    keep = np.concatenate([pos, neg])
    return pairs[keep], labels[keep]


def edge_features(feature_map: np.ndarray, points_i: np.ndarray, points_j: np.ndarray, L: int) -> np.ndarray:
    """[E, C, L] features sampled along each edge from a [C, H/2, W/2] map."""
    pts = sample_edge_points_batch(points_i, points_j, L)
    return sample_map_batch(feature_map, pts)


@dataclass
class EcmTrainConfig:
    epochs: int = 50
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    neg_ratio: float = 3.0
    max_positive_per_scene: int | None = 48
    grad_clip: float | None = None


def train_ecm(model: KemModel, head: EcmHead, scenes, images, config: EcmTrainConfig,
              val_scenes=(), val_images=()) -> History:
    """Train the edge head on ground-truth plant graphs with the KEM frozen.

    A mini-batch holds the sampled edges of ``sgd.batch_size`` scenes; the
    BCE is averaged over those edges.
    """
    L = head.config.sample_points
    feats = _frozen_features(model, images)
    val_feats = _frozen_features(model, val_images)
    params = head.params()
    hist = History()
    bs = config.sgd.batch_size
    rng_val = np.random.default_rng([config.seed, 99])
    val_data = []
    for scene, fm in zip(val_scenes, val_feats):
        pairs, labels = sample_training_edges(scene, rng_val, config.neg_ratio, config.max_positive_per_scene)
        if len(pairs):
            p = scene.plants
            val_data.append((edge_features(fm, p[pairs[:, 0]], p[pairs[:, 1]], L), labels))
    best = np.inf
    best_state = {p.name: p.data.copy() for p in params}
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(scenes))
        running, count = 0.0, 0
        for i in range(0, len(order), bs):
            xs, ys = [], []
            for k in order[i:i + bs]:
                scene = scenes[k]
                pairs, labels = sample_training_edges(scene, rng, config.neg_ratio, config.max_positive_per_scene)
                if not len(pairs):
                    continue
                p = scene.plants
                xs.append(edge_features(feats[k], p[pairs[:, 0]], p[pairs[:, 1]], L))
                ys.append(labels)
            if not xs:
                continue
            x = np.concatenate(xs).astype(head.dense_w.data.dtype)
            y = np.concatenate(ys)
            prob = head(Tensor(x))
            loss = dk.scale(dk.bce_loss(prob, y[:, None]), 1.0 / len(y))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite ECM loss at epoch {epoch + 1}")
            running += value * len(y)
            count += len(y)
            loss.backward()
            if config.grad_clip:
                _clip(params, config.grad_clip)
            dk.sgd_step(params, config.sgd)
            hist.steps += 1
        train_loss = running / max(count, 1)
        val_loss = ecm_bce(head, val_data) if val_data else train_loss
        hist.epochs.append(epoch + 1)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        if val_loss < best:
            best, hist.best_epoch = val_loss, epoch + 1
            best_state = {p.name: p.data.copy() for p in params}
        log.info("ecm epoch %d train %.4f val %.4f", epoch + 1, train_loss, val_loss)
    for p in params:
        p.data[...] = best_state[p.name]
    return hist


def ecm_bce(head: EcmHead, data) -> float:
    """Mean BCE over (features [E,C,L], labels [E]) chunks."""
    total, n = 0.0, 0
    with dk.no_grad():
        for x, y in data:
            prob = head(Tensor(x.astype(head.dense_w.data.dtype)))
            total += float(dk.bce_loss(prob, y[:, None]).data)
            n += len(y)
    return total / max(n, 1)


def _frozen_features(model: KemModel, images, batch_size=8):
    out = []
    with dk.no_grad():
        for i in range(0, len(images), batch_size):
            f, _ = model(np.stack(images[i:i + batch_size]))
            out.extend(np.asarray(f.data))
    return out
