"""Per-scale multi-label bag classifier in plain numpy.

Instances of a bag pass through an encoder and a reducer (both affine +
ReLU), are mean-pooled into one vector, and a final affine layer plus
sigmoid gives one probability per histological feature. Training is
per-bag SGD with classical momentum on the mean binary cross-entropy,
with hand-written backpropagation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dkspace.ensemble import BagPrediction

log = logging.getLogger(__name__)

EPS = 1e-7
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("w_f", "b_f", "w_d", "b_d", "w_c", "b_c")


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, bag_index: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, bag {bag_index}")
        self.epoch = epoch
        self.bag_index = bag_index


@dataclass
class Bag:
    slide_id: str
    scale_index: int
    instances: np.ndarray  # (k, Q)
    label: np.ndarray  # (C,)
    bag_id: int = 0

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=float)
        self.label = np.asarray(self.label, dtype=float)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ShapeError(f"{self.slide_id}: instances must be a non-empty (k, Q) array")
        if self.label.ndim != 1:
            raise ShapeError(f"{self.slide_id}: label must be a vector")


@dataclass
class ModelParams:
    w_f: np.ndarray  # (Q, D)
    b_f: np.ndarray  # (D,)
    w_d: np.ndarray  # (D, R)
    b_d: np.ndarray  # (R,)
    w_c: np.ndarray  # (R, C)
    b_c: np.ndarray  # (C,)

    def __post_init__(self):
        q, d = self.w_f.shape
        d2, r = self.w_d.shape
        r2, c = self.w_c.shape
        if d2 != d or r2 != r or self.b_f.shape != (d,) or self.b_d.shape != (r,) or self.b_c.shape != (c,):
            raise ShapeError(f"inconsistent parameter shapes: {self.shapes()}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: getattr(self, n).shape for n in PARAM_NAMES}

    @property
    def input_width(self) -> int:
        return self.w_f.shape[0]

    @property
    def n_features(self) -> int:
        return self.w_c.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.arrays().items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams(**{n: fn(a) for n, a in self.arrays().items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    hidden: int = 64
    reduce_width: int = 512
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.hidden < 1 or self.reduce_width < 1:
            raise ValueError("layer widths must be positive")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(q: int, d: int, r: int, c: int, seed: int | Sequence[int] = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        w_f=_glorot(rng, q, d), b_f=np.zeros(d),
        w_d=_glorot(rng, d, r), b_d=np.zeros(r),
        w_c=_glorot(rng, r, c), b_c=np.zeros(c),
    )


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    # two branches keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_bag(p: ModelParams, bag: Bag) -> None:
    if bag.instances.shape[1] != p.input_width:
        raise ShapeError(f"{bag.slide_id}: instance width {bag.instances.shape[1]}, model expects {p.input_width}")
    if bag.label.size and bag.label.shape[0] != p.n_features:
        raise ShapeError(f"{bag.slide_id}: label length {bag.label.shape[0]}, model predicts {p.n_features}")
    if not np.isfinite(bag.instances).all():
        raise ValueError(f"{bag.slide_id}: non-finite instance values")


def _forward(p: ModelParams, x: np.ndarray):
    h_pre = x @ p.w_f + p.b_f
    h = np.maximum(h_pre, 0.0)
    l_pre = h @ p.w_d + p.b_d
    l = np.maximum(l_pre, 0.0)
    m = l.mean(axis=0)
    z = m @ p.w_c + p.b_c
    return h_pre, h, l_pre, m, z


def forward_logits(p: ModelParams, bag: Bag) -> np.ndarray:
    _check_bag(p, bag)
    return _forward(p, bag.instances)[-1]


def forward_bag(p: ModelParams, bag: Bag) -> np.ndarray:
    """Feature probabilities for one bag, each strictly inside (0, 1)."""
    if not p.is_finite():
        raise ValueError("non-finite model parameters")
    return np.clip(sigmoid(forward_logits(p, bag)), EPS, 1.0 - EPS)


def bce_loss(pred, label) -> float:
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction length {pred.shape} != label length {label.shape}")
    p = np.clip(pred, EPS, 1.0 - EPS)
    return float(-np.mean(label * np.log(p) + (1.0 - label) * np.log(1.0 - p)))


def bce_with_logits(z, label) -> float:
    z = np.asarray(z, dtype=float)
    label = np.asarray(label, dtype=float)
    if z.shape != label.shape:
        raise ShapeError(f"logit length {z.shape} != label length {label.shape}")
    return float(np.mean(np.maximum(z, 0.0) - z * label + np.log1p(np.exp(-np.abs(z)))))


def loss_and_grads(p: ModelParams, bag: Bag) -> tuple[float, ModelParams]:
    """Mean BCE of one bag and its exact gradient w.r.t. every parameter."""
    _check_bag(p, bag)
    x, y = bag.instances, bag.label
    h_pre, h, l_pre, m, z = _forward(p, x)
    loss = bce_with_logits(z, y)
    k, c = x.shape[0], y.shape[0]

    dz = (sigmoid(z) - y) / c
    g_wc = np.outer(m, dz)
    dm = p.w_c @ dz
    dl_pre = np.broadcast_to(dm / k, l_pre.shape) * (l_pre > 0)
    g_wd = h.T @ dl_pre
    dh_pre = (dl_pre @ p.w_d.T) * (h_pre > 0)
    g_wf = x.T @ dh_pre
    grads = ModelParams(
        w_f=g_wf, b_f=dh_pre.sum(axis=0),
        w_d=g_wd, b_d=dl_pre.sum(axis=0),
        w_c=g_wc, b_c=dz,
    )
    return loss, grads


@dataclass
class MomentumState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    p: ModelParams, grads: ModelParams, state: MomentumState, lr: float, mu: float
) -> tuple[ModelParams, MomentumState]:
    """One classical-momentum update: ``buf = mu*buf + g; param -= lr*buf``."""
    if p.shapes() != grads.shapes():
        raise ShapeError(f"gradient shapes {grads.shapes()} do not match parameters {p.shapes()}")
    if not grads.is_finite():
        raise ValueError("non-finite gradient")
    new_params, new_bufs = {}, {}
    for name, g in grads.arrays().items():
        buf = state.buffers.get(name)
        buf = g.copy() if buf is None else mu * buf + g
        new_bufs[name] = buf
        new_params[name] = getattr(p, name) - lr * buf
    return ModelParams(**new_params), MomentumState(new_bufs)


def train(
    bags: Sequence[Bag],
    cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[ModelParams, list[float]]:
    """Fit one scale's model; returns the parameters and per-epoch mean losses.

    Bags are visited one at a time. With ``cfg.shuffle`` the visiting order
    is re-permuted each epoch from the seeded generator, so runs with the
    same data and config are bit-identical.
    """
    if not bags:
        raise ValueError("cannot train on an empty dataset")
    scales = {b.scale_index for b in bags}
    if len(scales) != 1:
        raise ValueError(f"bags from several scales in one model: {sorted(scales)}")
    q = bags[0].instances.shape[1]
    c = bags[0].label.shape[0]
    seq = np.random.SeedSequence([cfg.seed, scales.pop()])
    init_seed, order_seed = seq.spawn(2)
    params = init_params(q, cfg.hidden, cfg.reduce_width, c, init_seed)
    order_rng = np.random.default_rng(order_seed)
    state = MomentumState()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(bags)) if cfg.shuffle else np.arange(len(bags))
        total = 0.0
        for i in order:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(params, bags[i])
            if not (math.isfinite(loss) and grads.is_finite()):
                raise TrainingDiverged(epoch, int(i), loss)
            total += loss
            params, state = sgd_step(params, grads, state, cfg.learning_rate, cfg.momentum)
        mean = total / len(bags)
        history.append(mean)
        log.debug("epoch %d mean loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return params, history


def predict_bag_probs(p: ModelParams, bag: Bag) -> BagPrediction:
    return BagPrediction(bag.slide_id, bag.scale_index, bag.bag_id, tuple(forward_bag(p, bag).tolist()))


def save_checkpoint(path: str | Path, p: ModelParams, cfg: TrainConfig, scale_index: int, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "scale": scale_index,
        "shapes": {n: list(s) for n, s in p.shapes().items()},
        "config": asdict(cfg),
        **(extra or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **p.arrays())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = ModelParams(**{n: data[n].astype(np.float64) for n in PARAM_NAMES})
    for n, s in meta["shapes"].items():
        if tuple(s) != getattr(params, n).shape:
            raise ShapeError(f"{path}: stored shape of {n} does not match its array")
    meta["config"] = TrainConfig(**{f.name: meta["config"][f.name] for f in fields(TrainConfig) if f.name in meta["config"]})
    return params, meta
