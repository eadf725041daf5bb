"""Mini-batch SGD training loop with crop scheduling and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataops import Dataset
from .loss import ABLATION_VARIANTS, OMEGA, LossConfig, ablation_loss, inference_scores, rproxy_loss
from .model import (ConfigMismatchError, ModelConfig, RelationalProxyModel, CheckpointError,
                    load_model, save_model)
from .tensor import Tensor
from .views import CropPlan, schedule

log = logging.getLogger(__name__)

STATE_VERSION = 1

# variant -> (model overrides, representations conditioning the proxies)
VARIANTS: dict[str, tuple[dict, tuple[str, ...]]] = {
    "full": ({}, OMEGA),
    "linear_rho": ({"rho": "linear"}, OMEGA),
    "mean_pool": ({"summarizer": "mean"}, OMEGA),
    "drop_zL": ({}, ("z_g", "r")),
    "drop_zg": ({}, ("z_L", "r")),
    "drop_r": ({}, ("z_g", "z_L")),
    "ce_head": ({"head": True}, ()),
    "huber_relation": ({"head": True}, ()),
    "pairwise_contrastive": ({"head": True}, ()),
}


class TrainError(RuntimeError):
    pass


class DivergenceError(TrainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 48
    batch_size: int = 16
    k_max: int = 5
    patch_frac: float = 1 / 3
    warmup_epochs: int = 10
    seed: int = 0
    alpha: float = 32.0
    delta: float = 0.1
    variant: str = "full"
    # fixed number of local views (fixed crops first); None follows the schedule
    n_views: int | None = None
    d: int = 64
    n_layers: int = 2
    use_positional: bool = False
    eval_every: int = 1
    # step-size multiplier for the view encoder; 0 keeps it at its calibrated init
    encoder_lr_mult: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.n_views is not None and self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if not (math.isfinite(self.encoder_lr_mult) and self.encoder_lr_mult >= 0):
            raise ValueError(f"encoder_lr_mult must be finite and >= 0, got {self.encoder_lr_mult}")
        LossConfig(self.alpha, self.delta)
        # surfaces crop-plan errors at construction time
        self.plan(0, 0)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.delta)

    @property
    def use(self) -> tuple[str, ...]:
        return VARIANTS[self.variant][1]

    @property
    def frozen_encoder(self) -> bool:
        return self.encoder_lr_mult == 0

    @property
    def is_head_variant(self) -> bool:
        return self.variant in ABLATION_VARIANTS

    def model_config(self, c: int) -> ModelConfig:
        return ModelConfig(c=c, d=self.d, n_layers=self.n_layers, use_positional=self.use_positional,
                           **VARIANTS[self.variant][0])

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def plan(self, epoch: int, crop_seed: int) -> CropPlan:
        if self.n_views is not None:
            return CropPlan(self.n_views, self.patch_frac, True, crop_seed, fixed_prefix=True)
        return schedule(epoch, self.warmup_epochs, self.k_max, self.patch_frac, crop_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def crop_seed(*key: int) -> int:
    return int(np.random.SeedSequence([abs(int(k)) for k in key]).generate_state(1)[0])


def epoch_plans(cfg: TrainConfig, epoch: int, idx) -> list[CropPlan]:
    """Training crop plans of one batch; per-instance seeds only matter for random crops."""
    shared = cfg.plan(epoch, 0)
    if shared.n_random == 0:
        return [shared] * len(idx)
    return [cfg.plan(epoch, crop_seed(cfg.seed, epoch, int(i))) for i in idx]


def eval_plans(cfg: TrainConfig, n: int, split: str) -> list[CropPlan]:
    """Crop plans used for evaluation: the final training schedule, fixed seeds."""
    tag = 0 if split == "train" else 1
    return [cfg.plan(cfg.epochs, crop_seed(cfg.seed, 0xE7A1, tag, i)) for i in range(n)]


@dataclass
class TrainState:
    cfg: TrainConfig
    model: RelationalProxyModel
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    # view embeddings of a frozen encoder, per (split, crop layout); never persisted
    cache: dict = field(default_factory=dict, repr=False, compare=False)


CALIBRATION_SIZE = 128


def new_state(dataset: Dataset, cfg: TrainConfig) -> TrainState:
    model = RelationalProxyModel(cfg.model_config(dataset.meta.c), seed=cfg.seed)
    n = min(CALIBRATION_SIZE, len(dataset.train))
    idx = np.random.default_rng([cfg.seed, 0xCA]).permutation(len(dataset.train))[:n]
    plans = [cfg.plan(0, crop_seed(cfg.seed, 0xCA, int(i))) for i in idx]
    model.center_outputs(model.prepare(dataset.images("train")[idx], plans))
    velocity = {k: np.zeros_like(v.data) for k, v in model.params.items()}
    return TrainState(cfg, model, 0, velocity, [])


# ------------------------------------------------------------ steps

def batch_loss(model: RelationalProxyModel, cfg: TrainConfig, views, labels: np.ndarray):
    """Objective for one batch plus the scores used for accuracy.

    ``views`` is a prepared view stack (B, 1 + k, side, side) or, with a
    frozen encoder, a Tensor of view embeddings (B, 1 + k, d).
    """
    if isinstance(views, Tensor):
        reps = model.forward_embeddings(views)
    else:
        reps = model.forward_views(views)
    if cfg.is_head_variant:
        logits = model.head_logits(reps.z_g)
        return ablation_loss(cfg.variant, reps, labels, logits), logits.data
    loss = rproxy_loss(reps, labels, model.proxies, cfg.loss, cfg.use)
    return loss, inference_scores(reps, model.proxies, cfg.use)


def sgd_step(model: RelationalProxyModel, velocity: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float, encoder_lr_mult: float = 1.0) -> None:
    """Momentum SGD; weight decay skips the proxies.  Encoder parameters are
    stepped with ``lr * encoder_lr_mult`` and left untouched when that is 0."""
    for name, p in model.params.items():
        step = lr * encoder_lr_mult if name.startswith("encoder.") else lr
        if step == 0 and name.startswith("encoder."):
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and name != "proxies":
            g = g + weight_decay * p.data
        v = momentum * velocity[name] + g
        velocity[name] = v
        p.data = p.data - step * v


EMBED_CHUNK = 64


def crop_layout(plan: CropPlan):
    """Cache key of a crop plan without random crops, else None."""
    if plan.n_random:
        return None
    return plan.k, plan.patch_frac, plan.fixed_five, plan.fixed_prefix


def split_embeddings(model: RelationalProxyModel, dataset: Dataset, split: str, plan: CropPlan,
                     cache: dict | None = None) -> np.ndarray:
    """View embeddings (N, 1 + k, d) of a whole split under one random-free plan.

    Computed in fixed chunks so the values never depend on batch composition.
    """
    key = (split, crop_layout(plan))
    if cache is not None and key in cache:
        return cache[key]
    images = dataset.images(split)
    out = []
    with T.no_grad():
        for s in range(0, len(images), EMBED_CHUNK):
            chunk = images[s:s + EMBED_CHUNK]
            out.append(model.embed_views(model.prepare(chunk, [plan] * len(chunk))).data)
    z = np.concatenate(out)
    if cache is not None:
        cache[key] = z
    return z


def batch_inputs(state: TrainState, dataset: Dataset, split: str, idx: np.ndarray,
                 plans: list[CropPlan]):
    """Prepared views for a batch, or cached embeddings when the encoder is frozen."""
    model = state.model
    if state.cfg.frozen_encoder and all(crop_layout(p) is not None for p in plans) \
            and len({crop_layout(p) for p in plans}) == 1:
        return Tensor(split_embeddings(model, dataset, split, plans[0], state.cache)[idx])
    insts = dataset.split(split)
    images = np.stack([insts[int(i)].image for i in idx]).astype(np.float64)
    views = model.prepare(images, plans)
    if state.cfg.frozen_encoder:
        with T.no_grad():
            return Tensor(model.embed_views(views).data)
    return views


def predict_split(model: RelationalProxyModel, cfg: TrainConfig, dataset: Dataset, split: str,
                  batch: int = 64, cache: dict | None = None) -> np.ndarray:
    """Class scores (N, c) for a split under the evaluation crop plans."""
    n = len(dataset.split(split))
    plans = eval_plans(cfg, n, split)
    state = TrainState(cfg, model, cache=cache if cache is not None else {})
    out = []
    with T.no_grad():
        for s in range(0, n, batch):
            idx = np.arange(s, min(n, s + batch))
            inputs = batch_inputs(state, dataset, split, idx, plans[s:s + batch])
            if isinstance(inputs, Tensor):
                reps = model.forward_embeddings(inputs)
            else:
                reps = model.forward_views(inputs)
            if cfg.is_head_variant:
                out.append(model.head_logits(reps.z_g).data)
            else:
                out.append(inference_scores(reps, model.proxies, cfg.use))
    return np.concatenate(out)


def run_epoch(state: TrainState, dataset: Dataset) -> dict:
    cfg, model = state.cfg, state.model
    epoch = state.epoch
    labels = dataset.labels("train")
    n = len(labels)
    order = np.random.default_rng([cfg.seed, 0x5B, epoch]).permutation(n)
    n_batches = max(1, n // cfg.batch_size)
    lr = cfg.lr_at(epoch)
    params = [p for name, p in model.params.items()
              if not (cfg.frozen_encoder and name.startswith("encoder."))]
    total, correct = 0.0, 0
    k = None
    for idx in np.array_split(order, n_batches):
        plans = epoch_plans(cfg, epoch, idx)
        k = plans[0].k
        views = batch_inputs(state, dataset, "train", idx, plans)
        try:
            loss, scores = batch_loss(model, cfg, views, labels[idx])
            if not math.isfinite(loss.item()):
                raise T.NonFiniteError("loss is not finite")
            T.backward(loss, params)
        except T.NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from None
        sgd_step(model, state.velocity, lr, cfg.momentum, cfg.weight_decay, cfg.encoder_lr_mult)
        total += loss.item() * len(idx)
        correct += int((np.argmax(scores, axis=1) == labels[idx]).sum())
    test_acc = None
    if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
        pred = np.argmax(predict_split(model, cfg, dataset, "test", cache=state.cache), axis=1)
        test_acc = float((pred == dataset.labels("test")).mean())
    record = {"epoch": epoch, "loss": total / n, "train_acc": correct / n, "test_acc": test_acc,
              "lr": lr, "k": k}
    state.metrics.append(record)
    state.epoch += 1
    return record


def train(dataset: Dataset, cfg: TrainConfig, state: TrainState | None = None,
          out_dir=None, epochs: int | None = None) -> TrainState:
    """Train until ``cfg.epochs`` (or ``epochs`` more epochs when given).

    With ``out_dir`` a metrics line (and a separate timing line) is appended per
    epoch and a checkpoint is written after every epoch, so a divergence leaves
    the last good one behind.
    """
    c = dataset.meta.c
    state = state or new_state(dataset, cfg)
    if state.model.cfg.c != c:
        raise ConfigMismatchError(f"model has {state.model.cfg.c} proxies, dataset has {c} classes")
    stop = cfg.epochs if epochs is None else min(cfg.epochs, state.epoch + epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.epoch < stop:
        t0 = time.perf_counter()
        try:
            record = run_epoch(state, dataset)
        except DivergenceError:
            log.error("training diverged at epoch %d; last good checkpoint kept", state.epoch)
            raise
        wall_ms = round(1000 * (time.perf_counter() - t0), 3)
        log.info("epoch %d loss %.4f train %.3f test %s (%.0f ms)", record["epoch"], record["loss"],
                 record["train_acc"], record["test_acc"], wall_ms)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
            # wall-clock time lives apart from the metrics so the metrics log stays reproducible
            with open(out / "timing.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"epoch": record["epoch"], "wall_ms": wall_ms}) + "\n")
            checkpoint_save(state, out)
    return state


# ------------------------------------------------------------ checkpoints

def checkpoint_save(state: TrainState, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_model(state.model, path / "model.json.tmp")
    doc = {
        "format_version": STATE_VERSION,
        "epoch": state.epoch,
        "train_config": state.cfg.to_dict(),
        "velocity": {k: v.reshape(-1).tolist() for k, v in state.velocity.items()},
        "metrics": state.metrics,
    }
    (path / "state.json.tmp").write_text(json.dumps(doc), encoding="utf-8")
    (path / "model.json.tmp").replace(path / "model.json")
    (path / "state.json.tmp").replace(path / "state.json")
    return path


def checkpoint_load(path, expect: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    try:
        doc = json.loads((path / "state.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no state.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt state.json: {exc}") from None
    if doc.get("format_version") != STATE_VERSION:
        raise CheckpointError(f"unsupported state version {doc.get('format_version')!r}")
    cfg = TrainConfig.from_dict(doc["train_config"])
    if expect is not None and expect != cfg:
        raise ConfigMismatchError("checkpoint train config differs from the expected one")
    model = load_model(path / "model.json")
    if model.cfg != cfg.model_config(model.cfg.c):
        raise ConfigMismatchError("model config in checkpoint does not match its train config")
    velocity = {}
    for name, p in model.params.items():
        try:
            velocity[name] = np.array(doc["velocity"][name], dtype=np.float64).reshape(p.shape)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"corrupt momentum buffer {name}: {exc}") from None
    return TrainState(cfg, model, int(doc["epoch"]), velocity, list(doc["metrics"]))
