"""Relation-agnostic encoder, attribute summarisation transformer, view unification.

All learnable state lives in a flat ``{name: Tensor}`` dict so that the
optimizer, checkpoints and gradient checks can treat it uniformly.  Names are
stable and listed by :func:`param_shapes`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .views import (CropPlan, View, ViewError, crop_global, crop_locals, expand_bbox, locate_global,
                    resize)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# a salient region smaller than this fraction of the image side is widened
MIN_GLOBAL_FRAC = 0.5


class ConfigMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    c: int = 8
    d: int = 64
    n_layers: int = 2
    use_positional: bool = False
    separate_kv: bool = False
    input_side: int = 16
    channels: tuple[int, int] = (16, 32)
    rho: str = "mlp"            # "mlp" | "linear"
    summarizer: str = "ast"     # "ast" | "mean"
    head: bool = False          # linear classifier over z_g (baseline variants)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.rho not in ("mlp", "linear"):
            raise ValueError(f"rho must be 'mlp' or 'linear', got {self.rho!r}")
        if self.summarizer not in ("ast", "mean"):
            raise ValueError(f"summarizer must be 'ast' or 'mean', got {self.summarizer!r}")
        if self.c < 1 or self.d < 1 or self.n_layers < 1:
            raise ValueError("c, d and n_layers must be positive")
        if self.input_side < 8:
            raise ValueError("encoder input side must be >= 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RepTriple:
    z_g: Tensor
    z_L: Tensor
    r: Tensor

    def as_dict(self) -> dict[str, Tensor]:
        return {"z_g": self.z_g, "z_L": self.z_L, "r": self.r}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = cfg.channels
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.conv1.weight": (9, c1),
        "encoder.conv2.weight": (9 * c1, c2),
        "encoder.fc.weight": (c2, d),
        "encoder.fc.bias": (d,),
    }
    if cfg.summarizer == "ast":
        shapes["ast.seed"] = (d,)
        for i in range(cfg.n_layers):
            p = f"ast.layer{i}."
            shapes[p + "w_q"] = (d, d)
            shapes[p + "w"] = (d, d)
            if cfg.separate_kv:
                shapes[p + "w_v"] = (d, d)
            shapes[p + "ff1.weight"] = (d, 2 * d)
            shapes[p + "ff1.bias"] = (2 * d,)
            shapes[p + "ff2.weight"] = (2 * d, d)
            shapes[p + "ff2.bias"] = (d,)
    if cfg.rho == "mlp":
        shapes["rho.fc1.weight"] = (2 * d, 2 * d)
        shapes["rho.fc1.bias"] = (2 * d,)
        shapes["rho.fc2.weight"] = (2 * d, d)
        shapes["rho.fc2.bias"] = (d,)
    else:
        shapes["rho.linear.weight"] = (2 * d, d)
        shapes["rho.linear.bias"] = (d,)
    if cfg.head:
        shapes["head.weight"] = (d, cfg.c)
        shapes["head.bias"] = (cfg.c,)
    shapes["proxies"] = (cfg.c, d)
    return shapes


_RELU_INPUTS = ("conv1", "conv2", "ff1", "rho.fc1")


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """He-normal weights before ReLUs, LeCun-normal elsewhere, zero biases,
    unit-norm Gaussian proxies."""
    rng = np.random.default_rng([seed, 0x3D])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "proxies":
            p = rng.standard_normal(shape)
            p /= np.linalg.norm(p, axis=1, keepdims=True)
        elif name == "ast.seed":
            p = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif name.endswith("bias"):
            p = np.zeros(shape)
        else:
            gain = 2.0 if any(tag in name for tag in _RELU_INPUTS) else 1.0
            p = rng.standard_normal(shape) * math.sqrt(gain / shape[0])
        params[name] = Tensor(p, requires_grad=True)
    return params


def standardize(pixels: np.ndarray) -> Tensor:
    x = np.asarray(pixels, dtype=np.float64)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    return Tensor(((x - mu) / np.maximum(sd, 1e-6))[..., None])


def layer_norm(h: Tensor) -> Tensor:
    """Per-row centring and scaling to norm sqrt(d), no affine parameters. Constant rows map to zero."""
    d = h.shape[-1]
    centre = Tensor(np.eye(d) - 1.0 / d)
    return T.scale(T.l2_normalize(h @ centre, zero_ok=True), math.sqrt(d))


def positional_table(k: int, d: int) -> np.ndarray:
    pos = np.arange(1, k + 1)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class RelationalProxyModel:
    """Encoder f, AST, view-unification rho and the class proxies."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise ConfigMismatchError(
                f"parameter names differ from config: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigMismatchError(
                    f"{name}: shape {self.params[name].shape} does not match config {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def proxies(self) -> Tensor:
        return self.params["proxies"]

    # ------------------------------------------------------------ encoder f

    def _conv_stack(self, x: Tensor) -> Tensor:
        """NHWC input -> final ReLU feature map (pre-pool)."""
        p = self.params
        h = T.relu(T.im2col(x, 3, stride=1, pad=1) @ p["encoder.conv1.weight"])
        return T.relu(T.im2col(h, 3, stride=2, pad=1) @ p["encoder.conv2.weight"])

    def encode_pixels(self, pixels: np.ndarray) -> Tensor:
        """Encode a stack of already resized views, shape (N, side, side).

        Each view is standardised to zero mean and unit variance first, so
        the pooled features are not dominated by overall brightness. The
        embedding is then layer-normalised (zero mean, norm sqrt(d)).
        """
        return layer_norm(self._embed_raw(pixels))

    def _embed_raw(self, pixels: np.ndarray) -> Tensor:
        feat = T.mean(self._conv_stack(standardize(pixels)), axis=(1, 2))
        return feat @ self.params["encoder.fc.weight"] + self.params["encoder.fc.bias"]

    def activation_maps(self, images: np.ndarray) -> np.ndarray:
        """Channel-mean of the final conv activations at native resolution."""
        with T.no_grad():
            feat = self._conv_stack(Tensor(np.asarray(images, dtype=np.float64)[..., None]))
        return feat.data.mean(axis=-1)

    def encode(self, view: View | np.ndarray) -> Tensor:
        pixels = view.pixels if isinstance(view, View) else np.asarray(view)
        return T.reshape(self.encode_pixels(resize(pixels, self.cfg.input_side)[None]), (self.cfg.d,))

    # ------------------------------------------------------------ AST

    def summarize(self, Z: Tensor, return_attention: bool = False):
        """Summarise local embeddings ``Z`` of shape (B, k, d) into (B, d).

        The learnable seed column is prepended; every column attends over all
        k+1 columns with a shared key/value projection, followed by residual
        feed-forward blocks.  Without positional terms the result does not
        depend on the order of the k local columns.
        """
        cfg = self.cfg
        if Z.ndim != 3 or Z.shape[1] < 1:
            raise T.ShapeError(f"summarize: expected (B, k>=1, d) input, got {Z.shape}")
        if Z.shape[2] != cfg.d:
            raise T.ShapeError(f"summarize: embedding size {Z.shape[2]} != d={cfg.d}")
        B, k, d = Z.shape
        if cfg.summarizer == "mean":
            out = T.mean(Z, axis=1)
            return (out, []) if return_attention else out
        p = self.params
        if cfg.use_positional:
            Z = Z + Tensor(np.broadcast_to(positional_table(k, d), (B, k, d)))
        seed = T.reshape(T.stack([p["ast.seed"]] * B), (B, 1, d))
        X = T.concat([seed, Z], axis=1)
        inv = 1.0 / math.sqrt(d)
        attention = []
        for i in range(cfg.n_layers):
            q = X @ p[f"ast.layer{i}.w_q"]
            kv = X @ p[f"ast.layer{i}.w"]
            v = X @ p[f"ast.layer{i}.w_v"] if cfg.separate_kv else kv
            a = T.softmax((q @ T.transpose(kv)) * inv)
            attention.append(a.data)
            X = X + a @ v
            hidden = T.relu(X @ p[f"ast.layer{i}.ff1.weight"] + p[f"ast.layer{i}.ff1.bias"])
            X = X + (hidden @ p[f"ast.layer{i}.ff2.weight"] + p[f"ast.layer{i}.ff2.bias"])
        out = T.reshape(X[:, 0, :], (B, d))
        return (out, attention) if return_attention else out

    def ast_summarize(self, Z_L) -> Tensor:
        """Single-instance form: a list of k d-vectors (or a (k, d) tensor)."""
        if isinstance(Z_L, Tensor):
            Z = Z_L
        else:
            if len(Z_L) == 0:
                raise T.ShapeError("ast_summarize: empty set of local embeddings")
            Z = T.stack([z if isinstance(z, Tensor) else Tensor(z) for z in Z_L])
        if Z.ndim != 2:
            raise T.ShapeError(f"ast_summarize: expected (k, d), got {Z.shape}")
        return T.reshape(self.summarize(T.reshape(Z, (1,) + Z.shape)), (self.cfg.d,))

    # ------------------------------------------------------------ rho

    def unify(self, z_g: Tensor, z_L: Tensor) -> Tensor:
        if z_g.shape != z_L.shape or z_g.shape[-1] != self.cfg.d:
            raise T.ShapeError(f"unify: incompatible shapes {z_g.shape} and {z_L.shape}")
        p = self.params
        x = T.concat([z_g, z_L], axis=-1)
        if self.cfg.rho == "linear":
            return x @ p["rho.linear.weight"] + p["rho.linear.bias"]
        h = T.relu(x @ p["rho.fc1.weight"] + p["rho.fc1.bias"])
        return h @ p["rho.fc2.weight"] + p["rho.fc2.bias"]

    def head_logits(self, z_g: Tensor) -> Tensor:
        return z_g @ self.params["head.weight"] + self.params["head.bias"]

    # ------------------------------------------------------------ pipeline

    def extract_views(self, images: np.ndarray, plans: list[CropPlan]) -> list[tuple[View, list[View]]]:
        """Global view from the activation map, then the local crops of each image."""
        images = np.asarray(images, dtype=np.float64)
        maps = self.activation_maps(images)
        out = []
        for img, amap, plan in zip(images, maps, plans):
            try:
                bbox = locate_global(amap, img.shape)
                bbox = expand_bbox(bbox, int(round(MIN_GLOBAL_FRAC * min(img.shape))), img.shape)
                g = crop_global(img, bbox)
            except ViewError as exc:
                log.warning("falling back to the full image: %s", exc)
                g = View(img, "global", (0, 0))
            out.append((g, crop_locals(g, plan)))
        return out

    def prepare(self, images: np.ndarray, plans: list[CropPlan]) -> np.ndarray:
        """Resized view stack of shape (B, 1 + k, side, side); global view first."""
        side = self.cfg.input_side
        stacks = []
        for g, locals_ in self.extract_views(images, plans):
            stacks.append(np.stack([resize(v.pixels, side) for v in [g] + locals_]))
        return np.stack(stacks)

    def embed_views(self, views: np.ndarray) -> Tensor:
        """Encoder output for a prepared view stack: (B, 1 + k, d)."""
        B, n, s, _ = views.shape
        return T.reshape(self.encode_pixels(views.reshape(B * n, s, s)), (B, n, self.cfg.d))

    def forward_views(self, views: np.ndarray, return_attention: bool = False):
        """Differentiable part of the pipeline on a prepared view stack."""
        if views.shape[1] < 2:
            raise T.ShapeError("forward: need a global view and at least one local view")
        return self.forward_embeddings(self.embed_views(views), return_attention)

    def forward_embeddings(self, z: Tensor, return_attention: bool = False):
        """Summary and relation stages on view embeddings (B, 1 + k, d), global first."""
        B, n, d = z.shape
        if n < 2:
            raise T.ShapeError("forward: need a global view and at least one local view")
        z_g = T.reshape(z[:, 0, :], (B, d))
        summary = self.summarize(z[:, 1:, :], return_attention)
        z_L, attention = summary if return_attention else (summary, None)
        reps = RepTriple(z_g, z_L, self.unify(z_g, z_L))
        return (reps, attention) if return_attention else reps

    def forward(self, images: np.ndarray, plans: list[CropPlan]) -> RepTriple:
        return self.forward_views(self.prepare(images, plans))

    def center_outputs(self, views: np.ndarray) -> None:
        """Data-dependent init: shift the output biases so that z_g, z_L and r
        have zero mean over ``views``, and scale the encoder's output layer to
        unit rms before the layer norm.

        Pooled ReLU features share a large common direction, which leaves all
        representations nearly collinear and cosine similarities saturated.
        """
        p = self.params
        with T.no_grad():
            z = self._embed_raw(views.reshape((-1,) + views.shape[2:])).data
            # unit-rms pre-norm embeddings keep the layer norm's gradient scale near 1
            rms = max(float(np.sqrt(((z - z.mean(axis=0)) ** 2).mean())), 1e-12)
            p["encoder.fc.bias"].data = (p["encoder.fc.bias"].data - z.mean(axis=0)) / rms
            p["encoder.fc.weight"].data = p["encoder.fc.weight"].data / rms
            reps = self.forward_views(views)
            if self.cfg.summarizer == "ast":
                last = f"ast.layer{self.cfg.n_layers - 1}.ff2.bias"
                p[last].data = p[last].data - reps.z_L.data.mean(axis=0)
            reps = self.forward_views(views)
            bias = "rho.fc2.bias" if self.cfg.rho == "mlp" else "rho.linear.bias"
            p[bias].data = p[bias].data - reps.r.data.mean(axis=0)

    # ------------------------------------------------------------ state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = param_shapes(self.cfg)
        if set(state) != set(expected):
            raise ConfigMismatchError(f"parameter names differ: {sorted(set(state) ^ set(expected))}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != expected[name]:
                raise ConfigMismatchError(f"{name}: shape {arr.shape} != {expected[name]}")
            self.params[name].data = arr.copy()

    def copy(self) -> "RelationalProxyModel":
        return RelationalProxyModel(self.cfg, {k: Tensor(v.data, requires_grad=True)
                                               for k, v in self.params.items()})


def same_params(a: RelationalProxyModel, b: RelationalProxyModel) -> bool:
    """Value-exact comparison of two models (config and every parameter)."""
    if a.cfg != b.cfg or set(a.params) != set(b.params):
        return False
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def save_model(model: RelationalProxyModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                   for k, v in model.params.items()},
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def load_model(path, expect: ModelConfig | None = None) -> RelationalProxyModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    if expect is not None and cfg != expect:
        raise ConfigMismatchError(f"checkpoint config {cfg} does not match expected {expect}")
    try:
        params = {k: Tensor(np.array(v["data"], dtype=np.float64).reshape(v["shape"]), requires_grad=True)
                  for k, v in doc["params"].items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt parameter payload in {path}: {exc}") from None
    return RelationalProxyModel(cfg, params)
