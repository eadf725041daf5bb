"""Accuracy, geometric and attention diagnostics, and the sweep/ablation harness."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataops import Dataset
from .train import (TrainConfig, TrainState, crop_layout, eval_plans, predict_split,
                    split_embeddings, train)

log = logging.getLogger(__name__)

DEFAULT_EPSILON_SCALE = 0.25
# short axis names accepted by sweep, mapped to TrainConfig fields
AXIS_FIELDS = {"l": "n_views", "patch": "patch_frac"}
ABLATION_ORDER = ("ce_head", "huber_relation", "pairwise_contrastive", "linear_rho", "mean_pool",
                  "full", "drop_zL", "drop_zg", "drop_r")


class EvalError(ValueError):
    pass


# ------------------------------------------------------------ accuracy

def _check_classes(state: TrainState, dataset: Dataset) -> None:
    if state.model.cfg.c != dataset.meta.c:
        raise EvalError(f"model has {state.model.cfg.c} classes, dataset has {dataset.meta.c}")


def accuracy_report(scores: np.ndarray, labels: np.ndarray, groups: dict[int, list[int]]) -> dict:
    """Overall and within-group accuracy of a score matrix (N, c).

    Within-group prediction is the argmax restricted to the classes of the
    instance's own group, which isolates the fine-grained decision.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EvalError("empty split")
    pred = np.argmax(scores, axis=1)
    known = {cls for members in groups.values() for cls in members}
    if not set(labels.tolist()) <= known or scores.shape[1] < max(known) + 1:
        raise EvalError("labels or score columns do not match the class groups")
    within = np.empty(len(labels), dtype=bool)
    per_group = []
    for g, members in sorted(groups.items()):
        members = list(members)
        rows = np.nonzero(np.isin(labels, members))[0]
        local = np.asarray(members)[np.argmax(scores[np.ix_(rows, members)], axis=1)] if rows.size else []
        within[rows] = local == labels[rows]
        confusion = np.zeros((len(members), len(members)), dtype=np.int64)
        for t, p in zip(labels[rows], local):
            confusion[members.index(int(t)), members.index(int(p))] += 1
        per_group.append({
            "group": int(g), "classes": [int(c) for c in members], "n": int(rows.size),
            "accuracy": float((pred[rows] == labels[rows]).mean()) if rows.size else None,
            "within_accuracy": float(within[rows].mean()) if rows.size else None,
            "confusion": confusion.tolist(),
        })
    return {"n": int(len(labels)), "accuracy": float((pred == labels).mean()),
            "within_group_accuracy": float(within.mean()), "groups": per_group}


def evaluate(state: TrainState, dataset: Dataset, split: str = "test") -> dict:
    """Accuracy of the inference rule overall and within each confusable group."""
    _check_classes(state, dataset)
    if not dataset.split(split):
        raise EvalError(f"split {split!r} is empty")
    scores = predict_split(state.model, state.cfg, dataset, split, cache=state.cache)
    report = accuracy_report(scores, dataset.labels(split), dataset.groups())
    report["split"] = split
    return report


# ------------------------------------------------------------ view embeddings

def view_embeddings(state: TrainState, dataset: Dataset, split: str = "test") -> np.ndarray:
    """Encoder outputs (N, 1 + k, d) for every view of a split, global view first."""
    model, cfg = state.model, state.cfg
    n = len(dataset.split(split))
    plans = eval_plans(cfg, n, split)
    if all(crop_layout(p) is not None for p in plans) and len({crop_layout(p) for p in plans}) == 1:
        cache = state.cache if cfg.frozen_encoder else None
        return split_embeddings(model, dataset, split, plans[0], cache)
    images = dataset.images(split)
    out = []
    with T.no_grad():
        for s in range(0, n, 64):
            out.append(model.embed_views(model.prepare(images[s:s + 64], plans[s:s + 64])).data)
    return np.concatenate(out)


def dump_embeddings(state: TrainState, dataset: Dataset, out_dir, split: str = "test") -> Path:
    """Write ``emb.bin`` (little-endian float32 rows) and ``emb_meta.json``."""
    z = view_embeddings(state, dataset, split)
    n, v, d = z.shape
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "emb.bin").write_bytes(z.reshape(n * v, d).astype("<f4").tobytes())
    labels = dataset.labels(split)
    meta = {
        "split": split, "rows": n * v, "dim": d, "dtype": "<f4",
        "labels": np.repeat(labels, v).tolist(),
        "instance": np.repeat(np.arange(n), v).tolist(),
        "view_kind": (["global"] + ["local"] * (v - 1)) * n,
    }
    (out / "emb_meta.json").write_text(json.dumps(meta), encoding="utf-8")
    return out


# ------------------------------------------------------------ disjointness

@dataclass(frozen=True)
class DisjointnessReport:
    min_global_local: np.ndarray      # per instance: min distance from z_g to any z_l
    median_local_local: np.ndarray    # per instance: median pairwise local distance
    epsilon: np.ndarray               # per instance epsilon used
    disjoint: np.ndarray              # min_global_local > 2 * epsilon

    @property
    def fraction(self) -> float:
        return float(self.disjoint.mean())

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "n": int(self.disjoint.size),
                "min_global_local": self.min_global_local.tolist(),
                "median_local_local": self.median_local_local.tolist(),
                "epsilon": self.epsilon.tolist(), "disjoint": self.disjoint.tolist()}


def disjointness_from_embeddings(z: np.ndarray, epsilon: float | None = None,
                                 scale: float = DEFAULT_EPSILON_SCALE) -> DisjointnessReport:
    """Epsilon-disjointness of global and local embeddings, ``z`` of shape (N, 1 + k, d).

    With ``epsilon`` None each instance uses ``scale`` times its median
    local-local distance (this needs k >= 2).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[1] < 2:
        raise EvalError(f"need embeddings of shape (N, 1 + k, d) with k >= 1, got {z.shape}")
    g, loc = z[:, 0], z[:, 1:]
    g2l = np.linalg.norm(loc - g[:, None, :], axis=-1).min(axis=1)
    k = loc.shape[1]
    if k >= 2:
        i, j = np.triu_indices(k, 1)
        med = np.median(np.linalg.norm(loc[:, i] - loc[:, j], axis=-1), axis=1)
    else:
        med = np.full(len(z), np.nan)
    if epsilon is None:
        if k < 2:
            raise EvalError("the default epsilon policy needs at least two local views")
        eps = scale * med
    else:
        if epsilon < 0:
            raise EvalError("epsilon must be >= 0")
        eps = np.full(len(z), float(epsilon))
    return DisjointnessReport(g2l, med, eps, g2l > 2 * eps)


def disjointness(state: TrainState, dataset: Dataset, split: str = "test", epsilon: float | None = None,
                 scale: float = DEFAULT_EPSILON_SCALE) -> DisjointnessReport:
    """Embed every view with the encoder alone and test global/local separation."""
    return disjointness_from_embeddings(view_embeddings(state, dataset, split), epsilon, scale)


# ------------------------------------------------------------ attention graphs

@dataclass(frozen=True)
class AttentionGraph:
    nodes: list[dict]
    edges: list[tuple[int, int, float]]
    threshold: float | None

    def to_dict(self) -> dict:
        return {"nodes": self.nodes, "edges": [[i, j, w] for i, j, w in self.edges],
                "threshold": self.threshold}


def graph_from_attention(attention: np.ndarray, nodes: Sequence[dict] | None = None) -> AttentionGraph:
    """Undirected graph over local views from a (k, k) local-local attention matrix.

    Scores are symmetrised by averaging a(i, j) and a(j, i); an edge joins
    i < j when its score is strictly above the mean of all pairwise scores.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise EvalError(f"attention must be a square matrix, got shape {a.shape}")
    k = a.shape[0]
    nodes = list(nodes) if nodes is not None else [{"index": i} for i in range(k)]
    if len(nodes) != k:
        raise EvalError(f"{len(nodes)} node descriptors for {k} views")
    if k < 2:
        return AttentionGraph(nodes, [], None)
    sym = (a + a.T) / 2
    i, j = np.triu_indices(k, 1)
    threshold = float(sym[i, j].mean())
    edges = [(int(p), int(q), float(sym[p, q])) for p, q in zip(i, j)
             if sym[p, q] > threshold and sym[p, q] > 0]
    return AttentionGraph(nodes, edges, threshold)


def attention_graph(state: TrainState, dataset: Dataset, instance: int, split: str = "test") -> AttentionGraph:
    """Graph from the final summariser layer's attention for one instance."""
    model, cfg = state.model, state.cfg
    insts = dataset.split(split)
    if not 0 <= instance < len(insts):
        raise EvalError(f"instance {instance} out of range for split {split!r} ({len(insts)} instances)")
    if model.cfg.summarizer != "ast":
        raise EvalError("attention graphs need the attention summariser")
    plan = eval_plans(cfg, len(insts), split)[instance]
    image = insts[instance].image[None].astype(np.float64)
    (g, locals_), = model.extract_views(image, [plan])
    with T.no_grad():
        _, attention = model.forward_views(model.prepare(image, [plan]), return_attention=True)
    nodes = [{"origin": list(v.origin), "side": int(v.pixels.shape[0])} for v in locals_]
    return graph_from_attention(attention[-1][0, 1:, 1:], nodes)


# ------------------------------------------------------------ sweeps and ablations

@dataclass
class SweepResult:
    axes: dict[str, list]
    cells: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"axes": self.axes, "cells": self.cells}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    def cell(self, **coords) -> dict:
        for c in self.cells:
            if all(c["coords"].get(k) == v for k, v in coords.items()):
                return c
        raise KeyError(coords)


def axis_field(name: str) -> str:
    fname = AXIS_FIELDS.get(name, name)
    if fname not in TrainConfig.__dataclass_fields__:
        raise EvalError(f"unknown sweep axis {name!r}")
    return fname


def _seed_list(seeds: int | Sequence[int], base: int) -> list[int]:
    if isinstance(seeds, int):
        if seeds < 1:
            raise EvalError("need at least one seed")
        return [base + i for i in range(seeds)]
    return [int(s) for s in seeds]


def run_cell(dataset: Dataset, cfg: TrainConfig) -> dict:
    """Train one configuration from scratch and evaluate it on the test split."""
    state = train(dataset, cfg)
    report = evaluate(state, dataset, "test")
    return {"accuracy": report["accuracy"], "within_group_accuracy": report["within_group_accuracy"]}


def sweep(dataset: Dataset, base_cfg: TrainConfig, axes: dict[str, Sequence], seeds: int | Sequence[int] = 3,
          progress: Callable[[dict], None] | None = None) -> SweepResult:
    """Train one model per grid cell and seed; report mean and std test accuracy.

    Every cell shares ``base_cfg`` except for the swept fields and the seed.
    """
    if not axes:
        raise EvalError("sweep needs at least one axis")
    names = list(axes)
    fields_ = [axis_field(n) for n in names]
    values = [list(axes[n]) for n in names]
    seed_list = _seed_list(seeds, base_cfg.seed)
    # surface invalid axis values before any training starts
    for combo in itertools.product(*values):
        replace(base_cfg, **dict(zip(fields_, combo)))
    result = SweepResult({n: v for n, v in zip(names, values)})
    for combo in itertools.product(*values):
        overrides = dict(zip(fields_, combo))
        accs, within = [], []
        for s in seed_list:
            out = run_cell(dataset, replace(base_cfg, seed=s, **overrides))
            accs.append(out["accuracy"])
            within.append(out["within_group_accuracy"])
            log.info("cell %s seed %d: acc %.4f within %.4f", overrides, s, accs[-1], within[-1])
        cell = {"coords": dict(zip(names, combo)), "seeds": seed_list, "accs": accs,
                "within_accs": within, "mean_acc": float(np.mean(accs)), "std_acc": float(np.std(accs)),
                "mean_within_acc": float(np.mean(within))}
        result.cells.append(cell)
        if progress is not None:
            progress(cell)
    return result


def ablate(dataset: Dataset, base_cfg: TrainConfig, seeds: int | Sequence[int] = 3,
           variants: Sequence[str] = ABLATION_ORDER,
           progress: Callable[[dict], None] | None = None) -> SweepResult:
    """Accuracy of each model/objective variant on one dataset."""
    return sweep(dataset, base_cfg, {"variant": list(variants)}, seeds, progress)
