import json

import numpy as np
import pytest

from relproxy import dataops as D
from relproxy import tensor as T
from relproxy.model import CheckpointError, ConfigMismatchError, same_params
from relproxy.train import (TrainConfig, batch_inputs, batch_loss, checkpoint_load, checkpoint_save,
                            crop_seed, new_state, predict_split, sgd_step, split_embeddings, train)

from conftest import tiny_cfg, tiny_meta


def _snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


@pytest.mark.parametrize("mult", [0.0, 1.0])
def test_zero_learning_rate_leaves_parameters(tiny_dataset, mult):
    cfg = tiny_cfg(lr=0.0, encoder_lr_mult=mult, epochs=3)
    state = new_state(tiny_dataset, cfg)
    before = _snapshot(state.model)
    train(tiny_dataset, cfg, state)
    assert state.epoch == 3
    for k, v in state.model.params.items():
        assert v.data.tobytes() == before[k].tobytes(), k


def test_single_step_matches_hand_update():
    ds = D.generate(tiny_meta(c=2, k=4, n_train=2, n_test=1))
    cfg = tiny_cfg(momentum=0.0, weight_decay=1e-2, batch_size=4, encoder_lr_mult=1.0)
    state = new_state(ds, cfg)
    model = state.model
    idx = np.arange(4)
    plans = [cfg.plan(0, crop_seed(0, int(i))) for i in idx]
    views = batch_inputs(state, ds, "train", idx, plans)
    loss, _ = batch_loss(model, cfg, views, ds.labels("train")[idx])
    params = list(model.params.values())
    T.backward(loss, params)
    before = _snapshot(model)
    grads = {k: v.grad.copy() for k, v in model.params.items()}
    sgd_step(model, state.velocity, 0.05, 0.0, 1e-2, 1.0)
    for k, v in model.params.items():
        decay = 0.0 if k == "proxies" else 1e-2 * before[k]
        np.testing.assert_allclose(v.data, before[k] - 0.05 * (grads[k] + decay), rtol=0, atol=1e-15)


def test_weight_decay_skips_proxies(tiny_dataset):
    state = new_state(tiny_dataset, tiny_cfg())
    for p in state.model.params.values():
        p.grad = np.zeros_like(p.data)
    before = _snapshot(state.model)
    sgd_step(state.model, state.velocity, 0.1, 0.0, 0.5, 1.0)
    np.testing.assert_array_equal(state.model.params["proxies"].data, before["proxies"])
    moved = [k for k in before if k != "proxies" and np.any(before[k])]
    assert moved
    for k in moved:
        np.testing.assert_allclose(state.model.params[k].data, 0.95 * before[k], rtol=1e-15)


def test_true_class_proxies_receive_gradient(tiny_dataset):
    cfg = tiny_cfg()
    state = new_state(tiny_dataset, cfg)
    labels = tiny_dataset.labels("train")
    for start in range(0, len(labels), cfg.batch_size):
        idx = np.arange(start, min(len(labels), start + cfg.batch_size))
        plans = [cfg.plan(0, crop_seed(cfg.seed, 0, int(i))) for i in idx]
        loss, _ = batch_loss(state.model, cfg, batch_inputs(state, tiny_dataset, "train", idx, plans), labels[idx])
        T.backward(loss, [state.model.proxies])
        for y in set(labels[idx].tolist()):
            assert np.linalg.norm(state.model.proxies.grad[y]) > 0


def test_training_is_deterministic(tiny_dataset):
    cfg = tiny_cfg(epochs=3)
    a = train(tiny_dataset, cfg)
    b = train(tiny_dataset, cfg)
    assert json.dumps(a.metrics) == json.dumps(b.metrics)
    assert same_params(a.model, b.model)


def test_resume_matches_uninterrupted_run(tiny_dataset, tmp_path):
    cfg = tiny_cfg(epochs=3, encoder_lr_mult=0.5)
    full = train(tiny_dataset, cfg)
    train(tiny_dataset, cfg, out_dir=tmp_path, epochs=1)
    resumed = checkpoint_load(tmp_path, expect=cfg)
    assert resumed.epoch == 1
    train(tiny_dataset, cfg, resumed)
    assert json.dumps(resumed.metrics) == json.dumps(full.metrics)
    assert same_params(resumed.model, full.model)
    for k, v in full.velocity.items():
        assert v.tobytes() == resumed.velocity[k].tobytes()


def test_metrics_log_written_per_epoch(tiny_dataset, tmp_path):
    cfg = tiny_cfg(epochs=2)
    train(tiny_dataset, cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [0, 1]
    assert set(json.loads(lines[0])) == {"epoch", "loss", "train_acc", "test_acc", "lr", "k"}
    timing = [json.loads(x) for x in (tmp_path / "timing.jsonl").read_text().splitlines()]
    assert [t["epoch"] for t in timing] == [0, 1] and all(t["wall_ms"] > 0 for t in timing)


def test_checkpoint_errors(tiny_dataset, tmp_path):
    cfg = tiny_cfg(epochs=1)
    state = train(tiny_dataset, cfg)
    checkpoint_save(state, tmp_path)
    with pytest.raises(ConfigMismatchError):
        checkpoint_load(tmp_path, expect=tiny_cfg(epochs=1, d=32))
    doc = json.loads((tmp_path / "state.json").read_text())
    doc["format_version"] = 7
    (tmp_path / "state.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path)
    (tmp_path / "state.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path)
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "missing")


def test_dataset_class_count_must_match(tiny_dataset):
    state = new_state(tiny_dataset, tiny_cfg())
    other = D.generate(tiny_meta(c=6))
    with pytest.raises(ConfigMismatchError):
        train(other, tiny_cfg(), state)


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=-1.0), dict(lr=float("nan")), dict(batch_size=1),
                                 dict(lr_decay_factor=0.0), dict(lr_decay_factor=1.5), dict(variant="x"),
                                 dict(momentum=1.0), dict(alpha=0.0), dict(k_max=4), dict(n_views=0)])
def test_config_validation(bad):
    with pytest.raises(Exception):
        tiny_cfg(**bad)


def test_config_round_trip_and_schedule():
    cfg = tiny_cfg(lr=0.1, lr_decay_every=5, lr_decay_factor=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert [cfg.lr_at(e) for e in (0, 4, 5, 10)] == [0.1, 0.1, 0.05, 0.025]
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "learning_rate": 0.1})


def test_cached_embeddings_equal_direct_encoding(tiny_dataset):
    cfg = tiny_cfg()
    state = new_state(tiny_dataset, cfg)
    plan = cfg.plan(cfg.epochs, 0)
    cached = split_embeddings(state.model, tiny_dataset, "test", plan, state.cache)
    assert split_embeddings(state.model, tiny_dataset, "test", plan, state.cache) is cached
    images = tiny_dataset.images("test")
    for i in range(len(images)):
        direct = state.model.embed_views(state.model.prepare(images[i:i + 1], [plan])).data[0]
        np.testing.assert_allclose(cached[i], direct, rtol=0, atol=1e-12)
    with_cache = predict_split(state.model, cfg, tiny_dataset, "test", cache={})
    np.testing.assert_array_equal(predict_split(state.model, cfg, tiny_dataset, "test", batch=5), with_cache)


@pytest.mark.slow
def test_loss_falls_during_warmup_for_most_seeds():
    """Fine data with default settings: the train loss strictly falls over the first 10 epochs."""
    ds = D.generate(D.DatasetMeta(c=8, k=4, seed=0))
    good = 0
    for seed in range(10):
        state = train(ds, TrainConfig(seed=seed, eval_every=0), epochs=10)
        losses = [r["loss"] for r in state.metrics]
        good += all(b < a for a, b in zip(losses, losses[1:]))
    assert good >= 9
