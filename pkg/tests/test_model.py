import numpy as np
import pytest

from exitdistill import data as dd
from exitdistill import numerics as nx
from exitdistill.model import (ConfigError, LifecycleError, ModelConfig, calibrate_exit_heads, copy_model,
                               finalize_prototype, high_importance_classes, init_model, load_model,
                               save_model)
from exitdistill.numerics import Tensor


def cfg(**kw):
    base = dict(input_dim=6, hidden_dim=5, depth=4, exit_depths=(2, 4), num_classes=5, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def test_init_is_deterministic():
    a, b = init_model(cfg()), init_model(cfg())
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_model(cfg(seed=2)).checksum()
    assert np.allclose(a.prototype, 0.2)


def test_config_validation():
    assert init_model(cfg()).config.num_exits == 2
    for bad in (dict(exit_depths=(2, 3)), dict(exit_depths=(3, 2, 4)), dict(exit_depths=(0, 4)),
                dict(num_classes=1), dict(hidden_dim=0), dict(exit_depths=())):
        with pytest.raises(ConfigError):
            cfg(**bad)


def test_forward_full_is_a_distribution():
    m = init_model(cfg())
    x = np.random.default_rng(0).standard_normal(6)
    p = m.forward_full(x).data
    assert abs(p.sum() - 1) <= 1e-12 and p.shape == (5,)
    assert np.array_equal(p, m.forward_full(x).data)
    with pytest.raises(nx.DimensionError):
        m.forward_full(np.zeros(7))


def test_forward_gradient_wrt_first_block():
    m = init_model(cfg())
    x = np.random.default_rng(1).standard_normal((3, 6))
    w = m.params["block1.W1"]

    def f(t):
        m.params["block1.W1"] = t
        out = nx.cross_entropy(m.forward_full(x), [0, 2, 4])
        m.params["block1.W1"] = w
        return out

    assert nx.grad_check(f, Tensor(w.data.copy(), True)) <= 1e-4


def test_forward_at_exit():
    m = init_model(cfg())
    x = np.random.default_rng(2).standard_normal(6)
    last = m.forward_at_exit(x, 2)
    assert np.max(np.abs(last.probs.probs - m.forward_full(x).data)) <= 1e-12
    first = m.forward_at_exit(x, 1)
    assert first.blocks_traversed == 3 and last.blocks_traversed == 5
    assert -1 <= first.confidence <= 1
    m.prototype = first.probs.probs * 3.0
    assert m.forward_at_exit(x, 1).confidence == pytest.approx(1.0, abs=1e-12)
    for i in (0, 3):
        with pytest.raises(IndexError):
            m.forward_at_exit(x, i)


def test_high_importance_classes():
    assert high_importance_classes(5) == (3, 4)
    assert high_importance_classes(2) == (1,)


def test_finalize_prototype_constant_probs():
    m = init_model(cfg(hidden_dim=4))
    # zeroed output weights: every input gets the same probabilities (softmax of the bias)
    m.params["head2.out.W"].data[:] = 0.0
    X = np.random.default_rng(3).standard_normal((10, 6))
    y = np.array([4, 3, 0, 1, 4, 4, 2, 3, 3, 0])
    finalize_prototype(m, X, y)
    p = m.predict_proba(X[0])
    assert np.allclose(m.prototype, p / np.linalg.norm(p), atol=1e-12)
    assert abs(np.linalg.norm(m.prototype) - 1) <= 1e-9
    with pytest.raises(nx.DegenerateInputError):
        finalize_prototype(init_model(cfg()), X, np.zeros(10, dtype=int))


def test_streamed_prototype_matches_batch_mean():
    rng = np.random.default_rng(4)
    m = init_model(cfg())
    X = rng.standard_normal((3000, 6))
    y = np.full(3000, 4)
    batch = finalize_prototype(copy_model(m), X, y).prototype
    stream = finalize_prototype(copy_model(m), X, y, stream=True).prototype
    assert np.linalg.norm(stream - batch) / np.linalg.norm(batch) <= 0.02


def planted(n_videos=20):
    ds = dd.generate(dd.PlantedSpec(), dd.DatasetHeader(annotators=5), n_videos, 30)
    return dd.split(ds, (0.6, 0.2, 0.2))


def test_calibrate_exit_heads_freezes_backbone_and_helps():
    train, val, _ = planted()
    m = init_model(ModelConfig(train.header.input_dim, 8, 4, (1, 2, 3, 4), 5, seed=0))
    with pytest.raises(LifecycleError):
        calibrate_exit_heads(m, train.inputs(), train.labels(), 1)
    m.backbone_trained = True
    before = m.checksum(m.backbone_names())
    acc = lambda i: np.mean(m.predict_proba(val.inputs(), i).argmax(axis=1) == val.labels())
    pre = [acc(i) for i in (1, 2, 3)]
    snapshot = m.checksum()
    calibrate_exit_heads(m, train.inputs(), train.labels(), 0)
    assert m.checksum() == snapshot
    calibrate_exit_heads(m, train.inputs(), train.labels(), 5)
    assert m.checksum(m.backbone_names()) == before
    assert all(acc(i) >= p for i, p in zip((1, 2, 3), pre))
    assert m.heads_calibrated


def test_save_load_round_trip(tmp_path):
    m = init_model(cfg())
    m.prototype = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    m.backbone_trained = True
    save_model(m, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    assert back.config == m.config and back.checksum() == m.checksum()
    assert np.array_equal(back.prototype, m.prototype) and back.backbone_trained
    save_model(back, tmp_path / "n.npz")
    assert (tmp_path / "m.npz").read_bytes() == (tmp_path / "n.npz").read_bytes()
