import math

import numpy as np
import pytest

from featfilter.nets import NetworkSpec, build
from featfilter.synthdata import SceneConfig, Sample, generate, split
from featfilter.train import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    dataset_loss,
    load_checkpoint,
    multi_seed,
    probe_epochs,
    save_checkpoint,
    summarize,
    train_run,
)

# loss curve of the tiny reference run (seed 7, 2 epochs, 4 samples), frozen
GOLDEN_LOSS_CSV = """epoch,train_loss,val_loss
1,1.6376491653353753,1.3874433124494994
2,1.563199197959558,1.3852645728393058
"""

SMALL = NetworkSpec(depth=2, base_channels=4, with_cff=True)


def reference_adam(p, grads_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_reference(rng):
    p0 = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    seq = [{k: rng.normal(size=v.shape) for k, v in p0.items()} for _ in range(5)]
    params = {k: v.copy() for k, v in p0.items()}
    state = AdamState()
    for t, g in enumerate(seq, start=1):
        adam_step(params, g, state, t, TrainConfig())
    for k in p0:
        np.testing.assert_allclose(params[k], reference_adam(p0[k], [g[k] for g in seq]), rtol=1e-12)


def test_adam_zero_grad():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([0.5, 0.5])}, state, 1, TrainConfig())
    m_before = state.m.copy()
    snapshot = params["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, 2, TrainConfig(learning_rate=0.0))
    np.testing.assert_array_equal(params["w"], snapshot)
    np.testing.assert_allclose(state.m, 0.9 * m_before)
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState(), 1, TrainConfig())
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    params = {"w": np.zeros(3)}
    adam_step(params, {"w": np.array([3.0, -0.2, 50.0])}, AdamState(), 1, TrainConfig())
    np.testing.assert_allclose(params["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_adam_converges_on_quadratic():
    params = {"x": np.array([1.0])}
    state = AdamState()
    cfg = TrainConfig(learning_rate=0.05)
    for t in range(1, 101):
        adam_step(params, {"x": 2 * (params["x"] - 0.3)}, state, t, cfg)
    assert abs(params["x"][0] - 0.3) < 1e-3


def test_adam_rejects_bad_grads():
    params = {"w": np.ones(2)}
    state = AdamState()
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.ones(3)}, state, 1, TrainConfig())
    np.testing.assert_array_equal(params["w"], 1.0)
    assert state.m is None
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.ones(2)}, state, 0, TrainConfig())


def test_train_config_validation():
    for bad in [dict(learning_rate=-1), dict(batch_size=2), dict(epochs=0), dict(beta1=1.0), dict(beta2=-0.1)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_probe_epochs():
    assert probe_epochs(20, 16) == {"Es": 1, "Esm": 8, "Em": 16, "Enm": 18, "En": 20}
    assert probe_epochs(2, 2) == {"Es": 1, "Esm": 1, "Em": 2, "Enm": 2, "En": 2}
    assert probe_epochs(1, 1) == dict.fromkeys(["Es", "Esm", "Em", "Enm", "En"], 1)


def test_zero_learning_rate_keeps_untrained_params(tiny_data):
    tr, va = tiny_data
    rec = train_run(SMALL, tr[:1], va, TrainConfig(epochs=1, learning_rate=0.0, seed=4))
    init = build(SMALL, seed=4)
    for k, v in init.params().items():
        np.testing.assert_array_equal(rec.best_state()[k], v)
    # only the batch-norm running statistics moved, and they fully explain the loss
    init.load_state_dict(rec.best_state())
    assert rec.val_loss[0] == dataset_loss(init, va)


def test_golden_tiny_run(tmp_path):
    tr, va = split(generate(SceneConfig(), 4, seed=7), 0.5, seed=7)
    rec = train_run(NetworkSpec(with_cff=True), tr, va, TrainConfig(epochs=2, seed=7), out_dir=tmp_path)
    want = [ln.split(",") for ln in GOLDEN_LOSS_CSV.splitlines()[1:]]
    got = [ln.split(",") for ln in rec.loss_csv().splitlines()[1:]]
    np.testing.assert_allclose(np.array(got, float), np.array(want, float), rtol=1e-10)
    assert rec.val_loss[-1] < rec.val_loss[0]
    assert (tmp_path / "record.csv").read_text() == rec.loss_csv()
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == ["Em", "En", "Enm", "Es", "Esm"]


def test_checkpoint_roundtrip(tmp_path, tiny_data, rng):
    tr, va = tiny_data
    rec = train_run(SMALL, tr, va, TrainConfig(epochs=2, seed=1))
    save_checkpoint(rec.best_state(), SMALL, tmp_path / "ck")
    graph = load_checkpoint(tmp_path / "ck")
    ref = build(SMALL)
    ref.load_state_dict(rec.best_state())
    x = rng.normal(size=(8, 8, 1))
    np.testing.assert_array_equal(graph.forward(x), ref.forward(x))
    assert graph.spec == SMALL
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_divergence_is_reported(tiny_data):
    tr, va = tiny_data
    bad = Sample(np.full_like(tr[0].image, np.nan), tr[0].label, 99)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train_run(SMALL, [bad], va, TrainConfig(epochs=1))


def test_summarize_matches_two_pass():
    vals = [0.81, 0.79, 0.86, 0.9, 0.77]
    mean = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
    m, s = summarize(vals)
    assert m == pytest.approx(mean, abs=1e-15)
    assert s == pytest.approx(sd, abs=1e-15)
    assert summarize([0.5]) == (0.5, 0.0)


def test_multi_seed(tiny_data, tmp_path):
    tr, va = tiny_data
    cfg = TrainConfig(epochs=1)
    _, same = multi_seed(SMALL, tr, va, cfg, 2, seeds=[3, 3])
    assert same["mean_seg"]["dice"][1] == 0.0
    assert same["best_val_loss"][1] == 0.0
    recs, diff = multi_seed(SMALL, tr, va, cfg, 2, out_dir=tmp_path)
    assert diff["best_val_loss"][1] > 0
    assert [r.config.seed for r in recs] == [0, 1]
    assert (tmp_path / "seed_1" / "ckpt" / "Em" / "manifest.txt").is_file()
    with pytest.raises(ValueError):
        multi_seed(SMALL, tr, va, cfg, 1)
