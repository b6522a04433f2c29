import numpy as np
import pytest

from cetn import trainer
from cetn.config import ExperimentConfig, LossConfig, TrainConfig
from cetn.data import ConfigurationError, DatasetSchema, EncodedDataset, prepare_presplit
from cetn.metrics import Metrics
from cetn.model import CETN, ModelConfig, NumericError


def tiny_cfg(ablations=(), kind="cetn", **train_kw):
    tk = dict(batch_size=64, max_epochs=3, seed=7, eval_batch_size=1000)
    tk.update(train_kw)
    return ExperimentConfig(
        model=ModelConfig(kind=kind, ablations=tuple(ablations), embedding_dim=4, value_dim=4, hidden_dims=(16, 8)),
        loss=LossConfig(),
        train=TrainConfig(**tk),
    )


def separable(n=200, seed=0):
    """Two fields; the label is decided by which half of field a's tokens appears."""
    r = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        a, b = int(r.integers(0, 10)), int(r.integers(0, 5))
        rows.append({"label": str(int(a < 5)), "a": f"a{a}", "b": f"b{b}"})
    return rows


@pytest.fixture(scope="module")
def sep_data():
    schema = DatasetSchema.from_dict({"fields": ["a", "b"]})
    return prepare_presplit(separable(200, 0), separable(100, 1), separable(100, 2), schema)


# -- optimizer ------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st = trainer.AdamState(p, sparse=())
    st.step(p, {"w": np.array([0.5, -4.0, 1e-3])}, 0.001)
    np.testing.assert_allclose(p["w"], [0.999, -1.999, 2.999], rtol=0, atol=1e-8)


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    st = trainer.AdamState(p, sparse=())
    for _ in range(3):
        st.step(p, {"w": np.zeros(2)}, 0.001)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_non_finite_gradient_aborts_before_update():
    p = {"w": np.array([1.0, 2.0])}
    st = trainer.AdamState(p, sparse=())
    with pytest.raises(NumericError, match="w"):
        st.step(p, {"w": np.array([np.nan, 0.0])}, 0.001)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])
    assert st.t == 0


def test_lazy_adam_leaves_untouched_rows_alone():
    p = {"embedding": np.ones((4, 2))}
    st = trainer.AdamState(p)
    g = np.zeros((4, 2))
    g[1] = 1.0
    st.step(p, {"embedding": g}, 0.01, {"embedding": np.array([1])})
    np.testing.assert_array_equal(p["embedding"][[0, 2, 3]], np.ones((3, 2)))
    np.testing.assert_allclose(p["embedding"][1], 0.99, atol=1e-8)
    assert not st.m["embedding"][[0, 2, 3]].any()


# -- training loop --------------------------------------------------------------


def test_zero_epochs_returns_initialized_model(sep_data):
    res = trainer.train(tiny_cfg(max_epochs=0), sep_data)
    assert res.log.epochs == [] and res.log.steps == [] and res.val is None
    fresh = CETN(res.model.config, sep_data.train.vocab_sizes)
    fresh.init_params(7)
    for k in fresh.params:
        assert np.array_equal(fresh.params[k], res.model.params[k])


def test_separable_data_is_learned(sep_data):
    cfg = tiny_cfg(max_epochs=20, batch_size=32, lr=0.01, patience=20)
    res = trainer.train(cfg, sep_data)
    assert max(e.val_auc for e in res.log.epochs) >= 0.99
    assert res.val.auc >= 0.99


def _scripted(monkeypatch, aucs):
    snapshots = []
    seq = iter(aucs)

    def fake(model, dataset, batch_size=20000):
        snapshots.append({k: v.copy() for k, v in model.params.items()})
        return Metrics(next(seq), 0.5)

    monkeypatch.setattr(trainer, "evaluate", fake)
    return snapshots


def test_early_stopping_and_lr_decay(monkeypatch, sep_data):
    snaps = _scripted(monkeypatch, [0.6, 0.7, 0.7, 0.65, 0.99])
    res = trainer.train(tiny_cfg(max_epochs=10, patience=2), sep_data)
    # a tie is not an improvement
    assert [e.epoch for e in res.log.epochs] == [0, 1, 2, 3]
    assert [e.lr for e in res.log.epochs] == [0.001, 0.001, 0.001, 0.0001]
    assert res.log.best_epoch == 1 and res.log.stopped_early
    assert res.val.auc == 0.7
    for k in snaps[1]:
        assert np.array_equal(res.model.params[k], snaps[1][k])


def test_improvement_resets_patience(monkeypatch, sep_data):
    _scripted(monkeypatch, [0.6, 0.5, 0.7, 0.69, 0.68])
    res = trainer.train(tiny_cfg(max_epochs=10, patience=2), sep_data)
    assert len(res.log.epochs) == 5 and res.log.best_epoch == 2
    assert [e.lr for e in res.log.epochs] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4, 1e-5])


def test_training_is_deterministic(sep_data):
    a = trainer.train(tiny_cfg(max_epochs=2), sep_data)
    b = trainer.train(tiny_cfg(max_epochs=2), sep_data)
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    assert [s["total"] for s in a.log.steps] == [s["total"] for s in b.log.steps]


@pytest.mark.parametrize("ablation,keys", [("CL", ("cl_term",)), ("COS", ("cos1_term", "cos2_term"))])
def test_removed_loss_terms_are_exactly_zero(ablation, keys, sep_data):
    res = trainer.train(tiny_cfg((ablation,), max_epochs=2), sep_data)
    assert res.log.steps
    for s in res.log.steps:
        for k in keys:
            assert s[k] == 0.0
    other = "cos1_term" if ablation == "CL" else "cl_term"
    assert any(s[other] != 0.0 for s in res.log.steps)


def test_simmhn_trains_on_ctr_loss_only(sep_data):
    res = trainer.train(tiny_cfg(kind="simmhn", max_epochs=1), sep_data)
    assert all(s["total"] == s["ctr"] for s in res.log.steps)


def test_evaluate_rejects_mismatched_vocab(sep_data):
    res = trainer.train(tiny_cfg(max_epochs=0), sep_data)
    other = EncodedDataset(np.zeros((2, 2), dtype=int), np.array([0.0, 1.0]), ["a", "b"], [3, 3])
    with pytest.raises(ConfigurationError):
        trainer.evaluate(res.model, other)


def test_logs_written(tmp_path, sep_data):
    trainer.train(tiny_cfg(max_epochs=1), sep_data, tmp_path)
    for name in ("config.json", "model.ckpt", "train_log.jsonl", "train_log.csv", "train_steps.csv"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "train_steps.csv").read_text().splitlines()[0]
    assert header.split(",") == trainer.STEP_COLUMNS


def test_train_step_frees_its_graph(monkeypatch, sep_data):
    import gc
    import weakref

    from cetn import autodiff as ad

    seen = []

    class Recording(ad.Tape):
        def __init__(self):
            super().__init__()
            seen.append(weakref.ref(self))

    monkeypatch.setattr(trainer.ad, "Tape", Recording)
    model = CETN(tiny_cfg().model, sep_data.train.vocab_sizes)
    model.init_params(0)
    state = trainer.AdamState(model.params)
    batch = next(iter(trainer.batches(sep_data.train, 32)))
    gc.disable()
    try:
        trainer.train_step(model, batch, np.random.default_rng(0), tiny_cfg(), state, 1e-3)
        model.predict(batch.indices)
        # freed by reference counting alone, no cyclic collection needed
        assert seen and all(r() is None for r in seen)
    finally:
        gc.enable()


def test_released_tape_keeps_read_gradients():
    from cetn import autodiff as ad

    t = ad.Tape()
    x = t.var(np.array([1.0, 2.0]))
    ad.backward(t, ad.sum(ad.mul(x, x)))
    g = x.grad
    t.release()
    assert len(t) == 0
    np.testing.assert_array_equal(g, [2.0, 4.0])
