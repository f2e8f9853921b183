import numpy as np
import pytest

from hdlsr.checkpoint import encode_checkpoint
from hdlsr.data import SynthSpec, extract_patches, make_pair, split_dataset, synth_generate
from hdlsr.metrics import mpsnr
from hdlsr.model import ModelConfig, init_params
from hdlsr.train import (
    HISTORY_COLUMNS,
    TrainConfig,
    aggregate_reports,
    early_stop_check,
    evaluate,
    format_history,
    train,
)


@pytest.fixture(scope="module")
def pairs():
    cube = synth_generate(SynthSpec(height=48, width=48, bands=4, seed=2))
    ps = [make_pair(p, 2, o, "t") for p, o in extract_patches(cube, 16)]
    return split_dataset(ps, 0.25, 0)


MODEL = ModelConfig(bands=4, width=4, num_residual_blocks=1, seed=1)


def test_early_stop_examples():
    assert early_stop_check([1.0, 0.9, 0.95, 0.96], 2) == (True, 1)
    assert early_stop_check([1.0, 0.9, 0.8, 0.7], 2)[0] is False
    assert early_stop_check([1.0, 0.95, 0.91], 2, min_delta=0.1) == (True, 2)
    assert early_stop_check([], 3) == (False, -1)
    assert early_stop_check([0.5, 0.5, 0.7], 5)[1] == 0  # earliest wins ties
    with pytest.raises(ValueError):
        early_stop_check([1.0], 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    assert TrainConfig(loss_weights={"mse": 1.0}).loss_weights.mse == 1.0


def test_training_is_deterministic(pairs):
    cfg = TrainConfig(batch_size=2, learning_rate=1e-3, max_steps=6, seed=4)
    a = train(MODEL, cfg, pairs)
    b = train(MODEL, cfg, pairs)
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)
    assert a.step_losses == b.step_losses
    strip = [r[:-1] for r in (line.split("\t") for line in format_history(a.history).splitlines())]
    assert strip == [r[:-1] for r in (line.split("\t") for line in format_history(b.history).splitlines())]


def test_zero_lr_keeps_trainable_params(pairs):
    res = train(MODEL, TrainConfig(batch_size=2, learning_rate=0.0, max_steps=5), pairs)
    init = init_params(MODEL)
    for name, arr in init.trainable().items():
        assert np.array_equal(res.last.params[name], arr), name


def test_history_and_step_budget(pairs):
    res = train(MODEL, TrainConfig(batch_size=2, max_steps=7, learning_rate=1e-3), pairs)
    assert res.last.step == 7 and len(res.step_losses) == 7
    # 6 train pairs / batch 2 = 3 steps per epoch, so the budget ends inside epoch 2
    assert len(pairs[0]) == 6
    assert [r.epoch for r in res.history] == [0, 1, 2]
    head = format_history(res.history).splitlines()[0]
    assert tuple(head.split("\t")) == HISTORY_COLUMNS
    assert res.checkpoint.extra["val_total"] == min(r.val.total for r in res.history)


def test_early_stopping_halts(pairs):
    # lr 0 never improves, so patience 2 stops after three epochs
    res = train(MODEL, TrainConfig(batch_size=4, learning_rate=0.0, early_stop_patience=2, max_epochs=50), pairs)
    assert len(res.history) == 3
    assert res.checkpoint.rng_state["epoch"] == 0


def test_train_errors(pairs):
    tr, va = pairs
    with pytest.raises(ValueError):
        train(MODEL, TrainConfig(batch_size=64), pairs)
    with pytest.raises(ValueError):
        train(MODEL, TrainConfig(), (tr, []))
    with pytest.raises(ValueError):
        train(ModelConfig(bands=5, width=4, num_residual_blocks=1), TrainConfig(batch_size=2), pairs)


def test_evaluate_identity_equals_baseline(pairs):
    _, va = pairs
    p = init_params(MODEL)
    p = p.updated({n: np.zeros_like(p[n]) for n in ("head.out.weight", "head.out.bias")})
    a = evaluate(p, va)
    base = evaluate(None, va)
    assert [r.to_json() for r in a.reports] == [r.to_json() for r in base.reports]
    assert a.aggregate == base.aggregate
    assert np.isclose(base.aggregate["mpsnr_db"], np.mean([mpsnr(q.hr, q.lr_up) for q in va]), atol=1e-9)


def test_aggregate_is_mean(pairs):
    _, va = pairs
    res = evaluate(init_params(MODEL), va)
    agg = aggregate_reports(res.reports)
    for k, v in agg.items():
        assert abs(v - sum(getattr(r, k) for r in res.reports) / len(res.reports)) < 1e-9
    assert evaluate(init_params(MODEL), va).aggregate == res.aggregate
    with pytest.raises(ValueError):
        evaluate(init_params(ModelConfig(bands=3, width=4, num_residual_blocks=1)), va)
