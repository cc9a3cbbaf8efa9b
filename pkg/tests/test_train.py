import numpy as np
import pytest

from blockaffine.adapters import AdapterConfig
from blockaffine.model import SyntheticTask
from blockaffine.tensor import Tape, Tensor, backward, mul, reduce_sum
from blockaffine.train import SGD, AdamW, TrainingDiverged, TrainRun, account_memory, prepare, train
from blockaffine.verify import desk_config

SMALL_TASK = SyntheticTask(dataset_size=512)


def run(variant_cfg, **kw):
    kw.setdefault("task", SMALL_TASK)
    kw.setdefault("steps", 30)
    return TrainRun(variant_cfg, **kw)


def test_sgd_quadratic_step():
    p = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(p, p))
    grads = backward(loss, tape)
    SGD([p], lr=0.1).step(grads)
    assert p.data[0] == 3.0 - 0.1 * 6.0


def test_adamw_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.01)
    opt.step({p: np.array([0.5, -4.0])})
    # bias-corrected first step moves each coordinate by lr * g/|g| (up to eps)
    assert np.allclose(p.data, [0.99, -1.99], atol=1e-9)
    assert opt.state_bytes == 2 * p.nbytes


def test_adamw_weight_decay_is_decoupled():
    p = Tensor(np.array([2.0]), requires_grad=True)
    AdamW([p], lr=0.1, weight_decay=0.5).step({p: np.array([0.0])})
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_lr_zero_log_constant():
    res = train(run(AdapterConfig("bone_col", block_size=16), lr=0.0))
    assert len({loss for _, loss in res.log}) == 1
    assert res.final_loss == res.log[0][1]


def test_log_shape_and_progress():
    res = train(run(AdapterConfig("bone_col", block_size=16), steps=40, lr=3e-3))
    assert [s for s, _ in res.log] == list(range(40))
    assert res.final_loss < res.log[0][1]


def test_training_is_deterministic():
    cfg = AdapterConfig("lora", rank=4)
    a, b = train(run(cfg, seed=3)), train(run(cfg, seed=3))
    assert a.log == b.log
    c = train(run(cfg, seed=4))
    assert a.log != c.log


@pytest.mark.parametrize("config", [AdapterConfig("bone_col", block_size=16), AdapterConfig("lora", rank=8)],
                         ids=lambda c: c.variant)
def test_only_adapters_move(config):
    model, *_ = prepare(run(config))
    before = [lay.weight.data.copy() for lay in model.layers]
    res = train(run(config))
    for w, lay in zip(before, res.model.layers):
        assert np.array_equal(w, lay.weight.data)
    assert any(t.data.any() for t in res.model.parameters())


def test_nan_aborts_with_diagnostic():
    with pytest.raises(TrainingDiverged, match="step"):
        train(run(AdapterConfig("bone_col", block_size=16), optimizer="sgd", lr=1e12, steps=20))


def test_classification_task_trains():
    task = SyntheticTask("modular_classification", dataset_size=512, modulus=7)
    res = train(run(AdapterConfig("bone_col", block_size=16), task=task, steps=60, lr=1e-2))
    assert res.final_loss < res.log[0][1]


def test_memory_accounting_examples():
    cached = account_memory(run(AdapterConfig("bone_col", block_size=16)))
    assert cached.cached_delta_w == 2 * 64 * 64 * 4
    recompute = account_memory(run(AdapterConfig("bone_col", block_size=16, recompute=True)))
    assert recompute.cached_delta_w == 0
    assert cached.peak_tracked_bytes > recompute.peak_tracked_bytes
    lora = account_memory(run(AdapterConfig("lora", rank=8)))
    for cat in ("params", "grads", "optimizer_state"):
        assert getattr(lora, cat) == getattr(cached, cat)
    assert cached.peak_tracked_bytes > lora.peak_tracked_bytes
    sgd = account_memory(run(AdapterConfig("lora", rank=8), optimizer="sgd"))
    assert sgd.optimizer_state == 0


def test_recompute_log_bitwise_equal():
    a = train(run(AdapterConfig("bone_both", block_size=16, groups=4)))
    b = train(run(AdapterConfig("bone_both", block_size=16, groups=4, recompute=True)))
    assert a.log == b.log and a.final_loss == b.final_loss
    assert a.memory.peak_tracked_bytes > b.memory.peak_tracked_bytes


def test_run_validation():
    with pytest.raises(ValueError):
        TrainRun(AdapterConfig("bone_col", block_size=48))
    with pytest.raises(ValueError):
        TrainRun(AdapterConfig("bone_col", block_size=16), optimizer="lion")


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["lora", "bone_col", "bone_row", "bone_both", "bone_unconstrained",
                                     "bone_hadamard"])
def test_every_variant_descends_on_default_task(variant):
    size = 8 if variant in ("lora", "bone_unconstrained") else 16
    config = desk_config(variant, size, groups=4)
    for seed in range(5):
        res = train(TrainRun(config, task=SyntheticTask(seed=seed), model_seed=seed, seed=seed))
        assert res.log[-1][1] < res.log[0][1] and res.final_loss < res.log[0][1]
