import math

import numpy as np
import pytest

from amtpp import autodiff as ad
from amtpp.autodiff import AdamState
from amtpp.config import TrainConfig
from amtpp.data import PaddedBatch, SyntheticPopulationSpec, generate_synthetic, pad_batch, split_users
from amtpp.model import AMTPP, count_parameters, init_params
from amtpp.training import (ABLATION_ROWS, TrainingDiverged, dataset_nll, format_ablation_table, joint_nll,
                            make_checkpoint, run_ablation, train)

from conftest import make_sequence, micro_config


def _all_padding(S: int, B: int = 2, T: int = 3) -> PaddedBatch:
    z = np.zeros((B, T))
    pad = np.full((B, T), S, dtype=np.int64)
    return PaddedBatch(["x"] * B, z.astype(np.int64), z.astype(np.int64), z.copy(), pad, pad.copy(),
                       z.copy(), z.copy(), np.zeros(B, dtype=np.int64))


def test_fully_padded_batch_zero_loss_and_gradients(micro):
    terms = joint_nll(_all_padding(5), micro)
    loss = terms.mean()
    assert loss.item() == 0.0
    ad.backward(loss)
    for name, p in micro.params.items():
        assert np.all(p.grad == 0.0), name


def test_uniform_origin_term():
    cfg = TrainConfig(num_stations=10, K=2, c_model=6, n_heads=1, c_k=2, c_v=2, J_o=4, J_d=4, J_h=4, J_w=4)
    model = AMTPP(cfg, init_params(cfg, np.random.default_rng(0)))
    model.params["phi_o"].data[:] = 0.0
    model.params["b_o"].data[:] = 0.0
    seq = make_sequence("a", [8.0], [(3, 4)])
    terms = joint_nll(pad_batch([seq], 10), model)
    assert terms.origin.item() == pytest.approx(math.log(10), abs=1e-12)
    assert terms.n_time == 0 and terms.time.item() == 0.0


def test_duplicated_user_doubles_loss(micro, users):
    one = joint_nll(pad_batch(users[:1], 5), micro).total.item()
    two = joint_nll(pad_batch([users[0], users[0]], 5), micro).total.item()
    assert two == pytest.approx(2 * one, rel=1e-13)


def test_non_finite_loss_names_user(micro, users):
    micro.params["b_o"].data[0] = np.nan
    with pytest.raises(FloatingPointError, match="user 'a'"):
        joint_nll(pad_batch(users, 5), micro)


def _commuters(n=200, days=30, seed=0):
    spec = SyntheticPopulationSpec(n_users=n, days=days, proportions=(1.0, 0.0, 0.0), seed=seed)
    return generate_synthetic(spec)[0]


def test_training_reduces_validation_nll():
    tr, va = split_users(_commuters(), 0.8, 0)
    cfg = TrainConfig(num_stations=10, epochs=30, seed=0)
    result = train(tr, va, cfg)
    assert result.history[0].epoch == 0
    assert result.best.best_val_nll < result.history[0].val_nll
    assert len(result.history) == 31


def test_zero_learning_rate_keeps_parameters():
    seqs = _commuters(12, 5)
    cfg = micro_config(num_stations=10, epochs=1, lr=0.0)
    result = train(seqs[:8], seqs[8:], cfg)
    fresh = init_params(cfg, np.random.default_rng(cfg.seed))
    for k, v in fresh.items():
        np.testing.assert_array_equal(result.last.params[k], v.data)


def test_same_seed_same_checkpoint():
    seqs = _commuters(12, 5)
    cfg = micro_config(num_stations=10, epochs=2)
    a = train(seqs[:8], seqs[8:], cfg)
    b = train(seqs[:8], seqs[8:], cfg)
    assert a.last.to_bytes() == b.last.to_bytes()
    assert [r.val_nll for r in a.history] == [r.val_nll for r in b.history]


def test_resume_continues_epochs():
    seqs = _commuters(12, 5)
    cfg = micro_config(num_stations=10, epochs=2)
    first = train(seqs[:8], seqs[8:], cfg)
    cfg3 = micro_config(num_stations=10, epochs=3)
    resumed = train(seqs[:8], seqs[8:], cfg3, resume=first.last)
    assert [r.epoch for r in resumed.history] == [2, 3]
    straight = train(seqs[:8], seqs[8:], cfg3)
    for k, v in straight.last.params.items():
        np.testing.assert_array_equal(resumed.last.params[k], v)
    assert resumed.last.adam.step == straight.last.adam.step
    assert resumed.history[-1].val_nll == straight.history[-1].val_nll


def test_early_stopping():
    seqs = _commuters(12, 5)
    cfg = micro_config(num_stations=10, epochs=50, patience=1, lr=0.5)
    result = train(seqs[:8], seqs[8:], cfg)
    assert len(result.history) < 51


def test_divergence_reports_last_good_state():
    seqs = _commuters(6, 3)
    cfg = micro_config(num_stations=10, epochs=2)
    model = AMTPP(cfg)
    model.params["b_o"].data[0] = np.inf
    bad = make_checkpoint(model, AdamState(), np.random.default_rng(0), 0, float("inf"))
    with pytest.raises(TrainingDiverged) as info:
        train(seqs[:4], seqs[4:], cfg, resume=bad)
    assert info.value.checkpoint is bad


def test_loss_decreases_on_a_repeated_pattern():
    seq = make_sequence("p", [8 + 24 * k + (9 if i else 0) for k in range(10) for i in (0, 1)],
                        [(1, 2), (2, 1)] * 10)
    cfg = micro_config(num_stations=3, epochs=40, lr=0.01)
    result = train([seq], [seq], cfg)
    vals = [r.val_nll for r in result.history]
    medians = [np.median(vals[i:i + 10]) for i in range(0, 40, 10)]
    assert all(b < a for a, b in zip(medians, medians[1:]))


def test_ablation_table_and_parity():
    seqs = _commuters(10, 3)
    base = micro_config(num_stations=10, epochs=1)
    rows = run_ablation(seqs[:6], seqs[6:8], seqs[8:], base)
    assert [r.name for r in rows] == [name for name, _ in ABLATION_ROWS]
    assert len(rows) == 5
    table = format_ablation_table(rows)
    assert table.count("\n") == 5
    full = AMTPP(base)
    fixed = AMTPP(base.with_ablation("fixed_embedding"))
    assert count_parameters(full.params) == count_parameters(fixed.params)
    assert set(full.trainable()) - set(fixed.trainable()) == {"log_scale_hour", "log_scale_week"}


def test_fixed_embedding_scale_stays_put():
    seqs = _commuters(8, 3)
    cfg = micro_config(num_stations=10, epochs=2).with_ablation("fixed_embedding")
    result = train(seqs[:6], seqs[6:], cfg)
    assert result.last.params["log_scale_hour"] == pytest.approx(math.log(10000.0), abs=0)


def test_dataset_nll_is_per_step_mean(micro, users):
    t, o, d = dataset_nll(micro, users)
    terms = joint_nll(pad_batch(users, 5), micro)
    assert t == pytest.approx(terms.time.item() / 4)
    assert o == pytest.approx(terms.origin.item() / 6)
