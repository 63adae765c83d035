import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rel_err, toy_spec
from resequiv import dataio, network, trainer, transform
from resequiv.errors import InvalidArgument
from resequiv.params import ParamVector


def _data(count=64, seed=0):
    return dataio.synth_dataset(seed, count, size=8)


def test_penalty_examples(rng):
    spec = toy_spec("residual", n=2)
    zero = ParamVector.zeros(spec)
    assert trainer.decay_penalty(zero, "standard") == 0.0
    t0 = transform.transform_T(zero)
    assert trainer.decay_penalty(t0, "transferred") == 0.0
    assert trainer.decay_penalty(t0, "standard") == len(spec.layout.id_index)
    assert trainer.decay_penalty(t0, "none") == 0.0
    r = ParamVector(spec, rng.standard_normal(spec.layout.size))
    a = trainer.decay_penalty(transform.transform_T(r), "transferred")
    b = trainer.decay_penalty(r, "standard")
    assert abs(a - b) <= 1e-12 * b


def test_penalty_ignores_biases():
    spec = toy_spec("plain")
    v = ParamVector(spec, np.where(spec.layout.weight_mask, 0.0, 3.0))
    assert trainer.decay_penalty(v, "standard") == 0.0


def test_penalty_rejects_raw_arrays():
    with pytest.raises(InvalidArgument):
        trainer.decay_penalty(np.zeros(5), "transferred")
    with pytest.raises(InvalidArgument):
        trainer.decay_penalty(ParamVector.zeros(toy_spec()), "l1")


def test_step_without_decay_is_w_minus_g(rng):
    spec = toy_spec()
    w = ParamVector(spec, rng.standard_normal(spec.layout.size))
    g = ParamVector(spec, rng.standard_normal(spec.layout.size))
    cfg = trainer.TrainConfig(lr_initial=1.0, decay=0.0)
    new, vel = trainer.sgd_step(w, g, cfg, 0)
    assert np.array_equal(new.data, w.data - g.data) and vel is None


def test_step_hand_computation():
    spec = toy_spec()
    info = spec.layers[1]
    w = np.zeros(spec.layout.size)
    g = np.zeros(spec.layout.size)
    wi, bi = info.weight_offset, info.bias_offset  # one weight, one bias
    w[wi], g[wi] = 0.5, 0.2
    w[bi], g[bi] = 0.5, 0.2
    cfg = trainer.TrainConfig(lr_initial=0.1, decay=0.01)
    new, _ = trainer.sgd_step(ParamVector(spec, w), ParamVector(spec, g), cfg, 0)
    # weight: 0.5 - 0.1*(0.2 + 2*0.01*0.5) = 0.479; bias gets no decay
    assert new.data[wi] == pytest.approx(0.479, abs=1e-15)
    assert new.data[bi] == pytest.approx(0.48, abs=1e-15)


def test_transferred_decay_vanishes_on_T_zero():
    spec = toy_spec("residual")
    t0 = transform.transform_T(ParamVector.zeros(spec))
    d = trainer.decay_direction(t0, "transferred")
    assert np.all(d == 0.0)


def test_momentum_hand_computation():
    spec = toy_spec()
    w = ParamVector.zeros(spec)
    g = ParamVector(spec, np.ones(spec.layout.size))
    cfg = trainer.TrainConfig(lr_initial=0.1, decay=0.0, momentum=0.5)
    w1, v1 = trainer.sgd_step(w, g, cfg, 0)
    w2, v2 = trainer.sgd_step(w1, g, cfg, 0, v1)
    assert np.allclose(v2, 0.15) and np.allclose(w2.data, -0.25)


def test_lr_schedule():
    cfg = trainer.TrainConfig(lr_initial=1.0, lr_drops=((2, 10.0), (4, 2.0)))
    assert [cfg.lr(e) for e in range(6)] == [1.0, 1.0, 0.1, 0.1, 0.05, 0.05]


@settings(max_examples=30, deadline=None)
@given(drops=st.lists(st.tuples(st.integers(0, 50), st.floats(1, 100)), max_size=4))
def test_lr_nonincreasing(drops):
    cfg = trainer.TrainConfig(lr_drops=tuple(sorted(drops, key=lambda d: d[0])))
    lrs = [cfg.lr(e) for e in range(60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("bad", [
    dict(lr_initial=0.0), dict(decay=-1.0), dict(decay_mode="l1"), dict(momentum=1.0),
    dict(batch_size=0), dict(lr_drops=((5, 10.0), (2, 10.0))), dict(lr_drops=((5, 0.5),)),
])
def test_config_validation(bad):
    with pytest.raises(InvalidArgument):
        trainer.TrainConfig(**bad)


def test_batch_order_is_pure():
    a = trainer.batch_order(3, 1, 50)
    assert np.array_equal(a, trainer.batch_order(3, 1, 50))
    assert not np.array_equal(a, trainer.batch_order(3, 2, 50))
    assert np.array_equal(np.sort(a), np.arange(50))
    assert np.array_equal(trainer.batch_order(3, 1, 5, shuffle=False), np.arange(5))


def test_zero_epochs_leaves_params():
    spec = toy_spec("plain")
    p = transform.kwi_init(spec, 0)
    out, m = trainer.train(spec, p, _data(), trainer.TrainConfig(epochs=0))
    assert np.array_equal(out.data, p.data) and m.epoch == [0]


def test_initial_risk_and_metric_invariants():
    spec = toy_spec("plain")
    data = _data(200)
    _, m = trainer.train(spec, transform.kwi_init(spec, 0), data,
                         trainer.TrainConfig(epochs=2, batch_size=32, lr_initial=0.05),
                         test=_data(50, seed=1))
    assert abs(m.risk[0] - np.log(10)) <= 0.1
    assert all(c >= r for c, r in zip(m.cost, m.risk))
    assert all(0.0 <= e <= 1.0 for e in m.error)
    assert len(m.batch_risk) == 2 * 7


def test_training_is_bitwise_deterministic():
    spec = toy_spec("residual")
    cfg = trainer.TrainConfig(epochs=2, batch_size=16, lr_initial=0.05, momentum=0.9)
    data = _data()
    a, ma = trainer.train(spec, transform.hmwi_init(spec, 2), data, cfg)
    b, mb = trainer.train(spec, transform.hmwi_init(spec, 2), data, cfg)
    assert np.array_equal(a.data, b.data) and ma.batch_risk == mb.batch_risk


def test_empty_dataset_rejected():
    spec = toy_spec()
    with pytest.raises(InvalidArgument):
        trainer.train(spec, ParamVector.zeros(spec), _data().subset(0), trainer.TrainConfig())


def test_early_stop_callback():
    spec = toy_spec()
    _, m = trainer.train(spec, transform.kwi_init(spec, 0), _data(), trainer.TrainConfig(epochs=5),
                         on_epoch=lambda e, p, m: e >= 1)
    assert m.epoch == [0, 1]


def test_training_lowers_risk():
    spec = toy_spec("plain")
    _, m = trainer.train(spec, transform.kwi_init(spec, 0), _data(256),
                         trainer.TrainConfig(epochs=5, batch_size=16, lr_initial=0.05))
    assert m.risk[-1] < m.risk[0]


def test_gradient_equivalence_with_decay(rng):
    spec = toy_spec("residual", n=2)
    r = transform.hmwi_init(spec, 5)
    p = transform.transform_T(r)
    x, y = _data(8).images, _data(8).labels
    _, gr = network.backward(r, spec, x, y)
    _, gp = network.backward(p, spec.with_kind("plain"), x, y)
    lam = 1e-4
    full_r = gr.data + 2 * lam * trainer.decay_direction(r, "standard")
    full_p = gp.data + 2 * lam * trainer.decay_direction(p, "transferred")
    assert rel_err(full_r, full_p) <= 1e-12


def test_pair_starts_equal_and_stays_close():
    spec = toy_spec("residual", n=1)
    cfg = trainer.TrainConfig(batch_size=16, lr_initial=0.05)
    res = trainer.train_equivalent_pair(spec, _data(), cfg, iterations=20)
    assert res.divergence[0] == 0.0 and len(res.divergence) == 21
    assert res.divergence.max() <= 1e-8
    assert np.all(np.abs(res.plain_risk - res.residual_risk) <= 1e-6 * np.abs(res.residual_risk))


def test_pair_with_momentum_stays_close():
    spec = toy_spec("residual", n=1)
    cfg = trainer.TrainConfig(batch_size=16, lr_initial=0.02, momentum=0.9)
    res = trainer.train_equivalent_pair(spec, _data(), cfg, iterations=50)
    assert res.divergence.max() <= 1e-8
