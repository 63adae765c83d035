import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, rel_err, toy_spec
from resequiv import network, transform
from resequiv.errors import InvalidArgument
from resequiv.params import NetworkSpec, ParamVector


def _batch(spec, rng, b=3):
    return rng.uniform(0, 1, (b, spec.in_channels, spec.image_size, spec.image_size)), rng.integers(0, spec.classes, b)


def test_layer_count_and_shapes():
    spec = NetworkSpec.from_depth(20)
    assert spec.blocks_per_group == 6
    assert len(spec.layers) == 20
    first, last = spec.layers[0], spec.layers[-1]
    assert first.weight_shape == (16, 3, 3, 3)
    assert last.weight_shape == (10, 64)
    strides = [info.stride for info in spec.layers[1:-1]]
    assert strides.count(2) == 2
    assert spec.layers[7].weight_shape == (32, 16, 3, 3) and spec.layers[7].stride == 2


@pytest.mark.parametrize("depth", [4, 6, 21, 0])
def test_invalid_depth(depth):
    with pytest.raises(InvalidArgument, match="3N\\+2"):
        NetworkSpec.from_depth(depth)


def test_residual_forward_equals_plain_of_T(backend, rng):
    spec = toy_spec("residual", n=2)
    r = transform.hmwi_init(spec, 3)
    x, _ = _batch(spec, rng)
    logits_r, _ = network.forward(r, spec, x)
    logits_p, _ = network.forward(transform.transform_T(r), spec.with_kind("plain"), x)
    ref = network.reference_residual_forward(r, x).logits
    assert rel_err(logits_r, logits_p) <= 1e-12
    assert rel_err(logits_r, ref) <= 1e-12


def test_reference_backward_matches_transformed_backward(backend, rng):
    spec = toy_spec("residual", n=1)
    r = transform.kwi_init(spec, 4)  # large weights: gates are far from trivial
    x, y = _batch(spec, rng)
    risk_a, g_a = network.backward(r, spec, x, y)
    risk_b, g_b = network.reference_residual_backward(r, x, y)
    assert abs(risk_a - risk_b) <= 1e-12 * abs(risk_a)
    assert rel_err(g_a.data, g_b.data) <= 1e-12


@pytest.mark.parametrize("kind", ["plain", "residual", "dominant_only", "dominant_lower_dense"])
def test_whole_net_backward_finite_differences(backend, rng, kind):
    spec = toy_spec(kind, n=1, base=2, image=8, classes=3)
    v = transform.kwi_init(spec, 11)
    # nonzero biases keep pre-activations off the ReLU kink, which dead
    # channels of a masked kernel would otherwise sit on exactly
    v = v.replace(data=np.where(spec.layout.weight_mask, v.data, 0.1 * rng.standard_normal(len(v))))
    x, y = _batch(spec, rng, b=2)
    _, grad = network.backward(v, spec, x, y)

    def risk(flat):
        return network.backward(ParamVector(spec, flat), spec, x, y)[0]

    numeric = central_diff(risk, v.flatten())
    if kind.startswith("dominant"):
        numeric = np.where(transform.dominant_mask(spec, kind == "dominant_lower_dense"), numeric, 0.0)
    assert rel_err(grad.data, numeric) <= 1e-6


def test_dominant_net_ignores_masked_entries(rng):
    spec = toy_spec("dominant_only", n=1)
    r = transform.hmwi_init(spec.with_kind("residual"), 2).replace(spec=spec)
    noise = rng.standard_normal(len(r)) * ~transform.dominant_mask(spec)
    x, _ = _batch(spec, rng)
    a, _ = network.forward(r, spec, x)
    b, _ = network.forward(r.replace(data=r.data + noise), spec, x)
    assert np.array_equal(a, b)


def test_pullback_counts_and_matches_fd(backend, rng):
    spec = toy_spec("plain", n=1, base=2)
    p = transform.kwi_init(spec, 5)
    x, _ = _batch(spec, rng, b=1)
    _, trace = network.forward(p, spec, x)
    network.backward_passes.reset()
    seed = np.eye(8)  # the pooled vector has 4*base entries
    jac = network.pullback(p, trace, seed, spec.depth, 2)
    assert network.backward_passes.count == 8

    # frozen-gate linearisation of layers 3.. onto a^(2)
    def head(a2):
        a = a2
        for info in spec.layout.conv_layers[2:]:
            from resequiv import engine
            z = engine.conv2d_forward(a, p.weight(info.index), p.bias(info.index), info.stride)
            a = np.where(trace.pre[info.index - 1] > 0, z, 0.0)
        return a.mean(axis=(2, 3))[0]

    a2 = trace.activation(2)
    for j in range(8):
        numeric = central_diff(lambda v: head(v)[j], a2)
        assert rel_err(jac[j], numeric[0]) <= 1e-6


def test_pullback_rejects_bad_range(rng):
    spec = toy_spec()
    p = transform.kwi_init(spec, 0)
    _, trace = network.forward(p, spec, _batch(spec, rng, 1)[0])
    with pytest.raises(InvalidArgument):
        network.pullback(p, trace, np.eye(16), 2, 3)


def test_batch_shape_is_checked():
    spec = toy_spec()
    with pytest.raises(InvalidArgument):
        network.forward(ParamVector.zeros(spec), spec, np.zeros((2, 3, 16, 16)))


def test_incompatible_params_rejected():
    with pytest.raises(InvalidArgument):
        network.forward(ParamVector.zeros(toy_spec(n=1)), toy_spec(n=2), np.zeros((1, 3, 8, 8)))


def test_sap_start():
    spec = NetworkSpec.from_depth(20)
    assert network.sap_start(1, spec) == 1
    assert network.sap_start(17, spec) == 7
    assert network.sap_start(64, spec) == 13
    with pytest.raises(InvalidArgument):
        network.sap_start(65, spec)


def test_initial_risk_near_log_k(rng):
    spec = NetworkSpec.from_depth(8, image_size=8)
    x, y = _batch(spec, rng, b=64)
    for init, kind in [(transform.kwi_init, "plain"), (transform.hmwi_init, "residual")]:
        s = spec.with_kind(kind)
        risk, _ = network.backward(init(s, 1), s, x, y)
        assert abs(risk - np.log(10)) <= 0.1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    spec = toy_spec("residual", n=1)
    r = ParamVector(spec, 0.05 * rng.standard_normal(spec.layout.size))
    x, y = _batch(spec, rng, 2)
    lr_, gr = network.backward(r, spec, x, y)
    lp, gp = network.backward(transform.transform_T(r), spec.with_kind("plain"), x, y)
    assert abs(lr_ - lp) <= 1e-12 * abs(lr_)
    assert rel_err(gr.data, gp.data) <= 1e-12
