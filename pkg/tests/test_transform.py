import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import toy_spec
from resequiv import transform
from resequiv.errors import InvalidArgument
from resequiv.params import NetworkSpec, ParamVector


def _enumerate_ids(spec):
    # brute force: walk every block kernel and pick the centre taps of its diagonal
    out = []
    for info in spec.layers:
        if info.kind != "conv" or info.index == 1:
            continue
        d, c = info.weight_shape[:2]
        for ch in range(min(c, d)):
            out.append(info.weight_offset + np.ravel_multi_index((ch, ch, 1, 1), info.weight_shape))
    return np.array(out)


def test_depth32_id_count():
    spec = NetworkSpec.from_depth(32)
    assert len(transform.id_entries(spec)) == 1072
    assert np.array_equal(np.sort(spec.layout.id_index), np.sort(_enumerate_ids(spec)))


@pytest.mark.parametrize("depth", [8, 20, 44])
def test_id_count_formula(depth):
    spec = NetworkSpec.from_depth(depth)
    expected = sum(min(i.in_channels, i.out_channels) for i in spec.layers if i.is_block)
    assert len(spec.layout.id_index) == expected == len(_enumerate_ids(spec))


def test_T_of_zero_depth32_stats():
    spec = NetworkSpec.from_depth(32, kind="residual")
    st_ = transform.weight_stats(transform.transform_T(ParamVector.zeros(spec)))
    assert st_.mass_id == st_.mass_all == st_.mass_ge_threshold == 1072


def test_weight_stats_zero():
    st_ = transform.weight_stats(ParamVector.zeros(toy_spec("plain")))
    assert st_.mass_all == st_.mass_id == st_.mass_ge_threshold == 0.0


def test_hmwi_T_mass_is_mostly_identity():
    spec = NetworkSpec.from_depth(32, kind="residual")
    st_ = transform.weight_stats(transform.transform_T(transform.hmwi_init(spec, 0)))
    assert st_.mass_id / st_.mass_ge_threshold >= 0.75


def test_weight_stats_excludes_biases():
    spec = toy_spec("plain")
    v = ParamVector(spec, np.where(spec.layout.weight_mask, 0.0, 5.0))
    assert transform.weight_stats(v).mass_all == 0.0


@pytest.mark.parametrize("c,expected_p,expected_r", [(16, 0.117851, 0.006944), (3, 0.272166, 1 / 27)])
def test_init_sigmas(c, expected_p, expected_r):
    assert transform.kwi_sigma(c * 9) == pytest.approx(expected_p, abs=1e-6)
    assert transform.hmwi_sigma(c * 9) == pytest.approx(expected_r, abs=1e-6)


def test_sigma_ratio():
    assert transform.hmwi_sigma(144) / transform.kwi_sigma(144) == pytest.approx(0.0589, abs=1e-4)


def test_empirical_std():
    spec = NetworkSpec.from_depth(20)
    v = transform.kwi_init(spec, 7)
    info = spec.layers[-2]  # 64x64x3x3, ~37k weights
    w = v.weight(info.index)
    draws = np.concatenate([transform.kwi_init(spec, s).weight(info.index).ravel() for s in range(3)])
    assert draws.size >= 1e5
    assert draws.std() == pytest.approx(transform.kwi_sigma(576), rel=0.01)
    assert np.all(v.bias(info.index) == 0) and w.shape == info.weight_shape


def test_hmwi_id_weights_are_small():
    spec = NetworkSpec.from_depth(20, kind="residual")
    ids = np.abs(transform.hmwi_init(spec, 0).data[spec.layout.id_index])
    assert 1e-4 < np.median(ids) < 1e-2 and ids.max() < 0.1


def test_scale_coupled_initializers():
    spec = toy_spec("residual", n=2)
    p, r = transform.kwi_init(spec, 3), transform.hmwi_init(spec, 3)
    for info in spec.layers:
        s = info.weight_size // info.out_channels
        ratio = r.weight(info.index) / p.weight(info.index)
        assert np.allclose(ratio, transform.hmwi_sigma(s) / transform.kwi_sigma(s), rtol=1e-12)


def test_T_untouched_outside_id(rng):
    spec = toy_spec("residual", n=2)
    r = ParamVector(spec, rng.standard_normal(spec.layout.size))
    diff = transform.transform_T(r).data - r.data
    mask = np.zeros(spec.layout.size, bool)
    mask[spec.layout.id_index] = True
    assert np.all(diff[~mask] == 0) and np.allclose(diff[mask], 1.0, atol=1e-15)


def test_T_kind_tags():
    spec = toy_spec("residual")
    assert transform.transform_T(ParamVector.zeros(spec)).spec.kind == "plain"
    assert transform.transform_T_inv(ParamVector.zeros(spec.with_kind("plain"))).spec.kind == "residual"


def test_T_rejects_non_vectors():
    with pytest.raises(InvalidArgument):
        transform.transform_T(np.zeros(10))


def test_dominant_kernels_require_residual_kind():
    with pytest.raises(InvalidArgument):
        transform.make_dominant_kernels(ParamVector.zeros(toy_spec("plain")))


def test_dominant_mask_shape():
    spec = toy_spec("residual", n=1, base=2)
    m = transform.dominant_mask(spec)
    lower = transform.dominant_mask(spec, lower_dense=True)
    assert np.all(m <= lower)
    doubling = spec.layers[2]  # 4x2 kernel, first block of group 2
    w = m[doubling.weight_offset:doubling.bias_offset].reshape(doubling.weight_shape)[:, :, 0, 0]
    assert np.array_equal(w, np.array([[1, 0], [0, 1], [1, 0], [0, 1]], bool))
    wl = lower[doubling.weight_offset:doubling.bias_offset].reshape(doubling.weight_shape)[:, :, 0, 0]
    assert np.array_equal(wl, np.array([[1, 0], [0, 1], [1, 1], [1, 1]], bool))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1.0))
def test_T_inverse_properties(seed, scale):
    spec = toy_spec("residual", n=2)
    r = ParamVector(spec, scale * np.random.default_rng(seed).standard_normal(spec.layout.size))
    back = transform.transform_T_inv(transform.transform_T(r))
    assert np.max(np.abs(back.data - r.data)) <= 1e-15
    p = transform.transform_T(r)
    assert np.max(np.abs(transform.transform_T(transform.transform_T_inv(p)).data - p.data)) <= 1e-15


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.booleans())
def test_T_l1_growth_bound(seed, shift):
    spec = toy_spec("residual", n=2)
    data = 0.3 * np.random.default_rng(seed).standard_normal(spec.layout.size)
    if shift:
        data[spec.layout.id_index] = np.abs(data[spec.layout.id_index])
    r = ParamVector(spec, data)
    grow = transform.weight_stats(transform.transform_T(r)).mass_all - transform.weight_stats(r).mass_all
    n_id = len(spec.layout.id_index)
    assert grow <= n_id + 1e-9
    if shift:
        assert grow == pytest.approx(n_id, abs=1e-9)
