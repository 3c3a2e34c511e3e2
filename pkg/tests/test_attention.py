import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densattn import oracles
from densattn.attention import (
    PARAMETER_FREE,
    TABLE_CONFIGS,
    AttentionConfig,
    budget_audit,
    cam,
    cbam,
    init_cam,
    init_cbam,
    init_se,
    make_attention,
    param_count,
    pfca,
    pfca_weights,
    pfcasa,
    sa,
    sa_weights,
    se,
    simam,
    simam_weights,
)
from densattn.tensor import ParamStore, Tensor, grad_check

SIG_HALF = 0.6224593312018546  # sigmoid(0.5)
LAM = 1e-4


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def const_channels(values, h=3, w=3):
    return np.stack([np.full((h, w), v) for v in values])[None]


class TestPFCA:
    def test_equal_channel_means_give_sigmoid_half(self, rng):
        x = rng.standard_normal((1, 4, 3, 3))
        x -= x.mean(axis=(2, 3), keepdims=True) - 0.7  # every channel mean is 0.7
        out = pfca(T(x))
        np.testing.assert_allclose(out.data, SIG_HALF * x, rtol=1e-12)

    def test_two_constant_channels(self):
        # U = [0, 2], mu = 1, var = 1: V = (1 + 2(1 + lam)) / (4(1 + lam))
        v = (1 + 2 * (1 + LAM)) / (4 * (1 + LAM))
        assert v == pytest.approx(0.74997500249975, abs=1e-15)
        w = pfca_weights(T(const_channels([0.0, 2.0])), LAM).data.ravel()
        expected = 1 / (1 + np.exp(-v))
        np.testing.assert_allclose(w, [expected, expected], rtol=1e-14)

    def test_three_channels_match_scalar_oracle(self, rng):
        x = const_channels([0.0, 1.0, 2.0]) + 0.01 * rng.standard_normal((1, 3, 3, 3))
        np.testing.assert_allclose(pfca(T(x)).data, oracles.pfca_scalar(x), rtol=0, atol=1e-12)

    def test_batch_statistics_are_per_sample(self, rng):
        a, b = rng.standard_normal((1, 5, 4, 4)), 10 * rng.standard_normal((1, 5, 4, 4))
        both = pfca(T(np.concatenate([a, b]))).data
        np.testing.assert_allclose(both[:1], pfca(T(a)).data, atol=1e-15)
        np.testing.assert_allclose(both[1:], pfca(T(b)).data, atol=1e-15)

    def test_grad(self, rng):
        assert grad_check(pfca, T(rng.uniform(-1, 1, (2, 4, 3, 3)))) < 1e-4


class TestSA:
    def test_constant_softmax_is_uniform(self):
        x = np.full((1, 3, 4, 5), 0.3)
        np.testing.assert_allclose(sa(T(x), "softmax").data, x / 20, rtol=1e-14)

    def test_zero_input_sigmoid(self):
        x = np.zeros((1, 2, 3, 3))
        assert np.all(sa_weights(T(x), "sigmoid").data == 0.5)
        assert np.all(sa(T(x), "sigmoid").data == 0)

    def test_softmax_weights_sum_to_one(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        p = sa_weights(T(x), "softmax").data
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(p, oracles.sa_weights_scalar(x, "softmax"), atol=1e-12)

    def test_softmax_survives_huge_activations(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 0, 0] = 1e4
        p = sa_weights(T(x), "softmax").data
        assert np.isfinite(p).all() and p[0, 0, 0, 0] == 1.0

    @pytest.mark.parametrize("act", ["softmax", "sigmoid"])
    def test_scalar_oracle(self, rng, act):
        x = rng.uniform(-1, 1, (2, 5, 4, 3))
        np.testing.assert_allclose(sa(T(x), act).data, oracles.sa_scalar(x, act), atol=1e-12)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            sa(T(np.zeros((1, 1, 2, 2))), "tanh")

    @pytest.mark.parametrize("act", ["softmax", "sigmoid"])
    def test_grad(self, rng, act):
        assert grad_check(lambda t: sa(t, act), T(rng.uniform(-1, 1, (2, 3, 3, 3)))) < 1e-4


class TestSimAM:
    def test_constant_channel(self):
        x = const_channels([2.5, -1.0])
        np.testing.assert_allclose(simam(T(x)).data, SIG_HALF * x, rtol=1e-12)

    def test_energy_of_spike_channel(self):
        # channel [0, 0, 0, 4]: mu = 1, var = 3
        e = oracles.simam_energy_scalar(np.array([[0.0, 0.0], [0.0, 4.0]]))
        np.testing.assert_allclose(e.ravel(), [1.714293877317791] * 3 + [0.8000159997866696], rtol=1e-14)
        x = np.array([[[[0.0, 0.0], [0.0, 4.0]]]])
        w = simam_weights(T(x)).data.ravel()
        np.testing.assert_allclose(w, 1 / (1 + np.exp(-1 / e.ravel())), atol=1e-12)
        np.testing.assert_allclose(simam(T(x)).data, oracles.simam_scalar(x), atol=1e-12)

    @given(arrays(np.float64, (1, 1, 3, 3), elements=st.floats(-5, 5)))
    def test_farthest_neuron_gets_largest_weight(self, x):
        w = simam_weights(T(x)).data.ravel()
        dist = (x.ravel() - x.mean()) ** 2
        assert w[np.argmax(dist)] >= w.max() - 1e-15
        # weight is monotone in squared distance from the channel mean
        order = np.argsort(dist, kind="stable")
        assert np.all(np.diff(w[order]) >= -1e-15)

    def test_grad(self, rng):
        assert grad_check(simam, T(rng.uniform(-1, 1, (2, 3, 3, 4)))) < 1e-4


class TestPFCASA:
    def test_zero_input(self):
        assert np.all(pfcasa(T(np.zeros((1, 3, 4, 4)))).data == 0)

    @pytest.mark.parametrize("act", ["softmax", "sigmoid"])
    def test_is_composition(self, rng, act):
        x = T(rng.uniform(-1, 1, (2, 4, 5, 5)))
        np.testing.assert_allclose(pfcasa(x, LAM, act).data, sa(pfca(x, LAM), act).data, rtol=0, atol=1e-12)

    def test_constant_input_sigmoid(self):
        c, channels = 2.0, 3
        x = np.full((1, channels, 2, 2), c)
        refined = SIG_HALF * c
        expected = refined / (1 + np.exp(-channels * refined))
        assert expected == pytest.approx(1.2158845585101916, abs=1e-14)
        np.testing.assert_allclose(pfcasa(T(x)).data, expected, rtol=1e-12)

    def test_grad(self, rng):
        assert grad_check(pfcasa, T(rng.uniform(-1, 1, (2, 4, 3, 3)))) < 1e-4


class TestParameterized:
    def test_se_zero_excitation_halves(self, rng):
        params = init_se(8, 2, rng)
        params["fc2.weight"].data[:] = 0
        x = rng.standard_normal((2, 8, 3, 3))
        np.testing.assert_allclose(se(T(x), params, 2).data, 0.5 * x, rtol=1e-15)

    @pytest.mark.parametrize("c,r", [(8, 2), (16, 4), (64, 16), (512, 4), (512, 16)])
    def test_cbam_minus_se_is_98(self, c, r):
        assert param_count(AttentionConfig("CBAM", r=r), c) - param_count(AttentionConfig("SE", r=r), c) == 98

    @pytest.mark.parametrize("kind,r", [("SE", 4), ("CBAM", 2), ("CAM", 4), ("CAM", 1)])
    def test_closed_form_matches_instance(self, rng, kind, r):
        store = ParamStore()
        att = make_attention(AttentionConfig(kind, r=r), 16, store, rng)
        assert store.count() == att.param_count() == param_count(att.cfg, 16)

    @pytest.mark.parametrize("fn,init", [(se, init_se), (cbam, init_cbam), (cam, init_cam)])
    def test_wrong_channel_count(self, rng, fn, init):
        params = init(8, 2, rng)
        with pytest.raises(ValueError):
            fn(T(np.zeros((1, 16, 3, 3))), params, 2)

    def test_wrong_ratio(self, rng):
        with pytest.raises(ValueError, match="different C or r"):
            se(T(np.zeros((1, 8, 3, 3))), init_se(8, 2, rng), 4)

    @pytest.mark.parametrize("kind", ["SE", "CBAM", "CAM"])
    def test_grad(self, rng, kind):
        att = make_attention(AttentionConfig(kind, r=2), 8, rng=rng, init_std=0.5)
        x = T(rng.uniform(-1, 1, (2, 8, 4, 3)))
        assert grad_check(att, x, wrt=tuple(att.params.values())) < 1e-4

    @pytest.mark.parametrize("kind", ["SE", "CBAM", "CAM"])
    def test_shape_preserved(self, rng, kind):
        att = make_attention(AttentionConfig(kind, r=4), 16, rng=rng)
        assert att(T(rng.standard_normal((2, 16, 5, 7)))).shape == (2, 16, 5, 7)


class TestBudget:
    @pytest.mark.parametrize("kind", PARAMETER_FREE)
    @pytest.mark.parametrize("c", [1, 3, 64, 512])
    def test_parameter_free_counts_zero(self, kind, c):
        store = ParamStore()
        make_attention(AttentionConfig(kind), c, store)
        assert param_count(AttentionConfig(kind), c) == 0
        assert store.count() == 0 and len(store) == 0

    def test_se4_within_budget(self):
        rep = budget_audit(16_263_041, AttentionConfig("SE", r=4), 512)
        assert rep.within_budget and rep.added_params == 131_072
        assert rep.ratio == pytest.approx(131_072 / 16_263_041)

    def test_none_audit(self):
        rep = budget_audit(1000, AttentionConfig("None"), 64)
        assert (rep.added_params, rep.ratio, rep.within_budget) == (0, 0.0, True)

    def test_se2_over_budget(self):
        rep = budget_audit(16_263_041, AttentionConfig("SE", r=2), 512)
        assert rep.added_params == 2 * 512 * 512 // 2
        assert not rep.within_budget

    def test_table_deltas_against_standard_csrnet(self):
        # published totals of the parameterized variants, less a 16,263,489-parameter CSRNet
        table = {"SE(r=4)": 16_394_561, "CAM(r=8)": 16_363_009, "CBAM(r=4)": 16_394_659,
                 "SE(r=16)": 16_296_257, "CAM(r=16)": 16_313_761, "CBAM(r=16)": 16_296_355}
        for cfg in TABLE_CONFIGS:
            if cfg.label in table:
                assert 16_263_489 + param_count(cfg, 512) == table[cfg.label]

    def test_non_dividing_ratio(self):
        with pytest.raises(ValueError, match="does not divide"):
            param_count(AttentionConfig("SE", r=3), 512)


class TestConfig:
    def test_parse(self):
        assert AttentionConfig.parse("SE:r=4") == AttentionConfig("SE", r=4)
        assert AttentionConfig.parse("SA:act=softmax").sa_activation == "softmax"
        assert AttentionConfig.parse("PFCA:lambda=0.01").lam == 0.01

    def test_labels(self):
        assert [c.label for c in TABLE_CONFIGS][:6] == ["None", "PFCA", "SA", "PFCASA", "SimAM", "SE(r=4)"]
        assert AttentionConfig("SA", sa_activation="softmax").label == "SA[softmax]"

    @pytest.mark.parametrize("kw", [{"kind": "XYZ"}, {"kind": "PFCA", "lam": 0}, {"kind": "SE"},
                                    {"kind": "SA", "sa_activation": "relu"}, {"kind": "CAM", "r": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttentionConfig(**kw)

    def test_dict_round_trip(self):
        cfg = AttentionConfig("CBAM", r=16)
        assert AttentionConfig.from_dict(cfg.to_dict()) == cfg


ALL_OPS = [
    lambda x: pfca(x), lambda x: sa(x, "softmax"), lambda x: sa(x, "sigmoid"),
    lambda x: simam(x), lambda x: pfcasa(x, LAM, "sigmoid"), lambda x: pfcasa(x, LAM, "softmax"),
]


@settings(max_examples=25)
@given(st.tuples(st.integers(1, 2), st.integers(1, 8), st.integers(1, 6), st.integers(1, 6)),
       st.integers(0, 2**31), st.sampled_from(range(len(ALL_OPS))))
def test_shape_and_boundedness(shape, seed, op):
    x = np.random.default_rng(seed).uniform(-3, 3, shape)
    out = ALL_OPS[op](T(x)).data
    assert out.shape == x.shape
    assert np.abs(out).max() <= np.abs(x).max()
