import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy import stats as sps

from widthdepth.limitsim import (
    DebugNoise,
    LimitLaw,
    SdeConfig,
    euler_maruyama,
    euler_maruyama_ensemble,
    limit_variance,
    mckean_vlasov_sample,
)
from widthdepth.netsim import NetworkConfig, forward_norm_driven, sample_input
from widthdepth.rng import make_rng
from widthdepth.stats import raw_moments

UNIT = np.ones(30)
DOUBLE = np.full(30, math.sqrt(2.0))


class TestLimitVariance:
    def test_values(self):
        assert limit_variance(0.0, UNIT) == pytest.approx(1.0, rel=1e-15)
        assert limit_variance(1.0, UNIT) == pytest.approx(1.6487212707, rel=1e-9)
        assert limit_variance(0.5, UNIT) == pytest.approx(1.2840254167, rel=1e-9)
        assert limit_variance(0.5, DOUBLE) == pytest.approx(2.5680508333, rel=1e-9)

    @settings(max_examples=50)
    @given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_growth_law(self, t, h):
        assert limit_variance(t + h, UNIT) / limit_variance(t, UNIT) == pytest.approx(math.exp(h / 2), rel=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            limit_variance(1.5, UNIT)
        with pytest.raises(ValueError):
            limit_variance(0.5, np.zeros(3))

    def test_volatility_integrates_to_variance(self):
        law = LimitLaw(sample_input(7, make_rng(3)))
        for t in (0.3, 1.0):
            integral, _ = integrate.quad(lambda s: law.volatility(s) ** 2, 0.0, t, epsabs=1e-14)
            assert law.variance(0.0) + integral == pytest.approx(law.variance(t), rel=1e-10)


class TestMcKeanVlasov:
    @pytest.mark.parametrize("t,a", [(0.0, UNIT), (1.0, UNIT), (0.5, DOUBLE)])
    def test_sample_variance(self, t, a):
        s = mckean_vlasov_sample(t, a, 20_000, make_rng(5)).values
        v = limit_variance(t, a)
        se = v * math.sqrt(2.0 / s.size)
        assert abs(s.var() - v) < 3 * se
        assert abs(sps.skew(s)) < 3 * math.sqrt(6.0 / s.size)

    def test_rejects_bad_count(self):
        with pytest.raises(ValueError):
            mckean_vlasov_sample(0.5, UNIT, 0, make_rng(0))


class TestEulerMaruyama:
    def test_rejects_zero_steps_and_input(self):
        with pytest.raises(ValueError):
            SdeConfig(10, 0, UNIT)
        with pytest.raises(ValueError):
            SdeConfig(10, 5, np.zeros(3))

    def test_dead_state_is_absorbing(self):
        x0 = -np.linspace(0.1, 2.0, 6)
        noise = DebugNoise(x0, make_rng(0).standard_normal((10, 6)))
        tr = euler_maruyama(SdeConfig(6, 10, UNIT), [0.3, 1.0], debug_noise=noise)
        np.testing.assert_array_equal(tr.snapshots[:, 0], [x0, x0])

    def test_injected_step(self):
        x0 = np.array([3.0, -4.0])
        xi = np.array([[1.0, 2.0]])
        tr = euler_maruyama(SdeConfig(2, 1, UNIT), [1.0], debug_noise=DebugNoise(x0, xi))
        vol = 3.0 / math.sqrt(2.0)
        np.testing.assert_allclose(tr.snapshots[0, 0], x0 + vol * xi[0])

    def test_same_scheme_as_norm_driven_resnet(self):
        a = sample_input(30, make_rng(1))
        n, L = 64, 40
        em = euler_maruyama(SdeConfig(n, L, a, 11), [0.25, 1.0])
        nd = forward_norm_driven(NetworkConfig("resnet", n, L, 30, 11), a, [0.25, 1.0])
        assert em.layers == nd.layers
        np.testing.assert_allclose(em.snapshots, nd.snapshots, rtol=1e-12, atol=1e-12)

    def test_coordinates_exchangeable(self):
        a = sample_input(30, make_rng(1))
        ens = euler_maruyama_ensemble(SdeConfig(50, 50, a, 13), [1.0], 4000, neurons=(0, 17, 49))
        m2 = [raw_moments(ens.values[:, 0, 0, j], (2,))[0] for j in range(3)]
        for (x, sx) in m2[1:]:
            assert abs(x - m2[0][0]) < 3 * math.hypot(sx, m2[0][1])

    def test_ensemble_worker_count_independent(self):
        a = sample_input(30, make_rng(1))
        cfg = SdeConfig(20, 10, a, 14)
        one = euler_maruyama_ensemble(cfg, [1.0], 30, chunk_size=8)
        two = euler_maruyama_ensemble(cfg, [1.0], 30, chunk_size=8, n_jobs=2)
        np.testing.assert_array_equal(one.values, two.values)

    @pytest.mark.slow
    def test_terminal_variance_approaches_limit(self):
        a = sample_input(30, make_rng(1))
        ens = euler_maruyama_ensemble(SdeConfig(500, 500, a, 15), [1.0], 10_000)
        x = ens.values[:, 0, 0, 0]
        (m2, se), = raw_moments(x, (2,))
        assert abs(m2 - math.exp(0.5)) < 3 * se
