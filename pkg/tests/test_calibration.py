import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from minsep_accounting import accounting as AC
from minsep_accounting import calibration as CAL
from minsep_accounting import strategy as S


def quad_gaussian_delta(sens, sigma, eps):
    """Hockey-stick between N(sens, sigma^2) and N(0, sigma^2) by quadrature."""
    def integrand(y):
        p = stats.norm.pdf(y, sens, sigma)
        q = stats.norm.pdf(y, 0, sigma)
        return max(p - math.exp(eps) * q, 0.0)
    # the integrand is positive exactly right of this point
    start = sigma**2 * eps / sens + sens / 2
    val, _ = integrate.quad(integrand, start, math.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


class TestGaussian:
    def test_pinned_values(self):
        assert CAL.gaussian_delta(1, 1, 1) == pytest.approx(0.12693673750664392, rel=1e-12)
        assert CAL.gaussian_delta(1, 1, 0) == pytest.approx(stats.norm.cdf(0.5) - stats.norm.cdf(-0.5),
                                                             rel=1e-14)
        assert CAL.gaussian_delta(0, 1, 1) == 0.0

    @pytest.mark.parametrize("sens", [0.3, 1.0, 2.0])
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
    @pytest.mark.parametrize("eps", [0.0, 1.0, 4.0])
    def test_quadrature(self, sens, sigma, eps):
        assert CAL.gaussian_delta(sens, sigma, eps) == pytest.approx(
            quad_gaussian_delta(sens, sigma, eps), abs=1e-9)

    def test_calibrate_brackets(self):
        s = CAL.calibrate_gaussian_sigma(1.0, 1.0, 1e-5, rtol=1e-9)
        assert CAL.gaussian_delta(1.0, s, 1.0) <= 1e-5
        assert CAL.gaussian_delta(1.0, s * (1 - 1e-6), 1.0) > 1e-5
        assert s == pytest.approx(3.730631915377022, rel=1e-6)

    def test_sensitivity_examples(self):
        assert CAL.dominating_sensitivity(S.ToeplitzBanded(4, [1, 0.5])) == pytest.approx(math.sqrt(2.5))
        assert CAL.dominating_sensitivity(S.ToeplitzBanded(3, [1, 0.5])) == pytest.approx(1.5)
        m = S.bsr(6, 6)
        assert CAL.dominating_sensitivity(m) == pytest.approx(math.sqrt(np.sum(m.coeffs**2)))
        assert CAL.dominating_sensitivity(S.ToeplitzBanded(4, [1, 0.5]), k_u=3) == pytest.approx(
            3 * math.sqrt(2.5))

    def test_sensitivity_bound_general(self):
        rng = np.random.default_rng(0)
        L = np.tril(rng.uniform(0, 1, (8, 8)))
        np.fill_diagonal(L, 1)
        g = S.GeneralLowerTriangular(L)
        bound = CAL.dominating_sensitivity(g, b=3)
        x = np.zeros(8)
        x[::3] = 1
        assert np.linalg.norm(L @ x) <= bound


class TestVerifierBounds:
    def test_hoeffding_example(self):
        assert CAL.mc_failure_bound(2e-3, 1e-3, 10**6, "hoeffding") == pytest.approx(math.exp(-2))

    def test_monotone_in_s(self):
        for kind in CAL.BOUND_KINDS:
            qs = [CAL.mc_failure_bound(2e-3, 1e-3, s, kind) for s in (10, 100, 10**4, 10**6)]
            assert all(a > b for a, b in zip(qs, qs[1:]))

    def test_bernstein_is_valid(self):
        # exact binomial lower tail never exceeds the bound
        for s, d, dp in [(2000, 0.01, 0.005), (500, 0.1, 0.05), (10**4, 2e-3, 1e-3)]:
            exact = stats.binom.cdf(math.floor(dp * s), s, d)
            assert exact <= CAL.mc_failure_bound(d, dp, s, "bernstein")
            assert exact <= CAL.mc_failure_bound(d, dp, s, "hoeffding")

    def test_invalid(self):
        with pytest.raises(ValueError):
            CAL.mc_failure_bound(1e-3, 2e-3, 10)
        with pytest.raises(ValueError):
            CAL.mc_failure_bound(2e-3, 1e-3, 10, "chernoff")

    def test_sample_count_against_grid_oracle(self):
        s, d = CAL.optimize_sample_count(1e-3, 5e-4, "bernstein")
        grid = 5e-4 + np.linspace(1e-7, 4.999e-4, 20000)

        def best(s_):
            return min(CAL.delta_o(x, 5e-4, s_, "bernstein") for x in grid)

        assert best(s) <= 1e-3 * (1 + 1e-9)
        assert best(s - 1) > 1e-3 * (1 - 1e-9)
        assert CAL.delta_o(d, 5e-4, s, "bernstein") <= 1e-3
        assert s == 106127

    def test_hoeffding_needs_more(self):
        sb, _ = CAL.optimize_sample_count(0.05, 0.025, "bernstein")
        sh, _ = CAL.optimize_sample_count(0.05, 0.025, "hoeffding")
        assert sb < sh

    def test_joint_never_worse(self):
        a = CAL.VerifierConfig.optimized(1.0, 0.05)
        b = CAL.VerifierConfig.optimized(1.0, 0.05, joint=True)
        assert b.s <= a.s
        assert b.delta_o <= 0.05 and a.delta_o <= 0.05
        assert a.delta_prime == 0.025


class TestLadder:
    def test_ratio_exact(self):
        lad = CAL.NoiseLadder.geometric(1.0, 2.0)
        r = np.array(lad.sigmas[1:]) / np.array(lad.sigmas[:-1])
        np.testing.assert_allclose(r, 1.01, rtol=1e-14)
        assert lad.sigmas[-1] == 2.0 and lad.sigmas[0] <= 1.0

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            CAL.NoiseLadder((1.0, 1.0))


class TestSelectIndex:
    def test_examples(self):
        assert CAL.select_index([0, 1, 1]) == 2
        assert CAL.select_index([1, 0, 1]) == 3
        assert CAL.select_index([1, 0, 0]) == 3
        assert CAL.select_index([1, 1, 0]) == 1

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=12))
    def test_literal_min_set(self, v):
        v = list(v)
        v[-1] = 1
        candidates = [i for i in range(1, len(v) + 1) if all(v[j - 1] for j in range(i, len(v) + 1))]
        assert CAL.select_index(v) == min(candidates)

    @pytest.mark.parametrize("verdicts,expected", [((0, 1), 2), ((1, 0), 3)])
    def test_stub_verifier(self, verdicts, expected):
        lad = CAL.NoiseLadder((1.0, 2.0, 3.0))
        res = CAL.evr_calibrate(AC.Scheme("bminsep_cold", 2, 0.5), S.bsr(6, 2), 1.0, 0.05, seed=0,
                                ladder=lad, verdict_fn=lambda j, s: verdicts[j - 1], evaluate_all=True)
        assert res.index == expected and res.verdicts[-1] == 1
        assert res.sigma_star == lad.sigmas[expected - 1]
        assert not res.certified  # stubbed verifier gives no guarantee

    def test_optimistic_stub_bisects(self):
        lad = CAL.NoiseLadder(tuple(np.arange(1, 41, dtype=float)))
        seen = []

        def fn(j, s):
            seen.append(j)
            return j >= 17

        res = CAL.evr_calibrate(AC.Scheme("bminsep_cold", 2, 0.5), S.bsr(6, 2), 1.0, 0.05, seed=0,
                                mode="optimistic", ladder=lad, verdict_fn=fn)
        assert res.index == 17 and len(seen) <= 7
        assert "NO formal privacy guarantee" in res.warning


class TestEvr:
    def _run(self, mode, **kw):
        m = S.bsr(6, 2)
        sch = AC.Scheme("bminsep_cold", 2, 0.5)
        lad = CAL.NoiseLadder.geometric(0.4, 2.0, ratio=1.15)
        return CAL.evr_calibrate(sch, m, 1.0, 0.05, seed=3, mode=mode, ladder=lad, **kw)

    def test_certified_result_provenance(self):
        ver = CAL.VerifierConfig.optimized(1.0, 0.05)
        res = self._run("certified", verifier=ver)
        assert res.certified and res.guarantee == (1.0, ver.delta_o)
        d = json.loads(res.to_json())
        assert d["verifier"]["bound_kind"] == "bernstein"
        assert d["verifier"]["s"] == ver.s
        # trailing-ones rule over the evaluated suffix
        v = res.verdicts
        assert all(x == 1 for x in v[res.index - 1:])
        assert res.index == 1 or v[res.index - 2] == 0

    def test_certified_dominates_optimistic(self):
        ver = CAL.VerifierConfig.optimized(1.0, 0.05)
        cert = self._run("certified", verifier=ver)
        opt = self._run("optimistic", optimistic_samples=ver.s)
        assert cert.sigma_star >= opt.sigma_star

    def test_deterministic(self):
        ver = CAL.VerifierConfig.optimized(1.0, 0.05)
        assert self._run("certified", verifier=ver).to_json() == self._run("certified", verifier=ver).to_json()

    def test_default_ladder_ends_at_anchor(self):
        sch = AC.Scheme("bminsep_cold", 2, 0.5)
        m = S.bsr(6, 2)
        res = CAL.evr_calibrate(sch, m, 1.0, 0.05, seed=0, verdict_fn=lambda j, s: True)
        assert res.sigmas[-1] == pytest.approx(CAL.calibrate_sigma_anchor(m, 1.0, 0.05, sch))
        assert res.sigmas[0] <= CAL.default_sigma_low(m, sch, 1.0, 0.05)
        assert res.index == 1

    def test_conjectural_scheme_not_certified(self):
        sch = AC.Scheme("multiattr_participation", 2, 0.3, 2, unproven_conjecture=True)
        lad = CAL.NoiseLadder((1.0, 4.0))
        res = CAL.evr_calibrate(sch, S.bsr(4, 2), 1.0, 0.05, seed=0, ladder=lad,
                                verifier=CAL.VerifierConfig.with_samples(1.0, 0.05, 2000))
        assert not res.certified and res.guarantee is None and "conjectural" in res.warning


@settings(max_examples=30, deadline=None)
@given(sens=st.floats(0.1, 5), eps=st.floats(0, 5), delta=st.floats(1e-8, 0.5))
def test_calibrated_sigma_is_tight(sens, eps, delta):
    s = CAL.calibrate_gaussian_sigma(sens, eps, delta)
    assert CAL.gaussian_delta(sens, s, eps) <= delta
    assert CAL.gaussian_delta(sens, s * (1 - 1e-6), eps) > delta or s * (1 - 1e-6) <= 0
