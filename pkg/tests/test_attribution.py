import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minsep_accounting import attribution as A
from minsep_accounting import accounting, kernels


def random_graph(rng, m, n_users, max_deg=3):
    users = [frozenset(rng.choice(n_users, rng.integers(1, max_deg + 1), replace=False).tolist())
             for _ in range(m)]
    return A.AttributionGraph(np.arange(m) * 3 + 1, tuple(users))


def brute_neighborhood(g, k):
    return sorted(int(g.example_ids[j]) for j in range(g.m) if g.users[j] & g.users[k])


class TestGraph:
    def test_read_write(self, tmp_path):
        (tmp_path / "g.txt").write_text("# header\n3 alice bob\n1 alice  # trailing\n\n7 carol\n")
        g = A.AttributionGraph.read(tmp_path / "g.txt")
        assert g.example_ids.tolist() == [1, 3, 7]
        assert g.users[1] == {"alice", "bob"}
        g.write(tmp_path / "h.txt")
        h = A.AttributionGraph.read(tmp_path / "h.txt")
        assert h.example_ids.tolist() == g.example_ids.tolist() and h.users == g.users

    @pytest.mark.parametrize("text", ["1\n", "x a\n", "1 a\n1 b\n"])
    def test_read_errors(self, tmp_path, text):
        (tmp_path / "g.txt").write_text(text)
        with pytest.raises(ValueError):
            A.AttributionGraph.read(tmp_path / "g.txt")

    def test_neighborhoods_match_brute_force(self):
        g = random_graph(np.random.default_rng(0), 40, 15)
        sizes = g.neighborhood_sizes()
        for k in range(g.m):
            nb = brute_neighborhood(g, k)
            assert g.neighborhood(int(g.example_ids[k])).tolist() == nb
            assert sizes[k] == len(nb)
        with pytest.raises(KeyError):
            g.neighborhood(0)

    def test_restrict_to_user(self):
        g = A.AttributionGraph.from_mapping({0: {"a"}, 1: {"a", "b"}, 2: {"b"}})
        assert g.restrict_to_user("b").example_ids.tolist() == [1, 2]
        assert g.user_degrees() == {"a": 2, "b": 2}


class TestContributionBound:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k_u=st.integers(1, 4))
    def test_caps_and_maximality(self, seed, k_u):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 30, 8)
        out = A.contribution_bound(g, k_u, False, rng)
        deg = out.user_degrees()
        assert all(v <= k_u for v in deg.values())
        kept = set(out.example_ids.tolist())
        # maximal: no dropped example would still fit
        for k in range(g.m):
            if int(g.example_ids[k]) not in kept:
                assert any(deg.get(u, 0) >= k_u for u in g.users[k])

    def test_duplicates_fill_capacity(self):
        g = A.AttributionGraph.from_mapping({5: {"a"}, 6: {"a", "b"}})
        out = A.contribution_bound(g, 3, True, np.random.default_rng(0))
        assert all(v <= 3 for v in out.user_degrees().values())
        assert out.user_degrees()["a"] == 3
        assert len(set(out.example_ids.tolist())) == out.m
        assert set(out.source.tolist()) <= {5, 6}
        assert {5, 6} & set(out.example_ids.tolist())

    def test_rejects_bad_cap(self):
        with pytest.raises(ValueError):
            A.contribution_bound(random_graph(np.random.default_rng(0), 3, 2), 0, False,
                                 np.random.default_rng(0))


class TestNeighborhoodCap:
    def test_worked_example(self):
        # a star: example 0 shares a user with everyone
        g = A.AttributionGraph.from_mapping({0: {"x", "y", "z"}, 1: {"x"}, 2: {"y"}, 3: {"z"}})
        out, adv = A.neighborhood_cap(g, 2, b=2, p=0.1)
        assert out.example_ids.tolist() == [1, 2, 3]
        assert adv.removed == [(0, 4, "include")]
        assert [r[1] for r in adv.retained] == [1, 1, 1]
        assert adv.cap_verdict == "include"

    def test_ties_break_by_smallest_id(self):
        g = A.AttributionGraph.from_mapping({4: {"u"}, 2: {"u"}, 9: {"u"}})
        out, adv = A.neighborhood_cap(g, 2, b=1, p=0.5)
        assert [r[0] for r in adv.removed] == [2]
        assert out.example_ids.tolist() == [4, 9]

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k_e=st.integers(1, 6))
    def test_result_respects_cap(self, seed, k_e):
        g = random_graph(np.random.default_rng(seed), 25, 10)
        out, adv = A.neighborhood_cap(g, k_e, 3, 0.05)
        assert out.m == 0 or out.neighborhood_sizes().max() <= k_e
        for eid, size, _ in adv.retained:
            assert size == len(out.neighborhood(eid))
        assert out.m + len(adv.removed) == g.m

    def test_verdict(self):
        assert A.include_verdict(4, 0.05, 4) == "include"
        assert A.include_verdict(4, 0.05, 5) == "exclude"


class TestMultiAttrSampling:
    def test_single_attribution_reduces_to_literal_coins(self):
        # one user per example: exclusion only through the example's own coins
        m, n, b, p = 20, 40, 3, 0.3
        g = A.AttributionGraph(np.arange(m), tuple(frozenset([k]) for k in range(m)))
        cfg = A.MultiAttrConfig(p, b, n, seed=4, warmup_iters=0)
        coins = A.interim_coins(g, p, n, cfg.seed)
        sched = A.sample_multiattr(g, cfg, coins)
        X = np.zeros((m, n), dtype=np.int64)
        for i, bt in enumerate(sched.batches):
            X[bt, i] = 1
        literal = accounting.coin_counts(coins.T[:, :, None], b, semantics="coins")
        np.testing.assert_array_equal(X, literal)

    @pytest.mark.parametrize("variant", A.VARIANTS)
    def test_neighbour_separation(self, variant):
        g = random_graph(np.random.default_rng(3), 30, 10)
        cfg = A.MultiAttrConfig(0.2, 3, 50, seed=1, variant=variant)
        sched = A.sample_multiattr(g, cfg)
        assert len(sched.batches) == 50
        last = {}
        for i, bt in enumerate(sched.batches):
            for e in bt.tolist():
                for nb in g.neighborhood(e).tolist():
                    if nb in last:
                        assert i - last[nb] >= 3 or last[nb] == i
            for e in bt.tolist():
                last[e] = i

    def test_coin_based_domination_coupling(self):
        """Same coins: a user's examples are never sampled in D when they are
        not sampled in D_u (pathwise, coin-based)."""
        rng = np.random.default_rng(8)
        for trial in range(30):
            g = random_graph(rng, 25, 6)
            u = sorted(g.all_users)[0]
            cfg = A.MultiAttrConfig(0.3, 3, 30, seed=trial)
            full = A.sample_multiattr(g, cfg)
            sub = A.sample_multiattr(g.restrict_to_user(u), cfg)
            mine = set(g.restrict_to_user(u).example_ids.tolist())
            for bf, bs in zip(full.batches, sub.batches):
                assert (set(bf.tolist()) & mine) <= set(bs.tolist())

    def test_participation_based_counterexample(self):
        """Pinned counterexample (from a randomized search): with identical
        coins the participation-based sampler lets the user in at an iteration
        where D_u would not, so the coupling above fails for it."""
        g = A.AttributionGraph(np.array([0, 1]), (frozenset({0, 2}), frozenset({2})))
        coins = np.array([[0, 1], [1, 1], [1, 0]], dtype=bool)
        ip, ix = g.neighborhoods_csr()
        full = kernels.multiattr_batches(coins, ip, ix, 2, by_coins=False)[:, 0]
        gu = g.restrict_to_user(0)
        ip2, ix2 = gu.neighborhoods_csr()
        sub = kernels.multiattr_batches(coins[:, :1], ip2, ix2, 2, by_coins=False)[:, 0]
        assert full.tolist() == [0, 0, 1]
        assert sub.tolist() == [0, 1, 0]
        # coin-based is unaffected on the same input
        full_c = kernels.multiattr_batches(coins, ip, ix, 2, by_coins=True)[:, 0]
        sub_c = kernels.multiattr_batches(coins[:, :1], ip2, ix2, 2, by_coins=True)[:, 0]
        assert np.all(full_c <= sub_c)

    def test_user_participation_vector(self):
        g = A.AttributionGraph.from_mapping({0: {"a"}, 1: {"a", "b"}, 2: {"b"}})
        s = A.sample_multiattr(g, A.MultiAttrConfig(0.5, 2, 20, seed=0))
        va = A.user_participation_vector(g, s, "a")
        assert va.shape == (20,) and va.max() <= 2
        with pytest.raises(KeyError):
            A.user_participation_vector(g, s, "zzz")

    def test_config_defaults(self):
        cfg = A.MultiAttrConfig(0.1, 2, 7, seed=0)
        assert cfg.warmup == 7 and cfg.certified
        assert not A.MultiAttrConfig(0.1, 2, 7, seed=0, variant="participation_based").certified
        with pytest.raises(ValueError):
            A.MultiAttrConfig(0.1, 2, 7, seed=0, variant="other")

    def test_find_sampling_probability(self):
        g = random_graph(np.random.default_rng(1), 60, 30, max_deg=2)
        p = A.find_sampling_probability(g, 2.5, b=2, n=20, seed=0, replicas=8, tol=1e-3, grid=10)
        sizes = [np.mean([len(bt) for bt in A.sample_multiattr(
            g, A.MultiAttrConfig(p, 2, 20, seed=100 + r)).batches]) for r in range(32)]
        assert np.mean(sizes) == pytest.approx(2.5, rel=0.1)

    def test_find_sampling_probability_unreachable(self):
        # batch size peaks and then collapses as p -> 1, so large targets fail loudly
        g = random_graph(np.random.default_rng(1), 60, 30, max_deg=2)
        with pytest.raises(ValueError, match="unreachable"):
            A.find_sampling_probability(g, 30.0, b=2, n=20, seed=0, replicas=4, grid=8)
