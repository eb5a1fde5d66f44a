import numpy as np
import pytest

from ffclab import presets
from ffclab.causal import (
    CausalGraph,
    ContingencyTable,
    backdoor_set,
    ci_test_g2,
    direct_indirect_effects,
    estimate_effect,
    estimate_joint,
    pc_discover,
    refute_random_common_cause,
    total_effect,
    trend_analysis,
)
from ffclab.errors import (
    IdentificationAmbiguousError,
    InvalidArgumentError,
    UnsupportedStratumError,
)
from ffclab.numkit import Rng
from ffclab.scmdata import Dataset, SCMSpec, closed_form_effects, sample_scm


def dataset_from_columns(**cols) -> Dataset:
    n = len(next(iter(cols.values())))
    y = cols.pop("y")
    return Dataset(x=np.zeros((n, 1)), attrs={}, y=y, extra=cols)


class TestContingencyTable:
    def test_all_zero_column(self):
        d = dataset_from_columns(y=np.zeros(10, dtype=np.int8))
        t = estimate_joint(d, ["y"])
        assert t.prob({"y": 1}) == 0.0

    def test_four_row_conditional(self):
        d = dataset_from_columns(
            a=np.array([0, 0, 1, 1], dtype=np.int8), y=np.array([0, 1, 0, 1], dtype=np.int8)
        )
        t = estimate_joint(d, ["a", "y"])
        assert t.cond_prob({"y": 1}, {"a": 0}) == 0.5

    def test_counts_sum_to_n(self):
        rng = Rng(1)
        d = dataset_from_columns(
            a=rng.bernoulli(0.3, 100), b=rng.bernoulli(0.7, 100), y=rng.bernoulli(0.5, 100)
        )
        t = estimate_joint(d, ["a", "b", "y"])
        assert t.counts.sum() == 100

    def test_smoothing_only_on_empty_cell(self):
        d = dataset_from_columns(
            a=np.array([0, 0, 0, 1], dtype=np.int8), y=np.array([0, 0, 0, 1], dtype=np.int8)
        )
        t = estimate_joint(d, ["a", "y"])
        # populated stratum, empty cell: add-0.5 over n+1
        assert t.cond_prob({"y": 1}, {"a": 0}) == 0.5 / 4.0
        # populated cell: raw frequency
        assert t.cond_prob({"y": 0}, {"a": 0}) == 1.0

    def test_empty_stratum_flagged(self):
        d = dataset_from_columns(
            a=np.zeros(5, dtype=np.int8), y=np.ones(5, dtype=np.int8)
        )
        t = estimate_joint(d, ["a", "y"])
        with pytest.raises(UnsupportedStratumError):
            t.cond_prob({"y": 1}, {"a": 1})

    def test_unknown_variable(self):
        d = dataset_from_columns(y=np.zeros(4, dtype=np.int8))
        with pytest.raises(InvalidArgumentError):
            estimate_joint(d, ["nope"])


class TestCITest:
    def test_identical_columns_dependent(self):
        a = np.repeat([0, 1], 5000).astype(np.int8)
        t = ContingencyTable.from_columns({"a": a, "y": a.copy()})
        res = ci_test_g2(t, "a", "y", (), 0.05)
        assert res.p_value < 1e-6 and not res.independent
        # perfectly dependent, exactly balanced binary pair: G^2 = 2 n ln 2
        assert abs(res.g2 - 2 * 10_000 * np.log(2)) < 1e-6
        # statistic grows linearly in n on perfectly dependent data
        half = ContingencyTable.from_columns({"a": a[::2], "y": a[::2]})
        assert abs(res.g2 - 2 * ci_test_g2(half, "a", "y", (), 0.05).g2) < 1e-6

    def test_constant_column_independent(self):
        t = ContingencyTable.from_columns(
            {"a": np.zeros(50, dtype=np.int8), "y": Rng(3).bernoulli(0.5, 50)}
        )
        res = ci_test_g2(t, "a", "y", (), 0.05)
        assert res.g2 == 0.0 and res.df >= 1 and res.independent

    def test_type_one_error_calibration(self):
        rejections = 0
        for seed in range(100):
            rng = Rng(seed, 5)
            t = ContingencyTable.from_columns(
                {"a": rng.bernoulli(0.5, 10_000), "y": rng.bernoulli(0.5, 10_000)}
            )
            rejections += not ci_test_g2(t, "a", "y", (), 0.05).independent
        assert 1 <= rejections <= 9  # 0.05 +/- 0.04 over 100 null sets

    def test_conditioning_blocks_mediated_dependence(self):
        data = sample_scm(presets.pure_chain(), 20_000, seed=4)
        t = estimate_joint(data, ["a1", "m1", "y"])
        marginal = ci_test_g2(t, "a1", "y", (), 0.01)
        conditioned = ci_test_g2(t, "a1", "y", ("m1",), 0.01)
        assert not marginal.independent
        assert conditioned.independent

    def test_bad_arguments(self):
        t = ContingencyTable.from_columns({"a": np.zeros(4, dtype=np.int8), "y": np.zeros(4, dtype=np.int8)})
        with pytest.raises(InvalidArgumentError):
            ci_test_g2(t, "a", "a", (), 0.05)
        with pytest.raises(InvalidArgumentError):
            ci_test_g2(t, "a", "y", ("a",), 0.05)


class TestPCDiscover:
    def test_chain_recovery(self):
        data = sample_scm(presets.pure_chain(), 20_000, seed=5)
        g = pc_discover(data, ["a1", "m1", "y"], alpha=0.01)
        assert g.undirected == {("a1", "m1"), ("m1", "y")}
        assert g.directed == set()
        assert g.sepsets[("a1", "y")] == frozenset({"m1"})

    def test_collider_recovery(self):
        data = sample_scm(presets.collider(), 20_000, seed=6)
        g = pc_discover(data, ["a1", "m1", "y"], alpha=0.01)
        assert g.directed == {("a1", "y"), ("m1", "y")}
        assert g.undirected == set()
        assert g.sepsets[("a1", "m1")] == frozenset()

    def test_independent_pair_empty_graph(self):
        rng = Rng(7)
        d = dataset_from_columns(a=rng.bernoulli(0.5, 5000), y=rng.bernoulli(0.5, 5000))
        g = pc_discover(d, ["a", "y"], alpha=0.01)
        assert g.directed == set() and g.undirected == set()

    def test_meek_rule_propagation(self):
        # collider plus a child of y: v-structure orients a1 -> y <- m1, then
        # rule 1 pushes y -> w because a1 and w are nonadjacent
        spec = SCMSpec(
            variables=["a1", "m1", "y", "w"],
            parents={"y": ["a1", "m1"], "w": ["y"]},
            cpt={
                "a1": np.array([0.5]),
                "m1": np.array([0.5]),
                "y": np.array([0.05, 0.5, 0.5, 0.95]),
                "w": np.array([0.1, 0.9]),
            },
            attributes=["a1"],
            label="y",
            mediators=["m1", "w"],
        )
        data = sample_scm(spec, 40_000, seed=8)
        g = pc_discover(data, ["a1", "m1", "y", "w"], alpha=0.01)
        assert ("y", "w") in g.directed
        assert {("a1", "y"), ("m1", "y")} <= g.directed

    def test_acyclic_directed_part(self):
        def is_acyclic(nodes, edges):
            color = {v: 0 for v in nodes}  # 0 unvisited, 1 on stack, 2 done

            def visit(v):
                color[v] = 1
                for a, b in edges:
                    if a == v and (color[b] == 1 or (color[b] == 0 and not visit(b))):
                        return False
                color[v] = 2
                return True

            return all(color[v] != 0 or visit(v) for v in nodes)

        for seed in (9, 10, 11, 12):
            data = sample_scm(presets.biased_two_attribute(), 10_000, seed=seed)
            g = pc_discover(data, ["a1", "a2", "y"], alpha=0.05)
            assert is_acyclic(g.nodes, g.directed)
            # no pair carries both a directed and an undirected edge
            for u, v in g.directed:
                assert not g.has_undirected(u, v)


class TestBackdoorSet:
    def dag(self, edges, nodes):
        return CausalGraph(nodes=nodes, directed=set(edges), undirected=set(), sepsets={})

    def test_root_treatment_empty(self):
        g = self.dag({("a", "y")}, ["a", "y"])
        assert backdoor_set(g, "a", "y") == []

    def test_textbook_confounder(self):
        g = self.dag({("z", "a"), ("z", "y"), ("a", "y")}, ["a", "y", "z"])
        assert backdoor_set(g, "a", "y") == ["z"]

    def test_mediator_not_adjusted(self):
        g = self.dag({("a", "m"), ("m", "y")}, ["a", "m", "y"])
        assert backdoor_set(g, "a", "y") == []

    def test_cpdag_rejected(self):
        g = CausalGraph(nodes=["a", "y"], directed=set(), undirected={("a", "y")}, sepsets={})
        with pytest.raises(IdentificationAmbiguousError):
            backdoor_set(g, "a", "y")


class TestTotalEffect:
    def test_two_node_scm(self):
        spec = SCMSpec(
            variables=["a1", "y"],
            parents={"y": ["a1"]},
            cpt={"a1": np.array([0.5]), "y": np.array([0.8, 0.2])},
            attributes=["a1"],
            label="y",
            d_x=2,
        )
        data = sample_scm(spec, 50_000, seed=10)
        est = estimate_effect(data, "a1", "y")
        assert abs(est.te - 0.6) < 0.02

    def test_null_effect(self):
        rng = Rng(11)
        d = dataset_from_columns(a=rng.bernoulli(0.5, 50_000), y=rng.bernoulli(0.4, 50_000))
        est = estimate_effect(d, "a", "y")
        assert abs(est.te) < 0.02

    def test_confounded_adjustment(self):
        spec = presets.confounded()
        oracle = closed_form_effects(spec, "a1", "y").te
        data = sample_scm(spec, 50_000, seed=12)
        adjusted = estimate_effect(data, "a1", "y", adjustment=("u",))
        unadjusted = estimate_effect(data, "a1", "y")
        assert abs(adjusted.te - oracle) < 0.02
        assert abs(unadjusted.te - (-0.55)) < 0.02

    def test_antisymmetry_under_arm_swap(self):
        rng = Rng(13)
        a = rng.bernoulli(0.4, 5000)
        y = rng.bernoulli(0.5, 5000)
        z = rng.bernoulli(0.5, 5000)
        t1 = ContingencyTable.from_columns({"a": a, "y": y, "z": z})
        t2 = ContingencyTable.from_columns({"a": 1 - a, "y": y, "z": z})
        e1 = total_effect(t1, "a", "y", ("z",))
        e2 = total_effect(t2, "a", "y", ("z",))
        assert e1.value == -e2.value

    def test_missing_arm_dropped_with_mass(self):
        a = np.array([0, 1, 0, 1, 0, 0], dtype=np.int8)
        y = np.array([0, 1, 1, 1, 0, 1], dtype=np.int8)
        z = np.array([0, 0, 0, 0, 1, 1], dtype=np.int8)  # z=1 stratum has no a=1
        t = ContingencyTable.from_columns({"a": a, "y": y, "z": z})
        est = total_effect(t, "a", "y", ("z",))
        assert abs(est.unsupported_mass - 2 / 6) < 1e-12

    def test_no_supported_stratum(self):
        t = ContingencyTable.from_columns(
            {"a": np.zeros(5, dtype=np.int8), "y": np.ones(5, dtype=np.int8)}
        )
        with pytest.raises(UnsupportedStratumError):
            total_effect(t, "a", "y", ())


class TestMediation:
    def test_chain_estimates_match_oracle(self):
        spec = presets.mediation_chain()
        data = sample_scm(spec, 50_000, seed=14)
        est = estimate_effect(data, "a1", "y", mediator="m1")
        assert abs(est.te + 0.5) < 0.02
        assert abs(est.nde + 0.3) < 0.02
        assert abs(est.nie + 0.2) < 0.02
        assert abs(est.cde_at_m[0] + 0.3) < 0.02
        assert abs(est.cde_at_m[1] + 0.3) < 0.02
        assert abs(est.te - (est.nde + est.nie)) < 1e-9

    def test_independent_mediator_no_indirect_path(self):
        rng = Rng(15)
        a = rng.bernoulli(0.5, 50_000)
        m = rng.bernoulli(0.5, 50_000)
        y = ((rng.uniform(size=50_000) < 0.2 + 0.4 * a)).astype(np.int8)
        d = dataset_from_columns(a=a, m=m, y=y)
        est = estimate_effect(d, "a", "y", mediator="m")
        assert abs(est.nie) < 0.02
        assert abs(est.nde - est.te) < 0.02

    def test_identity_holds_on_random_tables(self):
        for seed in range(30):
            rng = Rng(seed, 9)
            n = 40 + int(rng.integers(0, 200))
            cols = {
                "a": rng.bernoulli(0.5, n),
                "y": rng.bernoulli(0.3, n),
                "m": rng.bernoulli(0.6, n),
                "z": rng.bernoulli(0.5, n),
            }
            t = ContingencyTable.from_columns(cols)
            try:
                est = direct_indirect_effects(t, "a", "y", "m", ("z",))
            except UnsupportedStratumError:
                continue
            assert abs(est.te - (est.nde + est.nie)) < 1e-9


class TestRefutation:
    def test_stable_effect_high_p(self):
        data = sample_scm(presets.confounded(), 20_000, seed=16)
        res = refute_random_common_cause(data, "a1", "y", adjustment=("u",), repetitions=100, seed=17)
        assert abs(res.new - res.old) < 0.02
        assert res.p_value > 0.05

    def test_constant_outcome_boundary(self):
        rng = Rng(18)
        d = dataset_from_columns(a=rng.bernoulli(0.5, 1000), y=np.zeros(1000, dtype=np.int8))
        res = refute_random_common_cause(d, "a", "y", repetitions=40, seed=19)
        assert res.old == 0.0 and res.new == 0.0
        assert res.p_value == 1.0

    def test_minimum_repetitions(self):
        d = dataset_from_columns(a=np.array([0, 1], dtype=np.int8), y=np.array([0, 1], dtype=np.int8))
        with pytest.raises(InvalidArgumentError):
            refute_random_common_cause(d, "a", "y", repetitions=19)

    def test_null_p_values_not_anticonservative(self):
        low = 0
        for seed in range(50):
            rng = Rng(seed, 21)
            d = dataset_from_columns(a=rng.bernoulli(0.5, 2000), y=rng.bernoulli(0.5, 2000))
            res = refute_random_common_cause(d, "a", "y", repetitions=25, seed=seed)
            low += res.p_value < 0.05
        assert low / 50 <= 0.10


class TestTrend:
    def test_perfect_inverse(self):
        assert trend_analysis([(1, 3), (2, 2), (3, 1)]).rho == -1.0

    def test_perfect_direct(self):
        assert trend_analysis([(1, 1), (2, 2), (3, 3)]).rho == 1.0

    def test_absolute_values_used(self):
        res = trend_analysis([(0.055, -0.089), (0.2, -0.05), (0.393, -0.028)])
        assert res.rho == -1.0

    def test_too_few_pairs(self):
        with pytest.raises(InvalidArgumentError):
            trend_analysis([(1, 1), (2, 2)])
