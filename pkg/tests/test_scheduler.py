import numpy as np
import pytest

from mpgraph.graph import FactorGraph
from mpgraph.models import HmgmModel, LgssmModel, RandomWalkModel
from mpgraph.scheduler import (
    RecognitionFactorization,
    SchedulingError,
    default_factorization,
    infer_types,
    render_schedule,
    render_schedules,
    schedule_free_energy,
    schedule_sum_product,
    schedule_vmp,
)


def four_factor_graph():
    g = FactorGraph()
    g.add_node("gaussian_mean_variance", {"out": "x1", "mean": 0.0, "variance": 1.0})
    g.add_node("gaussian_mean_variance", {"out": "x2", "mean": "x1", "variance": 1.0})
    g.add_node("addition", {"out": "x3", "in1": "x2", "in2": "x4"})
    g.add_node("gaussian_mean_variance", {"out": "x5", "mean": "x4", "variance": 1.0})
    g.clamp("x5", 1.7)
    return g


class TestSumProduct:
    def test_golden_four_message_schedule(self):
        s = schedule_sum_product(four_factor_graph(), ["x2"])
        assert len(s.entries) == 4
        assert s.check_topological()
        labels = [e.edge_label for e in s.entries]
        assert labels == [("x1", "fwd"), ("x2", "fwd"), ("x4", "fwd"), ("x2", "bwd")]
        # marginal is the product of messages 2 and 4 (1-indexed)
        step = s.marginal_steps[0]
        assert step.key == "x2"
        assert step.inputs == [("entry", 1), ("entry", 3)]

    def test_single_prior_single_message(self):
        g = FactorGraph()
        g.add_node("gaussian_mean_variance", {"out": "x", "mean": 0.0, "variance": 1.0})
        s = schedule_sum_product(g, ["x"])
        assert len(s.entries) == 1

    def test_three_gaussian_chain_middle_target(self):
        g = FactorGraph()
        g.add_node("gaussian_mean_variance", {"out": "a", "mean": 0.0, "variance": 1.0})
        g.add_node("gaussian_mean_variance", {"out": "b", "mean": "a", "variance": 1.0})
        g.add_node("gaussian_mean_variance", {"out": "c", "mean": "b", "variance": 1.0})
        g.clamp("c", 0.5)
        s = schedule_sum_product(g, ["b"])
        # forward (through a) and backward (from the clamp) collide on b
        assert len(s.entries) == 3
        directions = {e.edge_label for e in s.entries}
        assert ("b", "fwd") in directions and ("b", "bwd") in directions

    def test_memoized_across_targets(self):
        g = four_factor_graph()
        s = schedule_sum_product(g, ["x2", "x1", "x4"])
        labels = [e.edge_label for e in s.entries]
        assert len(labels) == len(set(labels)), "no message computed twice"
        assert len(s.entries) <= 2 * len([e for e in g.edges])

    def test_cycle_diagnostic(self):
        g = FactorGraph()
        g.add_variable("a")
        g.add_variable("b")
        g.add_node("gaussian_mean_variance", {"out": "a", "mean": "b", "variance": 1.0})
        g.add_node("gaussian_mean_variance", {"out": "b", "mean": "a", "variance": 1.0})
        with pytest.raises(SchedulingError, match="cycle"):
            schedule_sum_product(g, ["a"])

    def test_deterministic_listing(self):
        a = render_schedule(schedule_sum_product(four_factor_graph(), ["x2"]))
        b = render_schedule(schedule_sum_product(four_factor_graph(), ["x2"]))
        assert a == b
        assert "msg[0] <-" in a and "# edge x1 fwd" in a
        assert "q[x2] <- msg[1] * msg[3]" in a


class TestFactorization:
    def test_partition_checks(self):
        g, _ = RandomWalkModel().build(3)
        with pytest.raises(SchedulingError, match="more than one factor"):
            rf = RecognitionFactorization([("A", ["d"]), ("B", ["d"])])
            schedule_vmp(g, rf)
        with pytest.raises(SchedulingError, match="not cover"):
            rf = RecognitionFactorization([("D", ["d"])])
            schedule_vmp(g, rf)
        with pytest.raises(SchedulingError, match="not a latent"):
            rf = RecognitionFactorization([("Y", ["y[1]"])])
            rf.validate(g, None)

    def test_default_groups_chains_first(self):
        g, _ = RandomWalkModel().build(4)
        rf = default_factorization(g)
        ids = [fid for fid, _ in rf.factors]
        assert ids[0] == "X"
        assert set(v for _, vs in rf.factors for v in vs) >= {"d", "w", "u", "x[0]", "x[4]"}
        assert rf.factors[0][1] == [f"x[{t}]" for t in range(5)]


class TestVmpSchedules:
    def test_lgssm_forward_then_backward(self):
        g, rf = LgssmModel().build(6)
        scheds = schedule_vmp(g, rf)
        assert set(scheds) == {"X", "W", "U"}
        x = scheds["X"]
        assert x.check_topological()
        # marginal steps reference the colliding frontier messages: the
        # filtering pass runs ascending in t, the smoothing pass descending
        singles = {st.key: st.inputs for st in x.marginal_steps if "&" not in st.key}
        fwd_idx = [singles[f"x[{t}]"][0][1] for t in range(7)]
        bwd_idx = [singles[f"x[{t}]"][1][1] for t in range(7)]
        assert fwd_idx == sorted(fwd_idx)
        assert bwd_idx == sorted(bwd_idx, reverse=True)
        assert bwd_idx[0] > fwd_idx[-1], "smoothing completes after filtering"
        joints = [st for st in x.marginal_steps if "&" in getattr(st, "key", "")]
        assert len(joints) == 6

    def test_conjugate_single_factor_degenerates_to_sum_product(self):
        g = FactorGraph()
        g.add_node("gaussian_mean_variance", {"out": "a", "mean": 0.0, "variance": 1.0})
        g.add_node("gaussian_mean_precision", {"out": "b", "mean": "a", "precision": 4.0})
        g.clamp("b", 1.0)
        rf = RecognitionFactorization([("ALL", ["a"])])
        scheds = schedule_vmp(g, rf)
        flavors = {e.rule_id.split(":")[0] for s in scheds.values() for e in s.entries}
        assert flavors == {"sum-product"}

    def test_hybrid_hmgm_flavors(self):
        g, rf = HmgmModel().build(4)
        scheds = schedule_vmp(g, rf)
        x_flavors = {e.rule_id.split(":")[0] for e in scheds["X"].entries}
        assert "variational" in x_flavors  # boundary messages
        assert "sum-product" in x_flavors  # equality products within the chain
        t_sched = scheds["T"]
        assert any("transition:matrix" in e.rule_id for e in t_sched.entries)

    def test_probit_uses_ep_sites(self):
        from mpgraph.models import ProbitSsmModel

        g, rf = ProbitSsmModel().build(3)
        scheds = schedule_vmp(g, rf)
        x = scheds["X"]
        assert len(x.site_inits) == 3
        ep_entries = [e for e in x.entries if e.rule_id.startswith("expectation-propagation")]
        assert len(ep_entries) == 3
        assert all(e.writes_site for e in ep_entries)
        assert x.check_topological()

    def test_rerun_yields_identical_listing(self):
        g, rf = HmgmModel().build(5)
        a = render_schedules(schedule_vmp(g, rf))
        g2, rf2 = HmgmModel().build(5)
        b = render_schedules(schedule_vmp(g2, rf2))
        assert a == b

    def test_infer_types_annotates(self):
        g, rf = LgssmModel().build(3)
        scheds = schedule_vmp(g, rf)
        before = [e.out_variant for e in scheds["X"].entries]
        infer_types(g, scheds)
        after = [e.out_variant for e in scheds["X"].entries]
        assert before == after
        assert all(isinstance(v, str) and v for v in after)
        assert any(v == "GaussianCanonical" for v in after)  # equality fusions

    def test_gamma_boundary_annotated_gamma(self):
        g, rf = RandomWalkModel().build(3)
        scheds = schedule_vmp(g, rf)
        w_variants = [e.out_variant for e in scheds["W"].entries if e.edge_label[0] == "w"]
        assert "Gamma" in w_variants


class TestFreeEnergyProgram:
    def test_conjugate_two_node_model(self):
        g = FactorGraph()
        g.add_node("gaussian_mean_variance", {"out": "x", "mean": 0.0, "variance": 1.0})
        g.add_node("gaussian_mean_precision", {"out": "y", "mean": "x", "precision": 1.0})
        g.observe("y", "y", 1, ())
        rf = RecognitionFactorization([("X", ["x"])])
        fe = schedule_free_energy(g, rf)
        assert len(fe.energies) == 2
        assert fe.entropies == [("x", 1.0)]

    def test_hmgm_term_counts(self):
        T = 50
        g, rf = HmgmModel().build(T)
        fe = schedule_free_energy(g, rf)
        kinds = [t.kind for t in fe.energies]
        assert kinds.count("dirichlet") == 1
        assert kinds.count("gaussian_mean_variance") == 3
        assert kinds.count("wishart") == 3
        assert kinds.count("categorical") == 1
        assert kinds.count("transition") == T
        assert kinds.count("gaussian_mixture") == T
        joints = [k for k, w in fe.entropies if "&" in k and w == 1.0]
        interior = [k for k, w in fe.entropies if w == -1.0]
        singles = [k for k, w in fe.entropies if "&" not in k and w == 1.0]
        assert len(joints) == T
        assert len(interior) == T - 1
        assert sorted(singles) == sorted(["T", "m1", "m2", "m3", "W1", "W2", "W3"])

    def test_transition_energy_uses_joint(self):
        g, rf = HmgmModel().build(3)
        fe = schedule_free_energy(g, rf)
        trans = [t for t in fe.energies if t.kind == "transition"]
        assert all(t.slots[0][0] == "marginal" and "&" in t.slots[0][1] for t in trans)
