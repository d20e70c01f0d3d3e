"""Relevance rules: hand-worked values, conservation, composite assignment."""

import numpy as np
import pytest

from canoneval import lrp
from canoneval.graph import ModelGraph, Node, run_graph, validate_graph
from canoneval.lrp import Rule, assign_rules, first_conv_id, lrp_linear_rule, lrp_relevance
from canoneval.tensor import ConvParams, DenseParams, PoolParams, Tensor
from canoneval.toy import make_toy_localizer


def t32(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def bias_free_net(seed):
    """conv/relu/maxpool/conv/relu/avgpool/flatten/dense with zero biases."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.normal(0, 0.5, shape).astype(np.float32))

    zeros = lambda n: Tensor(np.zeros(n, dtype=np.float32))
    nodes = {
        "in": Node("in", "input"),
        "c1": Node("c1", "conv", ["in"], ConvParams(t(4, 2, 3, 3), zeros(4), padding=(1, 1))),
        "r1": Node("r1", "relu", ["c1"]),
        "p1": Node("p1", "maxpool", ["r1"], PoolParams((2, 2))),
        "c2": Node("c2", "conv", ["p1"], ConvParams(t(4, 4, 3, 3), zeros(4), padding=(1, 1))),
        "r2": Node("r2", "relu", ["c2"]),
        "g1": Node("g1", "avgpool", ["r2"], PoolParams((4, 4))),
        "f1": Node("f1", "flatten", ["g1"]),
        "d1": Node("d1", "dense", ["f1"], DenseParams(t(3, 4), zeros(3))),
        "out": Node("out", "output", ["d1"]),
    }
    g = ModelGraph(nodes, "out", (2, 8, 8), (-1, 1))
    validate_graph(g)
    return g


def usable_target(g, x):
    """Most positive logit, or None if the net is degenerate at x."""
    logits = run_graph(g, x[None])["out"][0]
    target = int(logits.argmax())
    return target if logits[target] > 0.1 else None


class TestRuleValidation:
    def test_zero_epsilon_rejected(self):
        with pytest.raises(ValueError):
            Rule("epsilon", epsilon=0.0)

    def test_alpha_beta_must_differ_by_one(self):
        with pytest.raises(ValueError):
            Rule("alpha_beta", alpha=2.0, beta=0.5)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Rule("gamma")


class TestLinearRules:
    def test_epsilon_two_input_unit(self):
        # a=(1,1), w=(2,-1), b=0: f(x)=1, seeding R_out=1 gives R=(2,-1)
        params = DenseParams(weight=t32([[2.0, -1.0]]), bias=t32([0.0]))
        r_in = lrp_linear_rule([1.0, 1.0], params, [1.0], Rule("epsilon", epsilon=1e-9))
        np.testing.assert_allclose(r_in, [2.0, -1.0], atol=1e-6)

    def test_epsilon_conserves_without_bias(self):
        rng = np.random.default_rng(0)
        params = DenseParams(weight=t32(rng.normal(size=(3, 6))), bias=t32(np.zeros(3)))
        a = rng.uniform(0.5, 1.5, 6)
        r_out = rng.uniform(0.5, 1.5, 3)
        r_in = lrp_linear_rule(a, params, r_out, Rule("epsilon"))
        assert abs(r_in.sum() - r_out.sum()) <= 1e-4 * abs(r_out.sum())

    def test_flat_dense_uniform_split(self):
        params = DenseParams(weight=t32(np.random.default_rng(0).normal(size=(1, 4))), bias=t32([3.0]))
        r_in = lrp_linear_rule([9.0, -2.0, 0.5, 1.0], params, [1.0], Rule("flat"))
        np.testing.assert_allclose(r_in, [0.25, 0.25, 0.25, 0.25], atol=1e-6)

    def test_flat_conv_uniform_over_receptive_field(self):
        params = ConvParams(weight=t32(np.random.default_rng(1).normal(size=(1, 1, 2, 2))), bias=t32([0.0]))
        a = np.random.default_rng(2).normal(size=(1, 2, 2))
        r_in = lrp_linear_rule(a, params, np.ones((1, 1, 1)), Rule("flat"))
        np.testing.assert_allclose(r_in[0], 0.25, atol=1e-6)

    def test_alpha2beta1_positive_only_matches_scalar_formula(self):
        rng = np.random.default_rng(4)
        w = rng.uniform(0.1, 1.0, size=(2, 3)).astype(np.float32)
        b = rng.uniform(0.1, 0.5, size=2).astype(np.float32)
        a = rng.uniform(0.1, 1.0, 3)
        r_out = rng.uniform(0.5, 1.5, 2)
        params = DenseParams(weight=Tensor(w), bias=Tensor(b))
        rule = Rule("alpha_beta", alpha=2.0, beta=1.0, epsilon=1e-9)
        got = lrp_linear_rule(a, params, r_out, rule)
        # all contributions positive: the beta branch has no mass, so
        # R_j = sum_k alpha * a_j w_jk / (z_k + b_k + eps) * R_k
        want = np.zeros(3)
        for j in range(3):
            for k in range(2):
                z_k = float(a @ w[k].astype(np.float64))
                want[j] += 2.0 * a[j] * w[k, j] / (z_k + b[k] + 1e-9) * r_out[k]
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_alpha1beta0_nonnegative_on_positive_net(self):
        rng = np.random.default_rng(5)
        params = DenseParams(weight=t32(rng.uniform(0.1, 1, size=(2, 4))), bias=t32(np.zeros(2)))
        r_in = lrp_linear_rule(
            rng.uniform(0, 1, 4), params, rng.uniform(0, 1, 2),
            Rule("alpha_beta", alpha=1.0, beta=0.0, include_bias=False),
        )
        assert np.all(r_in >= 0)

    def test_rejects_non_linear_params(self):
        with pytest.raises(TypeError):
            lrp_linear_rule([1.0], PoolParams((2, 2)), [1.0], Rule("epsilon"))


class TestAssignment:
    def test_epsilon_only_assigns_epsilon_everywhere(self):
        g = make_toy_localizer(0, with_bn=False)
        assignment = assign_rules(g, "epsilon_only")
        rule_nodes = [n.id for n in g.nodes.values() if n.kind in ("conv", "dense", "avgpool")]
        assert len(rule_nodes) == 5
        for nid in rule_nodes:
            assert isinstance(assignment[nid], Rule)
            assert assignment[nid].kind == "epsilon"

    def test_composite_assigns_alpha_beta_on_convs(self):
        g = make_toy_localizer(0, with_bn=False)
        assignment = assign_rules(g, "eps_alpha2beta1")
        for nid in ("conv1", "conv2", "conv3"):
            assert assignment[nid].kind == "alpha_beta"
            assert assignment[nid].alpha == 2.0
        assert assignment["head"].kind == "epsilon"

    def test_flat_composite_marks_only_first_conv(self):
        g = make_toy_localizer(0, with_bn=False)
        assignment = assign_rules(g, "eps_alpha2beta1_flat")
        flats = [nid for nid, r in assignment.items() if isinstance(r, Rule) and r.kind == "flat"]
        assert flats == ["conv1"]
        assert first_conv_id(g) == "conv1"

    def test_structural_markers(self):
        g = make_toy_localizer(0, with_bn=True)
        assignment = assign_rules(g, "epsilon_only", bn_rule="affine_epsilon")
        assert assignment["add1"] == "proportional_split"
        assert assignment["pool1"] == "winner_take_all"
        assert assignment["bn1"] == "bn_affine_epsilon"
        assert assignment["relu1"] == "pass"
        passthrough = assign_rules(g, "epsilon_only", bn_rule="identity_passthrough")
        assert passthrough["bn1"] == "bn_identity"
        ebp = assign_rules(g, "epsilon_only", family="ebp")
        assert ebp["bn1"] == "bn_positive_scale"
        assert ebp["conv1"].beta == 0.0 and not ebp["conv1"].include_bias

    def test_unknown_names_rejected(self):
        g = make_toy_localizer(0, with_bn=False)
        with pytest.raises(ValueError):
            assign_rules(g, "everything_flat")
        with pytest.raises(ValueError):
            assign_rules(g, "epsilon_only", bn_rule="drop")


class TestEngine:
    def test_add_split_proportional(self):
        # branches contribute 3 and 1 into the sum; R_out=4 splits to (3, 1)
        nodes = {
            "in": Node("in", "input"),
            "ca": Node("ca", "conv", ["in"], ConvParams(weight=t32([[[[3.0]]]]), bias=t32([0.0]))),
            "cb": Node("cb", "conv", ["in"], ConvParams(weight=t32([[[[1.0]]]]), bias=t32([0.0]))),
            "sum": Node("sum", "add", ["ca", "cb"]),
            "flat": Node("flat", "flatten", ["sum"]),
            "out": Node("out", "output", ["flat"]),
        }
        g = ModelGraph(nodes, "out", (1, 1, 1))
        validate_graph(g)
        assignment = assign_rules(g, "epsilon_only")
        _, trace = lrp_relevance(g, np.ones((1, 1, 1)), 0, assignment)
        assert trace["out"] == pytest.approx(4.0)
        assert trace["ca"] == pytest.approx(3.0, rel=1e-5)
        assert trace["cb"] == pytest.approx(1.0, rel=1e-5)

    @pytest.mark.parametrize("family", ["lrp", "ebp"])
    def test_conservation_on_bias_free_nets(self, family):
        checked = 0
        seed = 0
        layer_chain = ("out", "d1", "f1", "g1", "r2", "c2", "p1", "r1", "c1", "in")
        while checked < 20:
            g = bias_free_net(seed)
            x = np.random.default_rng(1000 + seed).uniform(-1, 1, (2, 8, 8))
            seed += 1
            target = usable_target(g, x)
            if target is None:
                continue
            checked += 1
            assignment = assign_rules(g, "epsilon_only", family=family)
            _, trace = lrp_relevance(g, x, target, assignment)
            total = trace["out"]
            for nid in layer_chain:
                assert abs(trace[nid] - total) <= 1e-4 * abs(total), (seed - 1, nid)

    def test_winner_take_all_routing(self):
        nodes = {
            "in": Node("in", "input"),
            "pool": Node("pool", "maxpool", ["in"], PoolParams((2, 2))),
            "flat": Node("flat", "flatten", ["pool"]),
            "out": Node("out", "output", ["flat"]),
        }
        g = ModelGraph(nodes, "out", (1, 2, 2))
        validate_graph(g)
        x = np.array([[[0.5, 2.0], [1.0, 0.25]]])
        rel, trace = lrp_relevance(g, x, 0, assign_rules(g, "epsilon_only"))
        np.testing.assert_allclose(rel, [[[0.0, 2.0], [0.0, 0.0]]])

    def test_relevance_seed_is_logit_value(self):
        g = make_toy_localizer(0, with_bn=False)
        x = np.zeros(g.input_shape)
        x[0, 4:12, 4:12] = 1.0
        assignment = assign_rules(g, "epsilon_only")
        _, trace = lrp_relevance(g, x, 1, assignment)
        logit = run_graph(g, x[None])["out"][0, 1]
        assert trace["out"] == pytest.approx(float(logit))

    def test_bad_target_raises(self):
        g = make_toy_localizer(0, with_bn=False)
        assignment = assign_rules(g, "epsilon_only")
        with pytest.raises(IndexError):
            lrp_relevance(g, np.zeros(g.input_shape), 7, assignment)

    def test_canonized_graph_ignores_bn_rule(self):
        from canoneval.canonize import canonize_pass

        g = make_toy_localizer(6, with_bn=True)
        canon, _ = canonize_pass(g)
        x = np.random.default_rng(8).uniform(-1, 1, g.input_shape)
        maps = []
        for bn_rule in ("affine_epsilon", "identity_passthrough"):
            assignment = assign_rules(canon, "epsilon_only", bn_rule=bn_rule)
            rel, _ = lrp_relevance(canon, x, 0, assignment)
            maps.append(rel)
        np.testing.assert_array_equal(maps[0], maps[1])
