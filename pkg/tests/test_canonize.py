"""BN fusion: the fold formula, the rewrite pass, the verifier."""

import numpy as np
import pytest

from canoneval import kernels
from canoneval.canonize import canonize_pass, fusable_bn_nodes, fuse_params, verify_equivalence
from canoneval.graph import ModelGraph, Node, validate_graph
from canoneval.tensor import BnParams, ConvParams, DenseParams, ShapeError, Tensor
from canoneval.toy import make_toy_localizer

EPS = 2.0**-20


def t32(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def bn(gamma, beta, mean, var, eps=EPS):
    return BnParams(
        gamma=t32(gamma), beta=t32(beta), running_mean=t32(mean), running_var=t32(var), epsilon=eps
    )


class TestFuseParams:
    def test_identity_bn_leaves_params(self):
        conv = ConvParams(weight=t32(np.ones((2, 1, 3, 3))), bias=t32([1.0, -1.0]))
        w, b = fuse_params(conv, bn([1, 1], [0, 0], [0, 0], [1 - EPS, 1 - EPS]))
        assert w.tobytes() == conv.weight.tobytes()
        assert b.tobytes() == conv.bias.tobytes()

    def test_hand_worked_example(self):
        # w=2, b=1, gamma=3, mean=4, var such that s=2, beta=5:
        # w_c = (3/2)*2 = 3 and b_c = (3/2)*(1-4) + 5 = 0.5
        conv = ConvParams(weight=t32([[[[2.0]]]]), bias=t32([1.0]))
        w, b = fuse_params(conv, bn([3.0], [5.0], [4.0], [4.0 - EPS]))
        assert w.array[0, 0, 0, 0] == pytest.approx(3.0, abs=1e-7)
        assert b.array[0] == pytest.approx(0.5, abs=1e-7)

    @pytest.mark.parametrize("seed", range(20))
    def test_fused_matches_two_layer_composition(self, seed):
        rng = np.random.default_rng(seed)
        co, ci = 4, 3
        conv = ConvParams(
            weight=t32(rng.normal(size=(co, ci, 3, 3))),
            bias=t32(rng.normal(size=co)),
            padding=(1, 1),
        )
        p = bn(
            rng.uniform(0.5, 2, co),
            rng.uniform(-1, 1, co),
            rng.uniform(-1, 1, co),
            rng.uniform(0.25, 4, co),
            eps=1e-5,
        )
        w, b = fuse_params(conv, p)
        fused = ConvParams(weight=w, bias=b, stride=conv.stride, padding=conv.padding)
        x = rng.uniform(-10, 10, size=(2, ci, 5, 5))
        want = kernels.bn_forward(kernels.conv2d_forward(x, conv), p)
        got = kernels.conv2d_forward(x, fused)
        np.testing.assert_allclose(
            got.astype(np.float32), want.astype(np.float32), atol=1e-5
        )

    def test_dense_fusion_composition(self):
        rng = np.random.default_rng(3)
        dense = DenseParams(weight=t32(rng.normal(size=(4, 6))), bias=t32(rng.normal(size=4)))
        p = bn(
            rng.uniform(0.5, 2, 4), rng.uniform(-1, 1, 4),
            rng.uniform(-1, 1, 4), rng.uniform(0.25, 4, 4), eps=1e-5,
        )
        w, b = fuse_params(dense, p)
        fused = DenseParams(weight=w, bias=b)
        x = rng.uniform(-10, 10, size=(3, 6))
        want = kernels.bn_forward(kernels.dense_forward(x, dense), p)
        got = kernels.dense_forward(x, fused)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_channel_mismatch(self):
        conv = ConvParams(weight=t32(np.ones((2, 1, 1, 1))), bias=t32([0.0, 0.0]))
        with pytest.raises(ShapeError):
            fuse_params(conv, bn([1.0], [0.0], [0.0], [1.0]))

    def test_shapes_conserved(self):
        g = make_toy_localizer(0, with_bn=True)
        canon, records = canonize_pass(g)
        for rec in records:
            orig = g.nodes[rec.linear_node_id].params
            assert rec.fused_weight.shape == orig.weight.shape
            assert rec.fused_bias.shape == orig.bias.shape


def conv_bn_relu_graph():
    conv = ConvParams(weight=t32(np.ones((2, 1, 3, 3))), bias=t32([0.5, -0.5]), padding=(1, 1))
    nodes = {
        "in": Node("in", "input"),
        "conv": Node("conv", "conv", ["in"], conv),
        "norm": Node("norm", "bn", ["conv"], bn([1.5, 0.5], [0.25, 0.5], [0.5, -0.25], [1 - EPS, 4 - EPS])),
        "act": Node("act", "relu", ["norm"]),
        "out": Node("out", "output", ["act"]),
    }
    g = ModelGraph(nodes, "out", (1, 6, 6), (-3, 3))
    validate_graph(g)
    return g


class TestCanonizePass:
    def test_bn_free_graph_unchanged(self):
        g = make_toy_localizer(0, with_bn=False)
        canon, records = canonize_pass(g)
        assert records == []
        assert set(canon.nodes) == set(g.nodes)
        for nid in g.nodes:
            assert canon.nodes[nid].params is g.nodes[nid].params

    def test_conv_bn_relu_becomes_conv_relu(self):
        g = conv_bn_relu_graph()
        canon, records = canonize_pass(g)
        assert len(records) == 1
        assert records[0].linear_node_id == "conv"
        assert records[0].bn_node_id == "norm"
        assert "norm" not in canon.nodes
        assert canon.nodes["act"].inputs == ["conv"]

    def test_toy_graph_fully_fused(self):
        g = make_toy_localizer(2, with_bn=True)
        n_before = len([n for n in g.nodes.values() if n.kind == "bn"])
        canon, records = canonize_pass(g)
        assert n_before == 3
        assert len(records) == n_before
        assert [n for n in canon.nodes.values() if n.kind == "bn"] == []

    def test_idempotent(self):
        g = make_toy_localizer(4, with_bn=True)
        once, _ = canonize_pass(g)
        twice, records = canonize_pass(once)
        assert records == []
        assert set(twice.nodes) == set(once.nodes)
        for nid in once.nodes:
            assert twice.nodes[nid].params is once.nodes[nid].params

    def test_locality_untouched_nodes_share_params(self):
        g = make_toy_localizer(4, with_bn=True)
        canon, _ = canonize_pass(g)
        assert canon.nodes["head"].params is g.nodes["head"].params
        for nid in ("relu1", "relu2", "relu3", "pool1", "gap", "flat", "add1"):
            assert canon.nodes[nid].kind == g.nodes[nid].kind

    def test_bn_on_add_is_left_in_place(self):
        conv = ConvParams(weight=t32(np.ones((2, 2, 1, 1))), bias=t32([0.0, 0.0]))
        nodes = {
            "in": Node("in", "input"),
            "c1": Node("c1", "conv", ["in"], conv),
            "sum": Node("sum", "add", ["in", "c1"]),
            "norm": Node("norm", "bn", ["sum"], bn([1, 1], [0, 0], [0, 0], [1, 1])),
            "out": Node("out", "output", ["norm"]),
        }
        g = ModelGraph(nodes, "out", (2, 3, 3))
        validate_graph(g)
        canon, records = canonize_pass(g)
        assert records == []
        assert "norm" in canon.nodes

    def test_bn_behind_shared_conv_is_left_in_place(self):
        conv = ConvParams(weight=t32(np.ones((2, 2, 1, 1))), bias=t32([0.0, 0.0]))
        nodes = {
            "in": Node("in", "input"),
            "c1": Node("c1", "conv", ["in"], conv),
            "norm": Node("norm", "bn", ["c1"], bn([1, 1], [0, 0], [0, 0], [1, 1])),
            "sum": Node("sum", "add", ["c1", "norm"]),  # conv has two consumers
            "out": Node("out", "output", ["sum"]),
        }
        g = ModelGraph(nodes, "out", (2, 3, 3))
        validate_graph(g)
        assert fusable_bn_nodes(g) == []
        canon, records = canonize_pass(g)
        assert records == []
        assert "norm" in canon.nodes

    def test_dense_bn_fusion(self):
        rng = np.random.default_rng(0)
        nodes = {
            "in": Node("in", "input"),
            "flat": Node("flat", "flatten", ["in"]),
            "fc": Node("fc", "dense", ["flat"], DenseParams(
                weight=t32(rng.normal(size=(3, 8))), bias=t32(rng.normal(size=3)))),
            "norm": Node("norm", "bn", ["fc"], bn(
                rng.uniform(0.5, 2, 3), rng.uniform(-1, 1, 3),
                rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), eps=1e-5)),
            "out": Node("out", "output", ["norm"]),
        }
        g = ModelGraph(nodes, "out", (2, 2, 2))
        validate_graph(g)
        canon, records = canonize_pass(g)
        assert len(records) == 1
        report = verify_equivalence(g, canon, n_trials=50, tolerance=1e-4, seed=1)
        assert report.passed


class TestVerifyEquivalence:
    def test_graph_vs_itself_is_exact(self):
        g = make_toy_localizer(0, with_bn=True)
        report = verify_equivalence(g, g, n_trials=10, seed=0)
        assert report.max_abs_diff == 0.0
        assert report.passed

    def test_toy_vs_canonized(self):
        g = make_toy_localizer(3, with_bn=True)
        canon, _ = canonize_pass(g)
        report = verify_equivalence(g, canon, n_trials=100, tolerance=1e-4, seed=5)
        assert report.passed
        assert report.max_abs_diff <= 1e-4

    def test_injected_fault_detected(self):
        g = make_toy_localizer(3, with_bn=True)
        canon, _ = canonize_pass(g)
        broken = canon.nodes["conv2"].params
        bumped = ConvParams(
            weight=broken.weight,
            bias=Tensor(broken.bias.array + np.float32(0.1)),
            stride=broken.stride,
            padding=broken.padding,
        )
        canon.nodes["conv2"] = Node("conv2", "conv", ["relu1"], bumped)
        report = verify_equivalence(g, canon, n_trials=50, tolerance=1e-4, seed=5)
        assert not report.passed

    def test_report_consistency(self):
        g = make_toy_localizer(1, with_bn=True)
        canon, _ = canonize_pass(g)
        report = verify_equivalence(g, canon, n_trials=25, tolerance=1e-4, seed=2)
        assert report.n_trials == 25
        assert report.passed == (report.max_abs_diff <= report.tolerance)

    def test_shape_mismatch(self):
        a = make_toy_localizer(0, with_bn=False)
        nodes = {"in": Node("in", "input"), "out": Node("out", "output", ["in"])}
        b = ModelGraph(nodes, "out", (1, 8, 8))
        with pytest.raises(ShapeError):
            verify_equivalence(a, b, n_trials=1)
