import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edagcn.agcn_model import (
    LayerParams,
    ModelConfig,
    ParameterSet,
    check_params,
    fam_forward,
    gam_forward,
    init_params,
    layer_forward,
    load_checkpoint,
    model_forward,
    nam_forward,
    output_forward,
    relu,
    save_checkpoint,
    softmax,
)
from edagcn.errors import ShapeError, ValidationError
from edagcn.graph_core import Graph, adjacency_powers

PATH3 = Graph(3, [(0, 1), (1, 2)])


def random_graph(rng, n, p):
    iu, ju = np.triu_indices(n, k=1)
    return Graph(n, np.stack([iu, ju], 1)[rng.random(iu.size) < p])


def randomize(params, rng, scale=1.0):
    return params.map(lambda t: t + scale * rng.standard_normal(t.shape))


def plain_gcn(a, x, weights, out_w, out_b):
    h = x
    for w in weights:
        h = np.maximum(a @ h @ w, 0.0)
    z = h @ out_w + out_b
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestConfig:
    def test_default_widths(self):
        assert ModelConfig(10, 4, 3).widths == (64, 8, 3)

    def test_rejects(self):
        with pytest.raises(ValidationError):
            ModelConfig(10, 4, 3, k_hop=0)
        with pytest.raises(ValidationError):
            ModelConfig(10, 4, 3, r_mode="diagonal")
        with pytest.raises(ValidationError):
            ModelConfig(10, 4, 3, widths=(4, 0))


class TestInit:
    def test_hop_coeffs(self):
        p = init_params(ModelConfig(5, 2, 2, i_count=2, k_hop=2, widths=(3,)))
        assert np.all(p.z_params[0].hop_coeffs == 0.5)

    def test_near_identity_mixing(self):
        p = init_params(ModelConfig(5, 2, 2, i_count=3, widths=(3,)))
        r = p.z_params[0].graph_mix
        assert np.all(np.abs(r - np.eye(3)) <= 0.01)

    def test_seeded(self):
        cfg = ModelConfig(6, 3, 2, i_count=2, widths=(4, 2), r_mode="per_node", w_mode="per_node")
        assert init_params(cfg, 4).equal(init_params(cfg, 4))
        assert not init_params(cfg, 4).equal(init_params(cfg, 5))

    def test_shapes(self):
        cfg = ModelConfig(6, 3, 2, i_count=2, widths=(4, 2), k_hop=3, r_mode="per_node", w_mode="per_node")
        p = init_params(cfg)
        check_params(p, cfg)
        assert p.z_params[1].graph_mix.shape == (2, 2, 6)
        assert p.z_params[1].feature_mix.shape == (4, 6, 2, 2)
        assert p.x_params[1].feature_mix.shape == (3, 6, 2, 2)
        assert p.out_weights.shape == (4, 2)


class TestBlocks:
    def test_nam_path_sum(self):
        z = np.eye(3)[:, None, :]
        h = nam_forward(z, adjacency_powers([PATH3], 1), np.ones((1, 1)))
        assert np.array_equal(h[1, 0], z[0, 0] + z[2, 0])

    def test_nam_edgeless_and_zero_coeffs(self):
        z = np.random.default_rng(0).standard_normal((4, 2, 3))
        assert not nam_forward(z, adjacency_powers([Graph(4)] * 2, 2), np.ones((2, 2))).any()
        g = Graph(4, [(0, 1), (1, 2)])
        assert not nam_forward(z, adjacency_powers([g, g], 2), np.zeros((2, 2))).any()

    def test_nam_two_hops(self):
        z = np.eye(3)[:, None, :]
        c = np.array([[2.0], [0.5]])
        h = nam_forward(z, adjacency_powers([PATH3], 2), c)
        a = PATH3.adjacency().toarray()
        assert np.allclose(h[:, 0, :], 2 * a + 0.5 * a @ a)

    def test_gam_identity_swap_average(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((4, 2, 3))
        assert np.array_equal(gam_forward(h, np.eye(2)), h)
        swapped = gam_forward(h, np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.array_equal(swapped[:, 0], h[:, 1]) and np.array_equal(swapped[:, 1], h[:, 0])
        avg = gam_forward(h, np.full((2, 2), 0.5))
        assert np.allclose(avg[:, 0], (h[:, 0] + h[:, 1]) / 2) and np.allclose(avg[:, 1], avg[:, 0])

    def test_gam_per_node(self):
        rng = np.random.default_rng(2)
        h = rng.standard_normal((4, 2, 3))
        r = rng.standard_normal((2, 2, 4))
        out = gam_forward(h, r)
        for n in range(4):
            assert np.allclose(out[n], r[:, :, n] @ h[n])

    def test_fam_cases(self):
        rng = np.random.default_rng(3)
        g = rng.standard_normal((4, 2, 3))
        ident = np.repeat(np.eye(3)[:, None, :], 2, axis=1)
        assert np.allclose(fam_forward(g, ident), g)
        assert not fam_forward(g, np.zeros((3, 2, 5))).any()
        w = np.array([1.0, -1.0]).reshape(2, 1, 1)
        assert fam_forward(np.array([[[3.0, 2.0]]]), w)[0, 0, 0] == 1.0

    def test_fam_per_node(self):
        rng = np.random.default_rng(4)
        g = rng.standard_normal((4, 2, 3))
        w = rng.standard_normal((3, 4, 2, 5))
        out = fam_forward(g, w)
        for n in range(4):
            for i in range(2):
                assert np.allclose(out[n, i], g[n, i] @ w[:, n, i, :])

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            gam_forward(np.zeros((3, 2, 1)), np.eye(3))
        with pytest.raises(ShapeError):
            fam_forward(np.zeros((3, 2, 4)), np.zeros((3, 2, 1)))
        with pytest.raises(ShapeError):
            nam_forward(np.zeros((3, 2, 1)), adjacency_powers([PATH3], 1), np.ones((1, 1)))

    def test_relu(self):
        assert relu(np.array([-2.5, 1.5])).tolist() == [0.0, 1.5]


class TestOutput:
    def test_softmax_cases(self):
        y = softmax(np.array([[0.0, 0.0], [1000.0, 0.0], [np.log(1.0), np.log(3.0)]]))
        assert np.allclose(y[0], [0.5, 0.5])
        assert np.allclose(y[1], [1.0, 0.0]) and np.isfinite(y).all()
        assert np.allclose(y[2], [0.25, 0.75], atol=1e-15)

    def test_flatten_and_average_heads(self):
        z = np.arange(12, dtype=float).reshape(2, 3, 2)
        w = np.ones((6, 2))
        _, logits = output_forward(z, w, np.zeros(2))
        assert np.array_equal(logits[:, 0], z.reshape(2, -1).sum(axis=1))
        _, logits = output_forward(z, np.ones((2, 2)), np.zeros(2), head="average")
        assert np.allclose(logits[:, 0], z.mean(axis=1).sum(axis=1))


class TestLayer:
    def test_zero_z_params_no_residual(self):
        cfg = ModelConfig(3, 2, 2, widths=(2,), residual=False)
        p = init_params(cfg).map(np.zeros_like)
        x = np.ones((3, 2))
        out, cache = layer_forward(x[:, None, :], x, 0, p, adjacency_powers([PATH3], 1), cfg)
        assert not out.any()

    def test_residual_pass_through(self):
        # theta_z = 0; the x branch uses c = 1, R = I, W = I, so the layer returns A X
        cfg = ModelConfig(3, 2, 2, widths=(2,), residual=True)
        p = init_params(cfg).map(np.zeros_like)
        p.x_params[0].hop_coeffs[...] = 1.0
        p.x_params[0].graph_mix[...] = 1.0
        p.x_params[0].feature_mix[:, 0, :] = np.eye(2)
        x = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
        out, _ = layer_forward(x[:, None, :], x, 0, p, adjacency_powers([PATH3], 1), cfg)
        assert np.array_equal(out[:, 0, :], PATH3.adjacency().toarray() @ x)

    def test_relu_after_sum(self):
        cfg = ModelConfig(3, 1, 2, widths=(1,), residual=True)
        p = init_params(cfg).map(np.zeros_like)
        for branch, sign in ((p.z_params[0], 1.0), (p.x_params[0], -1.0)):
            branch.hop_coeffs[...] = 1.0
            branch.graph_mix[...] = 1.0
            branch.feature_mix[...] = sign
        x = np.ones((3, 1))
        out, cache = layer_forward(np.full((3, 1, 1), 2.0), x, 0, p, adjacency_powers([PATH3], 1), cfg)
        # z branch gives 2*deg, x branch -deg; ReLU acts on the sum only
        assert np.array_equal(cache.pre_nonlin[:, 0, 0], [1.0, 2.0, 1.0])
        assert np.array_equal(out, cache.pre_nonlin)


class TestModel:
    def test_constant_output_when_zero(self):
        cfg = ModelConfig(4, 2, 3, widths=(3,), residual=False)
        p = init_params(cfg).map(np.zeros_like)
        p.out_bias[...] = [0.1, -0.2, 0.5]
        y = model_forward(np.ones((4, 2)), adjacency_powers([Graph(4, [(0, 1)])], 1), p, cfg).output
        assert np.allclose(y, softmax(p.out_bias[None, :]))

    def test_repeatable(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, 9, 0.3)
        cfg = ModelConfig(9, 3, 2, i_count=2, widths=(4, 2), k_hop=2, r_mode="per_node")
        p = init_params(cfg, 1)
        x = rng.standard_normal((9, 3))
        powers = adjacency_powers([g, g], 2)
        a, b = model_forward(x, powers, p, cfg), model_forward(x, powers, p, cfg)
        assert np.array_equal(a.output, b.output) and np.array_equal(a.logits, b.logits)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 50), st.integers(0, 2**31 - 1))
    def test_gcn_reduction(self, n, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, n, 0.2)
        cfg = ModelConfig(n, 5, 3, i_count=1, widths=(6, 4), k_hop=1, residual=False)
        p = randomize(init_params(cfg, seed), rng, 0.3)
        for layer in p.z_params:
            layer.hop_coeffs[...] = 1.0
            layer.graph_mix[...] = 1.0
        x = rng.standard_normal((n, 5))
        y = model_forward(x, adjacency_powers([g], 1), p, cfg).output
        ref = plain_gcn(g.adjacency().toarray(), x, [l.feature_mix[:, 0, :] for l in p.z_params], p.out_weights, p.out_bias)
        assert np.abs(y - ref).max() <= 1e-12

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(0, 2**31 - 1),
        st.sampled_from(["shared", "per_node"]),
        st.sampled_from(["shared", "per_node"]),
        st.booleans(),
        st.sampled_from(["flatten", "average"]),
    )
    def test_rows_are_distributions(self, seed, r_mode, w_mode, residual, head):
        rng = np.random.default_rng(seed)
        n, i_count = 8, 3
        graphs = [random_graph(rng, n, 0.4) for _ in range(i_count)]
        cfg = ModelConfig(n, 3, 4, i_count, (5, 3), 2, r_mode, w_mode, residual, head)
        p = randomize(init_params(cfg, seed), rng)
        y = model_forward(rng.standard_normal((n, 3)) * 3, adjacency_powers(graphs, 2), p, cfg).output
        assert np.all(y >= 0) and np.abs(y.sum(axis=1) - 1).max() <= 1e-6

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["shared", "per_node"]), st.sampled_from(["shared", "per_node"]))
    def test_node_permutation_equivariance(self, seed, r_mode, w_mode):
        rng = np.random.default_rng(seed)
        n, i_count = 7, 2
        graphs = [random_graph(rng, n, 0.4) for _ in range(i_count)]
        cfg = ModelConfig(n, 3, 2, i_count, (4, 2), 2, r_mode, w_mode, True)
        p = randomize(init_params(cfg, seed), rng, 0.5)
        x = rng.standard_normal((n, 3))
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        # node perm[j] of the old graph becomes node j of the new one
        pgraphs = [Graph(n, inv[g.edges]) for g in graphs]

        def permute(t, name):
            if name.endswith("graph_mix") and t.ndim == 3:
                return t[:, :, perm]
            if name.endswith("feature_mix") and t.ndim == 4:
                return t[:, perm]
            return t

        pp = ParameterSet.from_tensors({k: permute(v, k) for k, v in p.tensors().items()}, cfg.n_layers, True)
        y = model_forward(x, adjacency_powers(graphs, 2), p, cfg).output
        yp = model_forward(x[perm], adjacency_powers(pgraphs, 2), pp, cfg).output
        assert np.allclose(yp, y[perm], rtol=0, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["shared", "per_node"]), st.sampled_from(["shared", "per_node"]))
    def test_slice_permutation_invariance(self, seed, r_mode, w_mode):
        rng = np.random.default_rng(seed)
        n, i_count, last = 6, 3, 2
        graphs = [random_graph(rng, n, 0.4) for _ in range(i_count)]
        cfg = ModelConfig(n, 3, 2, i_count, (4, last), 1, r_mode, w_mode, True)
        p = randomize(init_params(cfg, seed), rng, 0.5)
        x = rng.standard_normal((n, 3))
        s = rng.permutation(i_count)

        def permute(t, name):
            if name.endswith("hop_coeffs"):
                return t[:, s]
            if name.endswith("graph_mix"):
                return t[s][:, s]
            if name.endswith("feature_mix"):
                return t[:, :, s] if t.ndim == 4 else t[:, s]
            if name == "out.weights":
                # flatten head rows are ordered (slice, feature)
                return t.reshape(i_count, last, -1)[s].reshape(t.shape)
            return t

        pp = ParameterSet.from_tensors({k: permute(v, k) for k, v in p.tensors().items()}, cfg.n_layers, True)
        y = model_forward(x, adjacency_powers(graphs, 1), p, cfg).output
        yp = model_forward(x, adjacency_powers([graphs[j] for j in s], 1), pp, cfg).output
        assert np.allclose(yp, y, rtol=0, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(1, 2))
    def test_locality(self, seed, n_layers, k_hop):
        rng = np.random.default_rng(seed)
        n = 14
        # one path plus a sparse random graph per slice keeps distances large
        base = [(j, j + 1) for j in range(n - 1)]
        graphs = [Graph(n, base), Graph(n, base[: n // 2] + base[n // 2 + 1 :])]
        cfg = ModelConfig(n, 2, 2, 2, (3,) * n_layers, k_hop, "per_node", "per_node", residual=False)
        p = randomize(init_params(cfg, seed), rng, 0.5)
        x = np.abs(rng.standard_normal((n, 2)))
        target, reach = 0, n_layers * k_hop
        far = np.arange(reach + 1, n)
        x2 = x.copy()
        x2[far] += 10 * rng.standard_normal((far.size, 2))
        powers = adjacency_powers(graphs, k_hop)
        y = model_forward(x, powers, p, cfg).output
        y2 = model_forward(x2, powers, p, cfg).output
        assert np.array_equal(y[target], y2[target])

    def test_input_validation(self):
        cfg = ModelConfig(3, 2, 2, i_count=2, widths=(2,))
        p = init_params(cfg)
        with pytest.raises(ShapeError):
            model_forward(np.ones((3, 2)), adjacency_powers([PATH3], 1), p, cfg)
        with pytest.raises(ShapeError):
            model_forward(np.ones((3, 5)), adjacency_powers([PATH3, PATH3], 1), p, cfg)
        with pytest.raises(ShapeError):
            model_forward(np.ones((3, 2)), adjacency_powers([PATH3, PATH3], 2), p, cfg)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(5, 2, 3, i_count=2, widths=(3, 2), k_hop=2, r_mode="per_node")
        p = randomize(init_params(cfg, 0), np.random.default_rng(0))
        save_checkpoint(p, cfg, tmp_path / "c.json")
        back, back_cfg = load_checkpoint(tmp_path / "c.json", cfg)
        assert back_cfg == cfg and back.equal(p)

    def test_config_mismatch(self, tmp_path):
        cfg = ModelConfig(5, 2, 3, widths=(3,))
        save_checkpoint(init_params(cfg), cfg, tmp_path / "c.json")
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "c.json", ModelConfig(5, 2, 3, widths=(4,)))

    def test_tampered_shape(self, tmp_path):
        import json

        cfg = ModelConfig(5, 2, 3, widths=(3,))
        save_checkpoint(init_params(cfg), cfg, tmp_path / "c.json")
        doc = json.loads((tmp_path / "c.json").read_text())
        doc["tensors"]["out.bias"]["shape"] = [4]
        doc["tensors"]["out.bias"]["data"].append(0.0)
        (tmp_path / "c.json").write_text(json.dumps(doc))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "c.json")
