from __future__ import annotations

import io

import numpy as np
import pytest

from steik import fieldnet
from steik.fieldnet import LayerParams, NetworkConfig, NetworkParams

import oracles


def single_neuron_net(W1, b1, W2, b2, W3, b3, activation="identity"):
    """A 1->1 test layer followed by an exact linear pass-through."""
    layer = LayerParams(W1=np.array(W1, float), b1=np.array(b1, float),
                        W2=np.array(W2, float), b2=np.array(b2, float),
                        W3=np.array(W3, float), b3=np.array(b3, float),
                        kind="quadratic", activation=activation)
    tail = LayerParams(W1=np.zeros((1, 1)), b1=np.ones(1),
                       W2=np.eye(1), b2=np.zeros(1),
                       W3=np.zeros((1, 1)), b3=np.zeros(1),
                       kind="linear", activation="identity")
    config = NetworkConfig(input_dim=1, hidden_layers=1, hidden_width=1)
    return NetworkParams([layer, tail], config)


def random_net(seed, input_dim=3, hidden_layers=3, width=8, kind="quadratic",
               scheme="siren_uniform"):
    config = NetworkConfig(input_dim=input_dim, hidden_layers=hidden_layers,
                           hidden_width=width, layer_kind=kind, init_scheme=scheme)
    return fieldnet.init(config, seed)


class TestForward:
    def test_degenerate_linear_value(self):
        net = single_neuron_net([[0.0]], [1.0], [[3.0]], [1.0], [[0.0]], [0.0])
        assert fieldnet.forward(net, [2.0]) == pytest.approx(7.0, abs=0)

    def test_pure_square(self):
        net = single_neuron_net([[1.0]], [0.0], [[1.0]], [0.0], [[0.0]], [0.0])
        assert fieldnet.forward(net, [3.0]) == pytest.approx(9.0, abs=0)

    def test_composed_quartic_point(self):
        net = oracles.quartic_net([0.0, 0.0, 0.0, 0.0, 1.0])
        assert fieldnet.forward(net, [1.5]) == pytest.approx(5.0625, abs=1e-12)

    def test_dimension_mismatch(self):
        net = random_net(0)
        with pytest.raises(ValueError):
            fieldnet.forward(net, [1.0, 2.0])


class TestQuarticExpressivity:
    def test_random_quartic_100_points(self):
        rng = np.random.default_rng(7)
        c = rng.uniform(-2.0, 2.0, 5)
        c[3] = rng.uniform(0.5, 1.5) * np.sign(rng.standard_normal())
        net = oracles.quartic_net(c)
        x = rng.uniform(-2.0, 2.0, 100)
        got = fieldnet.forward_batch(net, x[:, None])
        want = np.polyval(c[::-1], x)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-12)
        assert rel.max() < 1e-10


class TestForwardJet:
    def test_plane_field(self):
        # u(x) = x_0 via a linear identity chain
        l1 = LayerParams(W1=np.zeros((2, 3)), b1=np.ones(2),
                         W2=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                         b2=np.zeros(2), W3=np.zeros((2, 3)), b3=np.zeros(2),
                         kind="linear", activation="identity")
        l2 = LayerParams(W1=np.zeros((1, 2)), b1=np.ones(1),
                         W2=np.array([[1.0, 0.0]]), b2=np.zeros(1),
                         W3=np.zeros((1, 2)), b3=np.zeros(1),
                         kind="linear", activation="identity")
        config = NetworkConfig(input_dim=3, hidden_layers=1, hidden_width=2,
                               layer_kind="linear")
        net = NetworkParams([l1, l2], config)
        jet = fieldnet.forward_jet(net, [0.3, -0.4, 2.0])
        assert jet.value == pytest.approx(0.3, abs=0)
        np.testing.assert_array_equal(jet.grad, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(jet.hess, np.zeros((3, 3)))

    def test_quadratic_bowl(self):
        # u(x) = x1^2 + x2^2 in one quadratic layer plus linear tail
        l1 = LayerParams(W1=np.eye(2), b1=np.zeros(2), W2=np.eye(2), b2=np.zeros(2),
                         W3=np.zeros((2, 2)), b3=np.zeros(2),
                         kind="quadratic", activation="identity")
        l2 = LayerParams(W1=np.zeros((1, 2)), b1=np.ones(1),
                         W2=np.array([[1.0, 1.0]]), b2=np.zeros(1),
                         W3=np.zeros((1, 2)), b3=np.zeros(1),
                         kind="linear", activation="identity")
        config = NetworkConfig(input_dim=2, hidden_layers=1, hidden_width=2)
        net = NetworkParams([l1, l2], config)
        jet = fieldnet.forward_jet(net, [1.0, 2.0])
        assert jet.value == pytest.approx(5.0, abs=0)
        np.testing.assert_allclose(jet.grad, [2.0, 4.0], atol=0)
        np.testing.assert_allclose(jet.hess, 2.0 * np.eye(2), atol=0)

    @pytest.mark.parametrize("kind", ["quadratic", "linear"])
    @pytest.mark.parametrize("dim", [2, 3])
    def test_matches_finite_differences(self, kind, dim):
        net = random_net(11, input_dim=dim, kind=kind)
        rng = np.random.default_rng(5)
        X = rng.uniform(-0.8, 0.8, (20, dim))
        jets = fieldnet.forward_jet_batch(net, X, order=2)
        fd_grad, fd_hess = oracles.fd_jet_batch(
            lambda P: fieldnet.forward_batch(net, P), X, eps=1e-4)
        scale = max(np.abs(fd_grad).max(), np.abs(fd_hess).max(), 1e-8)
        hess = fieldnet.sym_to_full(jets.hess_sym, dim)
        assert np.abs(jets.grad - fd_grad).max() / scale < 1e-5
        assert np.abs(hess - fd_hess).max() / scale < 1e-5

    def test_jet_consistency_many(self):
        # value == forward and FD agreement across a spread of nets/points
        rng = np.random.default_rng(23)
        for seed in range(5):
            net = random_net(seed, input_dim=3, hidden_layers=2, width=6)
            X = rng.uniform(-1.0, 1.0, (200, 3))
            jets = fieldnet.forward_jet_batch(net, X, order=2)
            np.testing.assert_array_equal(jets.value, fieldnet.forward_batch(net, X))
            fd_grad, _ = oracles.fd_jet_batch(
                lambda P: fieldnet.forward_batch(net, P), X, eps=1e-4)
            scale = max(np.abs(fd_grad).max(), 1e-8)
            assert np.abs(jets.grad - fd_grad).max() / scale < 1e-5

    def test_hessian_exactly_symmetric(self):
        net = random_net(3)
        jet = fieldnet.forward_jet(net, [0.2, -0.1, 0.4])
        assert np.abs(jet.hess - jet.hess.T).max() == 0.0

    def test_quadratic_degenerates_to_linear_bitwise(self):
        lin = random_net(9, kind="linear")
        quad_layers = []
        for layer in lin.layers:
            quad_layers.append(LayerParams(
                W1=np.zeros_like(layer.W1), b1=np.ones_like(layer.b1),
                W2=layer.W2.copy(), b2=layer.b2.copy(),
                W3=np.zeros_like(layer.W3), b3=np.zeros_like(layer.b3),
                kind="quadratic", activation=layer.activation, omega0=layer.omega0))
        config = NetworkConfig(input_dim=3, hidden_layers=lin.config.hidden_layers,
                               hidden_width=lin.config.hidden_width,
                               layer_kind="quadratic")
        quad = NetworkParams(quad_layers, config)
        X = np.random.default_rng(1).uniform(-1, 1, (50, 3))
        a = fieldnet.forward_jet_batch(quad, X, order=2)
        b = fieldnet.forward_jet_batch(lin, X, order=2)
        np.testing.assert_array_equal(a.value, b.value)
        np.testing.assert_array_equal(a.grad, b.grad)
        np.testing.assert_array_equal(a.hess_sym, b.hess_sym)


class TestInit:
    def test_deterministic(self):
        a = random_net(42)
        b = random_net(42)
        for la, lb in zip(a.layers, b.layers):
            for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
                np.testing.assert_array_equal(getattr(la, name), getattr(lb, name))

    def test_siren_uniform_ranges(self):
        net = random_net(4, width=64)
        first = net.layers[0]
        assert np.abs(first.W2).max() <= 1.0 / first.m_in
        for layer in net.layers[1:]:
            bound = np.sqrt(6.0 / layer.m_in) / layer.omega0
            assert np.abs(layer.W2).max() <= bound

    def test_small_tensors_bounded(self):
        net = random_net(4)
        for layer in net.layers:
            assert np.abs(layer.W1).max() <= fieldnet.INIT_EPS
            assert np.abs(layer.W3).max() <= fieldnet.INIT_EPS
            assert np.abs(layer.b3).max() <= fieldnet.INIT_EPS
            np.testing.assert_array_equal(layer.b1, np.ones(layer.m_out))

    def test_zeroed_quadratic_part_equals_linear(self):
        quad = random_net(17, kind="quadratic")
        lin_layers = []
        for layer in quad.layers:
            layer.W1[:] = 0.0
            layer.W3[:] = 0.0
            layer.b3[:] = 0.0
            lin_layers.append(LayerParams(
                W1=np.zeros_like(layer.W1), b1=np.ones_like(layer.b1),
                W2=layer.W2.copy(), b2=layer.b2.copy(),
                W3=np.zeros_like(layer.W3), b3=np.zeros_like(layer.b3),
                kind="linear", activation=layer.activation, omega0=layer.omega0))
        config = NetworkConfig(input_dim=3, hidden_layers=quad.config.hidden_layers,
                               hidden_width=quad.config.hidden_width, layer_kind="linear")
        lin = NetworkParams(lin_layers, config)
        X = np.random.default_rng(0).uniform(-1, 1, (20, 3))
        np.testing.assert_array_equal(fieldnet.forward_batch(quad, X),
                                      fieldnet.forward_batch(lin, X))

    @pytest.mark.parametrize("scheme,width,layers", [
        ("geometric_sine", 32, 4),
        ("geometric_sine", 128, 5),
        ("multifreq_geometric", 128, 5),
    ])
    @pytest.mark.parametrize("dim", [2, 3])
    def test_geometric_schemes_sign_correct(self, scheme, width, layers, dim):
        # Probe points must stay inside the fit box U(-1.1, 1.1); sine
        # features extrapolate badly outside it.  The multifreq scheme
        # spends most of its width on high-frequency blocks, so it only
        # resolves the sphere reliably at preset-scale widths.
        net = random_net(1, input_dim=dim, hidden_layers=layers, width=width,
                         scheme=scheme)
        assert fieldnet.forward(net, np.zeros(dim)) < 0.0
        corner = np.full(dim, 1.05 / np.sqrt(dim))
        assert fieldnet.forward(net, corner) > 0.0

    @pytest.mark.parametrize("scheme", ["geometric_sine", "multifreq_geometric"])
    def test_geometric_init_tracks_sphere(self, scheme):
        net = random_net(3, input_dim=3, hidden_layers=5, width=128,
                         scheme=scheme)
        pts = np.random.default_rng(9).uniform(-1.05, 1.05, (2000, 3))
        target = np.linalg.norm(pts, axis=1) - 0.5
        u = fieldnet.forward_batch(net, pts)
        rms = np.sqrt(np.mean((u - target) ** 2))
        assert rms < 0.2
        assert np.mean(np.sign(u) == np.sign(target)) > 0.9


class TestParamCount:
    def test_tiny_linear(self):
        config = NetworkConfig(input_dim=1, hidden_layers=1, hidden_width=1,
                               layer_kind="linear")
        assert fieldnet.param_count(config) == 4

    def test_reference_sizes(self):
        lin = NetworkConfig(input_dim=3, hidden_layers=5, hidden_width=256,
                            layer_kind="linear")
        qua = NetworkConfig(input_dim=3, hidden_layers=5, hidden_width=128,
                            layer_kind="quadratic")
        assert fieldnet.param_count(lin) == 264_449
        assert round(fieldnet.param_count(lin) / 1e4) == 26   # 0.26M
        assert fieldnet.param_count(qua) == 200_067
        assert round(fieldnet.param_count(qua) / 1e4) == 20   # 0.20M

    def test_matches_actual_arrays(self):
        net = random_net(2, input_dim=2, hidden_layers=3, width=5)
        total = sum(getattr(layer, name).size
                    for layer in net.layers for name in layer.trainable_names())
        assert fieldnet.param_count(net.config) == total


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = random_net(13, kind="quadratic", scheme="multifreq_geometric")
        path = tmp_path / "net.steik"
        fieldnet.save_params(net, path)
        back = fieldnet.load_params(path)
        assert back.config == net.config
        for la, lb in zip(net.layers, back.layers):
            assert (la.kind, la.activation, la.omega0) == (lb.kind, lb.activation, lb.omega0)
            for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
                np.testing.assert_array_equal(getattr(la, name), getattr(lb, name))

    def test_bad_magic(self):
        with pytest.raises(fieldnet.CheckpointError, match="magic"):
            fieldnet.load_params(io.BytesIO(b"NOTAPKG" + b"\0" * 64))

    def test_version_mismatch(self):
        with pytest.raises(fieldnet.CheckpointError, match="version"):
            fieldnet.load_params(io.BytesIO(b"STEIK9" + b"\0" * 64))

    def test_truncated(self):
        net = random_net(13)
        blob = fieldnet.params_to_bytes(net)
        with pytest.raises(fieldnet.CheckpointError, match="truncated"):
            fieldnet.params_from_bytes(blob[: len(blob) // 2])
