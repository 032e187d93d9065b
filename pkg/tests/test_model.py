"""Backbone geometry, parameter init, and response-layer checks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from milnet.autodiff import Tensor
from milnet.model import (
    BackboneSpec,
    ModelParams,
    PRESETS,
    backbone_preset,
    forward_backbone,
    init_params,
    instance_responses,
    output_geometry,
    params_to_leaves,
    rank_responses,
    response_grid,
)


def conv_forward_oracle(x, kernel, bias, stride, padding):
    """Plain nested-loop conv + bias, no autodiff machinery."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, co, i, j] = (patch * kernel[co]).sum() + bias[co]
    return out


def pool_forward_oracle(x, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + window,
                                j * stride:j * stride + window].max(axis=(2, 3))
    return out


def backbone_oracle(x, spec, params):
    """Numpy-only replay of the layer list."""
    out = x
    conv_i = 0
    for layer in spec.layers:
        if layer[0] == "conv":
            _, _, _, s, p = layer
            out = conv_forward_oracle(
                out, params.arrays[f"conv{conv_i}.kernel"],
                params.arrays[f"conv{conv_i}.bias"], s, p)
            conv_i += 1
        elif layer[0] == "relu":
            out = np.maximum(out, 0.0)
        elif layer[0] == "pool":
            out = pool_forward_oracle(out, layer[1], layer[2])
    return out


class TestBackboneSpec:
    def test_desk_geometry(self):
        assert output_geometry(PRESETS["desk"]) == (32, 4, 4)

    def test_paper_geometry(self):
        assert output_geometry(PRESETS["paper"]) == (256, 6, 6)

    def test_describe_parse_round_trip(self):
        for name in PRESETS:
            spec = PRESETS[name]
            assert BackboneSpec.parse(spec.describe()) == spec

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError):
            BackboneSpec.parse("conv:8:7:2:3")
        with pytest.raises(ValueError):
            BackboneSpec.parse("input:64,dense:10")

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            backbone_preset("tiny")

    def test_collapsing_spec_errors(self):
        spec = BackboneSpec(input_size=8, layers=(
            ("pool", 2, 2), ("pool", 2, 2), ("pool", 2, 2), ("pool", 2, 2)))
        with pytest.raises(ValueError):
            output_geometry(spec)


class TestInitParams:
    def test_shapes_and_names(self):
        params = init_params(PRESETS["desk"], seed=0)
        shapes = {name: params.arrays[name].shape for name in params.names()}
        assert shapes == {
            "conv0.kernel": (8, 1, 5, 5), "conv0.bias": (8,),
            "conv1.kernel": (16, 8, 3, 3), "conv1.bias": (16,),
            "conv2.kernel": (32, 16, 3, 3), "conv2.bias": (32,),
            "response.weight": (32,), "response.bias": (),
        }

    def test_biases_zero(self):
        params = init_params(PRESETS["desk"], seed=3)
        for name in params.names():
            if name.endswith("bias"):
                assert not params.arrays[name].any()

    def test_kernel_bounds(self):
        params = init_params(PRESETS["desk"], seed=5)
        k0 = params.arrays["conv0.kernel"]
        limit = np.sqrt(6.0 / (1 * 25 + 8 * 25))
        assert np.abs(k0).max() <= limit
        # the draw should actually use most of the interval
        assert np.abs(k0).max() > 0.8 * limit

    def test_deterministic(self):
        a = init_params(PRESETS["desk"], seed=9)
        b = init_params(PRESETS["desk"], seed=9)
        for name in a.names():
            assert_array_equal(a.arrays[name], b.arrays[name])

    def test_seed_changes_values(self):
        a = init_params(PRESETS["desk"], seed=1)
        b = init_params(PRESETS["desk"], seed=2)
        assert not np.array_equal(a.arrays["conv0.kernel"], b.arrays["conv0.kernel"])

    def test_copy_is_deep(self):
        a = init_params(PRESETS["desk"], seed=0)
        b = a.copy()
        b.arrays["conv0.kernel"][0, 0, 0, 0] += 1.0
        assert a.arrays["conv0.kernel"][0, 0, 0, 0] != b.arrays["conv0.kernel"][0, 0, 0, 0]


class TestForwardBackbone:
    def setup_method(self):
        self.spec = BackboneSpec(input_size=12, layers=(
            ("conv", 3, 3, 1, 1), ("relu",), ("pool", 2, 2),
            ("conv", 4, 3, 1, 1), ("relu",), ("pool", 2, 2)))
        self.params = init_params(self.spec, seed=21)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, size=(2, 1, 12, 12))
        leaves = params_to_leaves(self.params)
        out = forward_backbone(Tensor(x), self.spec, leaves)
        expected = backbone_oracle(x, self.spec, self.params)
        assert_allclose(out.data, expected, rtol=1e-12)

    def test_output_matches_geometry(self):
        c, h, w = output_geometry(self.spec)
        x = Tensor(np.zeros((3, 1, 12, 12)))
        out = forward_backbone(x, self.spec, params_to_leaves(self.params))
        assert out.shape == (3, c, h, w)

    def test_desk_preset_runs(self):
        params = init_params(PRESETS["desk"], seed=1)
        x = Tensor(np.random.default_rng(2).uniform(0, 1, size=(1, 1, 64, 64)))
        out = forward_backbone(x, PRESETS["desk"], params_to_leaves(params))
        assert out.shape == (1, 32, 4, 4)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            forward_backbone(Tensor(np.zeros((12, 12))), self.spec,
                             params_to_leaves(self.params))

    def test_rejects_wrong_size(self):
        with pytest.raises(ValueError):
            forward_backbone(Tensor(np.zeros((1, 1, 10, 10))), self.spec,
                             params_to_leaves(self.params))


class TestInstanceResponses:
    def test_sigmoid_of_affine(self):
        rng = np.random.default_rng(4)
        fmap = rng.normal(size=(2, 5, 3, 4))
        w = rng.normal(size=5)
        b = 0.3
        rmaps = instance_responses(Tensor(fmap), Tensor(w), Tensor(np.asarray(b)))
        assert len(rmaps) == 2
        for n, rm in enumerate(rmaps):
            assert (rm.grid_h, rm.grid_w, rm.m) == (3, 4, 12)
            z = np.einsum("chw,c->hw", fmap[n], w) + b
            expected = 1.0 / (1.0 + np.exp(-z))
            assert_allclose(rm.values.data, expected.reshape(-1), rtol=1e-12)

    def test_clamped_into_open_interval(self):
        fmap = np.full((1, 1, 2, 2), 1000.0)
        rmaps = instance_responses(Tensor(fmap), Tensor(np.ones(1)),
                                   Tensor(np.asarray(0.0)))
        vals = rmaps[0].values.data
        assert (vals <= 1.0 - 1e-7).all()
        fmap = np.full((1, 1, 2, 2), -1000.0)
        rmaps = instance_responses(Tensor(fmap), Tensor(np.ones(1)),
                                   Tensor(np.asarray(0.0)))
        assert (rmaps[0].values.data >= 1e-7).all()

    def test_row_major_flattening(self):
        fmap = np.zeros((1, 1, 2, 3))
        fmap[0, 0] = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
        rmaps = instance_responses(Tensor(fmap), Tensor(np.ones(1)),
                                   Tensor(np.asarray(0.0)))
        z = np.array([1, 2, 3, 4, 5, 6], dtype=np.float64)
        assert_allclose(rmaps[0].values.data, 1 / (1 + np.exp(-z)), rtol=1e-12)


class TestRankResponses:
    def test_descending_with_perm(self):
        vals = np.array([0.3, 0.9, 0.1, 0.5])
        rm_vals = Tensor(vals, requires_grad=True)
        from milnet.model import ResponseMap
        ranked = rank_responses(ResponseMap(values=rm_vals, grid_h=2, grid_w=2))
        assert_array_equal(ranked.values.data, [0.9, 0.5, 0.3, 0.1])
        assert_array_equal(ranked.perm, [1, 3, 0, 2])
        assert_array_equal(vals[ranked.perm], ranked.values.data)


class TestResponseGrid:
    def test_matches_graph_pipeline(self):
        params = init_params(PRESETS["desk"], seed=13)
        rng = np.random.default_rng(14)
        img = rng.uniform(0, 1, size=(64, 64))
        grid = response_grid(params, img)
        assert grid.shape == (4, 4)

        leaves = params_to_leaves(params, requires_grad=False)
        fmap = forward_backbone(Tensor(img[None, None]), params.spec, leaves)
        rmaps = instance_responses(fmap, leaves["response.weight"],
                                   leaves["response.bias"])
        assert_allclose(grid.reshape(-1), rmaps[0].values.data, rtol=0, atol=0)

    def test_zeroed_params_give_half(self):
        params = init_params(PRESETS["desk"], seed=0)
        for name in params.names():
            params.arrays[name][...] = 0.0
        grid = response_grid(params, np.random.default_rng(1).uniform(0, 1, (64, 64)))
        assert_allclose(grid, 0.5, rtol=0, atol=0)
