"""Backbone CNN, shared logistic instance-response layer, and ranking layer.

The backbone maps a grayscale image batch to a multi-channel feature map
whose every spatial cell stands for one patch of the input.  A logistic
layer with weights shared across positions turns each cell into a malignancy
probability, and the ranking layer sorts those per-image responses in
descending order for the MIL loss heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import derive_rng

__all__ = [
    "BackboneSpec",
    "ModelParams",
    "ResponseMap",
    "RankedResponses",
    "PRESETS",
    "backbone_preset",
    "output_geometry",
    "init_params",
    "params_to_leaves",
    "forward_backbone",
    "instance_responses",
    "rank_responses",
    "response_grid",
]

RESPONSE_CLAMP = 1e-7  # responses live in [1e-7, 1 - 1e-7] so logs stay finite

# layer forms: ("conv", out_channels, kernel, stride, padding)
#              ("relu",)
#              ("pool", window, stride)
Layer = tuple


@dataclass(frozen=True)
class BackboneSpec:
    """Input size plus the ordered conv/relu/pool layer list."""

    input_size: int
    layers: tuple[Layer, ...]

    def describe(self) -> str:
        parts = [f"input:{self.input_size}"]
        for layer in self.layers:
            parts.append(":".join(str(v) for v in layer))
        return ",".join(parts)

    @staticmethod
    def parse(text: str) -> "BackboneSpec":
        fields = [f.strip() for f in text.split(",") if f.strip()]
        if not fields or not fields[0].startswith("input:"):
            raise ValueError(f"backbone spec must start with 'input:<size>': {text!r}")
        input_size = int(fields[0].split(":")[1])
        layers: list[Layer] = []
        for field in fields[1:]:
            parts = field.split(":")
            kind = parts[0]
            if kind == "conv":
                layers.append(("conv", int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4])))
            elif kind == "relu":
                layers.append(("relu",))
            elif kind == "pool":
                layers.append(("pool", int(parts[1]), int(parts[2])))
            else:
                raise ValueError(f"unknown backbone layer {field!r}")
        return BackboneSpec(input_size=input_size, layers=tuple(layers))


# The full-scale preset follows the standard five-conv stack adapted to one
# input channel; it maps 224x224 to a 256-channel 6x6 map.  The desk preset
# is sized for fast end-to-end verification: 64x64 in, 32-channel 4x4 out.
# It reaches stride 16 through stride-2 convolutions plus one trailing pool
# rather than repeated pooling, which keeps each output cell's receptive
# field to 25 px; wider fields blur neighboring cells together and the
# response map stops pointing at the right patch.
PRESETS: dict[str, BackboneSpec] = {
    "paper": BackboneSpec(
        input_size=224,
        layers=(
            ("conv", 64, 11, 4, 2), ("relu",), ("pool", 3, 2),
            ("conv", 192, 5, 1, 2), ("relu",), ("pool", 3, 2),
            ("conv", 384, 3, 1, 1), ("relu",),
            ("conv", 256, 3, 1, 1), ("relu",),
            ("conv", 256, 3, 1, 1), ("relu",), ("pool", 3, 2),
        ),
    ),
    "desk": BackboneSpec(
        input_size=64,
        layers=(
            ("conv", 8, 5, 2, 2), ("relu",),
            ("conv", 16, 3, 2, 1), ("relu",),
            ("conv", 32, 3, 2, 1), ("relu",),
            ("pool", 2, 2),
        ),
    ),
}


def backbone_preset(name: str) -> BackboneSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def output_geometry(spec: BackboneSpec) -> tuple[int, int, int]:
    """(channels, height, width) of the feature map the spec produces."""
    c, h, w = 1, spec.input_size, spec.input_size
    for layer in spec.layers:
        if layer[0] == "conv":
            _, out_c, k, s, p = layer
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            c = out_c
        elif layer[0] == "pool":
            _, win, s = layer
            h = (h - win) // s + 1
            w = (w - win) // s + 1
        if h < 1 or w < 1:
            raise ValueError(f"backbone collapses spatial dims at layer {layer}")
    return c, h, w


class ModelParams:
    """Named parameter arrays: conv kernels/biases plus the response layer.

    Kernels are named conv{i}.kernel / conv{i}.bias in layer order; the
    shared logistic layer is response.weight (length = output channels) and
    response.bias (scalar).
    """

    def __init__(self, spec: BackboneSpec, arrays: dict[str, np.ndarray]):
        self.spec = spec
        self.arrays = arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})


def init_params(spec: BackboneSpec, seed: int) -> ModelParams:
    """Seed-controlled init: kernels uniform in +-sqrt(6/(fan_in+fan_out)),
    biases zero.  Keeps initial responses near 0.5."""
    rng = derive_rng(seed, "init")
    arrays: dict[str, np.ndarray] = {}
    in_c = 1
    conv_i = 0
    for layer in spec.layers:
        if layer[0] != "conv":
            continue
        _, out_c, k, _, _ = layer
        fan_in = in_c * k * k
        fan_out = out_c * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"conv{conv_i}.kernel"] = rng.uniform(-limit, limit, size=(out_c, in_c, k, k))
        arrays[f"conv{conv_i}.bias"] = np.zeros(out_c)
        in_c = out_c
        conv_i += 1
    n_c, _, _ = output_geometry(spec)
    limit = np.sqrt(6.0 / (n_c + 1))
    arrays["response.weight"] = rng.uniform(-limit, limit, size=n_c)
    arrays["response.bias"] = np.zeros(())
    return ModelParams(spec, arrays)


def params_to_leaves(params: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    return {
        name: Tensor(arr, requires_grad=requires_grad, name=name)
        for name, arr in params.arrays.items()
    }


def forward_backbone(x: Tensor, spec: BackboneSpec, leaves: dict[str, Tensor]) -> Tensor:
    """Run the conv stack on an (N, 1, H, W) batch; returns the feature map."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) input, got {x.shape}")
    if x.shape[2] != spec.input_size or x.shape[3] != spec.input_size:
        raise ValueError(
            f"input spatial size {x.shape[2]}x{x.shape[3]} does not match "
            f"backbone input size {spec.input_size}"
        )
    out = x
    conv_i = 0
    for layer in spec.layers:
        if layer[0] == "conv":
            _, _, _, s, p = layer
            out = ad.conv2d(out, leaves[f"conv{conv_i}.kernel"], stride=s, padding=p)
            out = ad.add_channel_bias(out, leaves[f"conv{conv_i}.bias"])
            conv_i += 1
        elif layer[0] == "relu":
            out = ad.relu(out)
        elif layer[0] == "pool":
            _, win, s = layer
            out = ad.maxpool2d(out, window=win, stride=s)
        else:
            raise ValueError(f"unknown layer {layer!r}")
    return out


@dataclass
class ResponseMap:
    """Per-patch malignancy probabilities of one image, flattened row-major.

    values is a 1-D graph tensor of length m = grid_h * grid_w with every
    entry strictly inside (0, 1) after clamping.
    """

    values: Tensor
    grid_h: int
    grid_w: int

    @property
    def m(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class RankedResponses:
    """Descending-sorted responses plus the permutation that produced them:
    values[j] == unsorted[perm[j]]."""

    values: Tensor
    perm: np.ndarray


def instance_responses(feature_map: Tensor, weight: Tensor, bias: Tensor) -> list[ResponseMap]:
    """Shared logistic layer over every feature-map cell.

    r[n, i, j] = sigmoid(weight . F[n, i, j, :] + bias), clamped into
    [1e-7, 1 - 1e-7]; one flattened ResponseMap per image in the batch.
    """
    n, _, h, w = feature_map.shape
    z = ad.affine_channel(feature_map, weight, bias)
    r = ad.clamp(ad.sigmoid(z), RESPONSE_CLAMP, 1.0 - RESPONSE_CLAMP)
    flat = ad.reshape(r, (n, h * w))
    return [ResponseMap(values=ad.take_row(flat, i), grid_h=h, grid_w=w) for i in range(n)]


def rank_responses(response_map: ResponseMap) -> RankedResponses:
    """Descending sort of one image's responses (stable under ties)."""
    sorted_vals, perm = ad.sort_descending(response_map.values)
    return RankedResponses(values=sorted_vals, perm=perm)


def response_grid(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Inference-only response map of a single [0, 1] float image, as a
    (grid_h, grid_w) array."""
    x = Tensor(image[None, None, :, :])
    leaves = params_to_leaves(params, requires_grad=False)
    fmap = forward_backbone(x, params.spec, leaves)
    rmaps = instance_responses(fmap, leaves["response.weight"], leaves["response.bias"])
    rm = rmaps[0]
    return rm.values.data.reshape(rm.grid_h, rm.grid_w).copy()
