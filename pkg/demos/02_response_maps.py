"""
From image to response map
==========================

The model is a conv trunk followed by one logistic unit applied to every
cell of the final feature map.  Each cell therefore gets its own probability
("response") and the bag heads only ever look at the sorted list of those.
This script runs the pieces one at a time on a toy image.
"""

import numpy as np

from milnet.autodiff import Tensor
from milnet.model import (
    backbone_preset,
    forward_backbone,
    init_params,
    instance_responses,
    output_geometry,
    params_to_leaves,
    rank_responses,
    response_grid,
)

spec = backbone_preset("desk")
print("backbone :", spec.describe())
c, h, w = output_geometry(spec)
print("feature map geometry:", (c, h, w), "->", h * w, "patches per image")

# every output cell summarizes one 16x16 tile of the 64x64 input (stride 16),
# reading a 25 px neighbourhood around it

# ---------------------------------------------------------------------------
# a toy image: flat mid-gray with a bright soft square in the lower-left
rng = np.random.default_rng(4)
img = np.full((64, 64), 0.45) + rng.normal(0.0, 0.02, size=(64, 64))
yy, xx = np.mgrid[40:56, 8:24]
img[yy, xx] += 0.35
img = np.clip(img, 0.0, 1.0)

params = init_params(spec, seed=0)
leaves = params_to_leaves(params, requires_grad=False)
fmap = forward_backbone(Tensor(img[None, None, :, :]), spec, leaves)
print("\nfeature map tensor  :", fmap.shape)

rmaps = instance_responses(fmap, leaves["response.weight"], leaves["response.bias"])
rm = rmaps[0]
print("responses per image :", rm.m, "values, all in (0, 1)")
print("response values     :", np.array2string(rm.values.data, precision=3))

ranked = rank_responses(rm)
print("ranked (descending) :", np.array2string(ranked.values.data, precision=3))
print("source cells        :", ranked.perm)

# ---------------------------------------------------------------------------
# the same thing as a grid, via the inference-only helper
grid = response_grid(params, img)
print("\nresponse grid at a fresh init (no training yet):")
for row in grid:
    print("   " + "  ".join(f"{v:5.3f}" for v in row))

# with an untrained net the grid is roughly flat near 0.5; training is what
# separates the mass cell from the rest (see 06_localization.py)

# ---------------------------------------------------------------------------
# zero weights give exactly 0.5 everywhere: sigmoid(0) with zero kernels
zeroed = init_params(spec, seed=0)
for name in zeroed.names():
    zeroed.arrays[name][...] = 0.0
flat_grid = response_grid(zeroed, img)
print("\nall-zero parameters -> constant grid:",
      float(flat_grid.min()), "to", float(flat_grid.max()))
