"""
The three bag losses, by hand
=============================

A bag is one image's vector of patch responses; the label says whether at
least one patch is positive, never which one.  The three heads turn that
weak signal into a loss in different ways.  Here we feed all of them one
four-patch bag small enough to check against pencil arithmetic.
"""

import math

import numpy as np

from milnet.autodiff import Tensor
from milnet.heads import (
    BagWeights,
    bag_weights,
    infer_bag,
    loss_label_assign,
    loss_max_pool,
    loss_sparse,
)
from milnet.model import ResponseMap, rank_responses


def make_bag(values):
    t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    rm = ResponseMap(values=t, grid_h=1, grid_w=len(values))
    return t, rank_responses(rm)


r = (0.2, 0.8, 0.5, 0.1)
w = BagWeights(w1=1.0, w0=1.0, w1_patch=0.25, w0_patch=0.75)
print("responses:", r, " bag label: 1")
print("bag prediction (all heads):", infer_bag(make_bag(r)[1]))

# ---------------------------------------------------------------------------
# max pooling: only the largest response matters, loss = -log(max r)
t, ranked = make_bag(r)
loss = loss_max_pool(ranked, label=1, weights=w)
loss.backward()
print(f"\nmax_pool     loss = {float(loss.data):.6f}"
      f"   (-ln 0.8 = {-math.log(0.8):.6f})")
print("             grad =", t.grad, " only the argmax patch moves")

# ---------------------------------------------------------------------------
# label assignment: the top k patches inherit the bag label, the rest are
# treated as negatives, each side weighted by its patch prior
t, ranked = make_bag(r)
loss = loss_label_assign(ranked, label=1, k=1, weights=w)
loss.backward()
by_hand = -0.25 * math.log(0.8) - 0.75 * (
    math.log(1 - 0.5) + math.log(1 - 0.2) + math.log(1 - 0.1)
)
print(f"\nlabel_assign loss = {float(loss.data):.6f}   (by hand {by_hand:.6f})")
print("             grad =", t.grad, " every patch moves, tail pushed down")

# ---------------------------------------------------------------------------
# sparse: the max-pool term plus an L1 penalty on all responses, so the map
# is encouraged to stay dark away from the evidence
t, ranked = make_bag(r)
loss = loss_sparse(ranked, label=1, mu=0.1, weights=w)
loss.backward()
print(f"\nsparse       loss = {float(loss.data):.6f}"
      f"   (-ln 0.8 + 0.1 * {sum(r):.1f} = {-math.log(0.8) + 0.1 * sum(r):.6f})")
print("             grad =", t.grad, " argmax term plus a flat +mu")

# ---------------------------------------------------------------------------
# two degeneracies worth knowing
t, ranked = make_bag(r)
mu0 = float(loss_sparse(ranked, label=1, mu=0.0, weights=w).data)
mp = float(loss_max_pool(make_bag(r)[1], label=1, weights=w).data)
print("\nsparse with mu=0 equals max_pool exactly:", mu0 == mp)

t, ranked = make_bag(r)
full = float(loss_label_assign(ranked, label=1, k=4, weights=w).data)
expect = -0.25 * sum(math.log(v) for v in r)
print(f"label_assign with k=m keeps only the positive sum: "
      f"{full:.6f} vs {expect:.6f}")

# a negative bag collapses label_assign to one cross entropy over all m
t, ranked = make_bag(r)
neg = float(loss_label_assign(ranked, label=0, k=1, weights=w).data)
expect = -0.75 * sum(math.log(1 - v) for v in r)
print(f"negative bag, any k:                        {neg:.6f} vs {expect:.6f}")

# ---------------------------------------------------------------------------
# where the weights come from: training-set counts.  Say 40 positives out of
# 200 bags with m=16 patches and k=4 assigned per positive bag.
bal = bag_weights(n_pos=40, n_total=200, k=4, m=16)
lit = bag_weights(n_pos=40, n_total=200, k=4, m=16, mode="literal")
print("\ncounts 40/200, k=4, m=16")
print(f"  patch prior      w1_patch = 4*40/(16*200) = {bal.w1_patch}")
print(f"  balanced bags    w1 = {bal.w1}, w0 = {bal.w0}  (minority up-weighted)")
print(f"  literal  bags    w1 = {lit.w1}, w0 = {lit.w0}")
# balanced is the default; with literal weights the rare positives barely
# register and training on an imbalanced set goes nowhere
