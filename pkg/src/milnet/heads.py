"""The three MIL loss heads and the shared inference rule.

All heads consume the descending-ranked response vector of one bag.  The
max-pooling head penalizes only the top response; the label-assignment head
treats the top k patches as carrying the bag label and the rest as negative;
the sparse head adds an L1 penalty over all responses to the max-pooling
term.  Inference is the same for every head: the top response is the bag's
predicted probability.

Batch objectives sum per-bag terms (no mean) and add the L2 penalty
(lam / 2) * ||theta||^2 once per step, over all trainable parameters
including biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tensor
from .model import RankedResponses

__all__ = [
    "HEADS",
    "MilConfig",
    "BagWeights",
    "bag_weights",
    "loss_max_pool",
    "loss_label_assign",
    "loss_sparse",
    "bag_loss",
    "l2_penalty",
    "infer_bag",
]

HEADS = ("max_pool", "label_assign", "sparse")


@dataclass(frozen=True)
class MilConfig:
    """Head selection and its hyperparameters.

    k applies to label_assign only, mu to sparse only; both are validated
    against the head at construction.  m (instances per bag) is fixed by the
    backbone and checked against k when known.
    """

    head: str = "max_pool"
    k: int = 4
    mu: float = 1e-5
    lam: float = 1e-5
    weight_mode: str = "balanced"
    m: int | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.k < 1:
            raise ValueError(f"k must be a positive int, got {self.k}")
        if self.mu < 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.weight_mode not in ("balanced", "literal"):
            raise ValueError(
                f"weight_mode must be 'balanced' or 'literal', got {self.weight_mode!r}"
            )
        if self.m is not None and self.head == "label_assign" and self.k > self.m:
            raise ValueError(f"k={self.k} exceeds instances per bag m={self.m}")


@dataclass(frozen=True)
class BagWeights:
    """Class weights at bag level (w1, w0) and patch level (w1_patch, w0_patch)."""

    w1: float
    w0: float
    w1_patch: float
    w0_patch: float

    def __post_init__(self):
        for name in ("w1", "w0", "w1_patch", "w0_patch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def bag(self, label: int) -> float:
        return self.w1 if label == 1 else self.w0


def bag_weights(n_pos: int, n_total: int, k: int, m: int, mode: str = "balanced") -> BagWeights:
    """Empirical class weights from training-set counts.

    Patch level is always w1_patch = k * n_pos / (m * n_total) and
    w0_patch = 1 - w1_patch.  Bag level depends on mode: 'literal' uses the
    raw positive prevalence as w1; 'balanced' (default) swaps the two so the
    minority class is up-weighted, which is what a weighted loss on an
    imbalanced set is for.
    """
    if not 0 < n_pos < n_total:
        raise ValueError(
            f"need both classes present: n_pos={n_pos} of n_total={n_total}"
        )
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must be in [1, m={m}]")
    prevalence = n_pos / n_total
    w1_patch = k * n_pos / (m * n_total)
    if mode == "literal":
        w1, w0 = prevalence, 1.0 - prevalence
    elif mode == "balanced":
        w1, w0 = 1.0 - prevalence, prevalence
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    return BagWeights(w1=w1, w0=w0, w1_patch=w1_patch, w0_patch=1.0 - w1_patch)


def _check_label(label: int) -> int:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    return label


def l2_penalty(params: Sequence[Tensor]) -> Tensor:
    """||theta||^2 over all given parameter tensors."""
    return ad.add_n([ad.l2_norm_sq(p) for p in params])


def _with_l2(term: Tensor, lam: float, params: Sequence[Tensor]) -> Tensor:
    if lam > 0.0 and len(params) > 0:
        return ad.add(term, ad.scale(l2_penalty(params), lam / 2.0))
    return term


def _max_pool_term(ranked: RankedResponses, label: int, weights: BagWeights) -> Tensor:
    top = ad.slice1d(ranked.values, 0, 1)
    p = top if label == 1 else ad.const_minus(1.0, top)
    return ad.scale(ad.reduce_sum(ad.log(p)), -weights.bag(label))


def loss_max_pool(
    ranked: RankedResponses,
    label: int,
    weights: BagWeights,
    lam: float = 0.0,
    params: Sequence[Tensor] = (),
) -> Tensor:
    """-w_y * log p(y) with p(1) = top response, p(0) = 1 - top response.

    Gradient flows only into the single argmax instance.
    """
    term = _max_pool_term(ranked, _check_label(label), weights)
    return _with_l2(term, lam, params)


def loss_label_assign(
    ranked: RankedResponses,
    label: int,
    k: int,
    weights: BagWeights,
    lam: float = 0.0,
    params: Sequence[Tensor] = (),
) -> Tensor:
    """Weighted cross entropy with the top k patches assigned the bag label
    and the remaining patches assigned negative.

    For a negative bag the two sums coincide into one negative-label cross
    entropy over all m patches.  Gradient reaches every instance.
    """
    _check_label(label)
    m = ranked.values.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must be in [1, m={m}]")
    if label == 1:
        top = ad.slice1d(ranked.values, 0, k)
        head = ad.scale(ad.reduce_sum(ad.log(top)), -weights.w1_patch)
        if k < m:
            tail = ad.slice1d(ranked.values, k, m)
            rest = ad.scale(
                ad.reduce_sum(ad.log(ad.const_minus(1.0, tail))), -weights.w0_patch
            )
            term = ad.add(head, rest)
        else:
            term = head
    else:
        comp = ad.log(ad.const_minus(1.0, ranked.values))
        term = ad.scale(ad.reduce_sum(comp), -weights.w0_patch)
    return _with_l2(term, lam, params)


def loss_sparse(
    ranked: RankedResponses,
    label: int,
    mu: float,
    weights: BagWeights,
    lam: float = 0.0,
    params: Sequence[Tensor] = (),
) -> Tensor:
    """Max-pooling bag term plus mu * ||r||_1 over all m responses.

    With mu = 0 this is exactly the max-pooling loss, values and gradients.
    """
    if mu < 0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    term = _max_pool_term(ranked, _check_label(label), weights)
    if mu > 0.0:
        term = ad.add(term, ad.scale(ad.l1_norm(ranked.values), mu))
    return _with_l2(term, lam, params)


def bag_loss(
    cfg: MilConfig,
    ranked: RankedResponses,
    label: int,
    weights: BagWeights,
) -> Tensor:
    """Per-bag term of the configured head, without the L2 penalty."""
    if cfg.head == "max_pool":
        return loss_max_pool(ranked, label, weights)
    if cfg.head == "label_assign":
        return loss_label_assign(ranked, label, cfg.k, weights)
    return loss_sparse(ranked, label, cfg.mu, weights)


def infer_bag(ranked: RankedResponses) -> float:
    """Predicted positive probability of the bag: the top response.

    Identical rule for all three heads.
    """
    if ranked.values.shape[0] == 0:
        raise ValueError("cannot infer from an empty bag")
    return float(ranked.values.data[0])
