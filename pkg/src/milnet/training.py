"""Adam training loop with deterministic seeding, checkpoints, k selection.

Every source of randomness is a derived stream of the root seed: "init" for
parameters, ("shuffle", epoch) for batch order, ("aug", epoch, sample index)
for augmentation.  Two runs with the same config and data are therefore
bitwise identical, including checkpoint bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig, parse_run_config, run_config_text
from .evaluation import accuracy, auc
from .heads import BagWeights, bag_loss, bag_weights, l2_penalty
from .model import (
    ModelParams,
    forward_backbone,
    init_params,
    instance_responses,
    params_to_leaves,
    rank_responses,
    response_grid,
)
from .preprocessing import augment, to_network_input
from .rng import derive_rng

__all__ = [
    "TrainState",
    "EpochMetrics",
    "TrainResult",
    "init_state",
    "adam_step",
    "bag_scores",
    "train",
    "select_k",
    "save_checkpoint",
    "load_checkpoint",
    "metrics_csv",
]


@dataclass
class TrainState:
    """Parameters plus Adam moments and the step counter."""

    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "TrainState":
        return TrainState(
            params=self.params.copy(),
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def init_state(params: ModelParams) -> TrainState:
    zeros = lambda: {k: np.zeros_like(a) for k, a in params.arrays.items()}
    return TrainState(params=params, m=zeros(), v=zeros())


def adam_step(
    state: TrainState,
    grads: dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update, in place; returns the state.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    t = state.step + 1
    for name, arr in state.params.arrays.items():
        if name not in grads or grads[name] is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {arr.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return state


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_auc: float
    val_acc: float


@dataclass
class TrainResult:
    """Best-validation-AUC snapshot plus the full per-epoch log."""

    state: TrainState
    config: TrainConfig
    metrics: list[EpochMetrics]
    best_epoch: int
    best_val_auc: float


def metrics_csv(metrics: list[EpochMetrics]) -> str:
    lines = ["epoch,train_loss,val_auc,val_acc"]
    for row in metrics:
        lines.append(
            f"{row.epoch},{row.train_loss:.10f},{row.val_auc:.10f},{row.val_acc:.10f}"
        )
    return "\n".join(lines) + "\n"


def _prepare_inputs(images: list[np.ndarray], cfg: TrainConfig) -> list[np.ndarray]:
    size = cfg.backbone.input_size
    return [to_network_input(img, size, mode=cfg.preprocess) for img in images]


def bag_scores(params: ModelParams, inputs: list[np.ndarray]) -> np.ndarray:
    """Predicted positive probability per bag: the top patch response."""
    return np.array([float(response_grid(params, x).max()) for x in inputs])


def _batch_objective(
    cfg: TrainConfig,
    weights: BagWeights,
    leaves: dict[str, Tensor],
    x: np.ndarray,
    labels: np.ndarray,
) -> Tensor:
    """Summed per-bag loss over a batch plus one L2 term; graph root."""
    fmap = forward_backbone(Tensor(x), cfg.backbone, leaves)
    rmaps = instance_responses(fmap, leaves["response.weight"], leaves["response.bias"])
    terms = [
        bag_loss(cfg.mil, rank_responses(rm), int(label), weights)
        for rm, label in zip(rmaps, labels)
    ]
    total = ad.add_n(terms)
    if cfg.mil.lam > 0.0:
        total = ad.add(total, ad.scale(l2_penalty(list(leaves.values())), cfg.mil.lam / 2.0))
    return total


def train(
    train_images: list[np.ndarray],
    train_labels: np.ndarray,
    val_images: list[np.ndarray],
    val_labels: np.ndarray,
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
    init_state_override: TrainState | None = None,
) -> TrainResult:
    """Full training run; returns the best-validation-AUC snapshot.

    Images are raw 8-bit arrays; preprocessing and per-epoch augmentation
    happen inside.  Ties on validation AUC keep the earlier epoch.  A
    non-finite loss aborts with the offending epoch and step named.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    n = len(train_images)
    if n == 0 or len(val_images) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if n != len(train_labels) or len(val_images) != len(val_labels):
        raise ValueError("images and labels must align")
    n_pos = int(train_labels.sum())
    if n_pos == 0 or n_pos == n:
        raise ValueError(
            f"training fold has a single class ({n_pos} positives of {n}); "
            "both classes are required"
        )
    weights = bag_weights(
        n_pos, n, cfg.mil.k, cfg.mil.m, mode=cfg.mil.weight_mode
    )
    base_train = _prepare_inputs(train_images, cfg)
    base_val = _prepare_inputs(val_images, cfg)

    if init_state_override is not None:
        state = init_state_override
    else:
        state = init_state(init_params(cfg.backbone, cfg.seed))
    best: TrainState | None = None
    best_auc = -1.0
    best_epoch = -1
    metrics: list[EpochMetrics] = []

    for epoch in range(1, cfg.epochs + 1):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            xs = np.empty(
                (len(chunk), 1, cfg.backbone.input_size, cfg.backbone.input_size)
            )
            for row, idx in enumerate(chunk):
                img = base_train[idx]
                if cfg.augment_enabled:
                    rng = derive_rng(cfg.seed, "aug", epoch, int(idx))
                    img = augment(img, cfg.aug, rng)
                xs[row, 0] = img
            leaves = params_to_leaves(state.params)
            total = _batch_objective(cfg, weights, leaves, xs, train_labels[chunk])
            if not np.isfinite(total.data):
                raise RuntimeError(
                    f"non-finite loss {total.data!r} at epoch {epoch}, "
                    f"step {state.step + 1}; aborting"
                )
            loss_sum += float(total.data)
            total.backward()
            grads = {name: leaf.grad for name, leaf in leaves.items()}
            adam_step(state, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        scores = bag_scores(state.params, base_val)
        val_auc = auc(scores, val_labels)
        val_acc = accuracy(scores, val_labels)
        row = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / n,
            val_auc=val_auc,
            val_acc=val_acc,
        )
        metrics.append(row)
        if log is not None:
            log(
                f"epoch {epoch}/{cfg.epochs}  train_loss {row.train_loss:.6f}  "
                f"val_auc {val_auc:.4f}  val_acc {val_acc:.4f}"
            )
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best = state.copy()
    assert best is not None
    return TrainResult(
        state=best,
        config=cfg,
        metrics=metrics,
        best_epoch=best_epoch,
        best_val_auc=best_auc,
    )


def select_k(
    train_images: list[np.ndarray],
    train_labels: np.ndarray,
    val_images: list[np.ndarray],
    val_labels: np.ndarray,
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[int, TrainResult]:
    """Train one label_assign model per k in the grid; best validation AUC
    wins, ties going to the smaller k (the grid is kept sorted)."""
    if cfg.mil.head != "label_assign":
        raise ValueError(
            f"select_k applies to the label_assign head, not {cfg.mil.head!r}"
        )
    m = cfg.mil.m
    for k in cfg.k_grid:
        if k > m:
            raise ValueError(f"k={k} in k_grid exceeds instances per bag m={m}")
    best_k = None
    best_result: TrainResult | None = None
    for k in cfg.k_grid:
        run_cfg = replace(cfg, mil=replace(cfg.mil, k=k))
        if log is not None:
            log(f"k = {k}")
        result = train(train_images, train_labels, val_images, val_labels,
                       run_cfg, log=log)
        if best_result is None or result.best_val_auc > best_result.best_val_auc:
            best_k = k
            best_result = result
    assert best_k is not None and best_result is not None
    return best_k, best_result


# Checkpoint format: magic "MILN", u32 version, u64 config-blob length,
# UTF-8 config text (includes the step counter), then per tensor: u32 name
# length, name bytes, u32 rank, rank x u64 dims, u8 dtype tag (0 = little-
# endian float64), raw payload.  Parameters come first in their natural
# order, then adam.m.* and adam.v.* moments.

CHECKPOINT_MAGIC = b"MILN"
CHECKPOINT_VERSION = 1
_DTYPE_F64_LE = 0


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote the
    # scalar response bias to shape (1,) and the round trip would not be
    # shape-exact)
    data = np.asarray(arr, dtype="<f8", order="C")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", data.ndim))
    if data.ndim:
        f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    f.write(struct.pack("<B", _DTYPE_F64_LE))
    f.write(data.tobytes())


def save_checkpoint(path: str, state: TrainState, cfg: TrainConfig) -> None:
    blob = run_config_text(cfg, state.step).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, arr in state.params.arrays.items():
            _write_tensor(f, name, arr)
        for name in state.params.arrays:
            _write_tensor(f, "adam.m." + name, state.m[name])
        for name in state.params.arrays:
            _write_tensor(f, "adam.v." + name, state.v[name])


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", _read_exact(f, 8, "config length"))
        cfg, step = parse_run_config(_read_exact(f, blob_len, "config").decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))
            shape = struct.unpack(
                f"<{rank}Q", _read_exact(f, 8 * rank, f"{name} dims")
            )
            (tag,) = struct.unpack("<B", _read_exact(f, 1, f"{name} dtype"))
            if tag != _DTYPE_F64_LE:
                raise ValueError(f"{path}: unknown dtype tag {tag} for {name!r}")
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 8 * count, f"{name} payload")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    arrays = {}
    moments_m = {}
    moments_v = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            moments_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v."):]] = arr
        else:
            arrays[name] = arr
    for name in arrays:
        if name not in moments_m or name not in moments_v:
            raise ValueError(f"{path}: missing Adam moments for {name!r}")
    params = ModelParams(cfg.backbone, arrays)
    return TrainState(params=params, m=moments_m, v=moments_v, step=step), cfg
