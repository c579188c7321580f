"""Training: generalized Dice loss, Adam, fold planning, the epoch loop,
and slice-wise volume inference.

The loss weighs each class by the inverse square of its ground-truth
volume, so rare structures dominate neither numerator nor denominator.
All sampling is driven by a single seeded generator: with equal seeds two
runs produce bitwise-identical loss histories and checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import ctio
from .autodiff import Tensor
from .network import ModelConfig, ParamStore, build_model, forward

__all__ = [
    "TrainConfig",
    "FoldPlan",
    "AdamState",
    "TrainingDiverged",
    "generalized_dice_loss",
    "adam_step",
    "make_folds",
    "load_training_slices",
    "train_on_arrays",
    "train",
    "infer_volume",
]


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    epochs: int = 100
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    gdl_eps: float = 1e-6
    strict_determinism: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(
                f"learning_rate must be positive, got {self.learning_rate}")
        if self.gdl_eps <= 0:
            raise ValueError(f"gdl_eps must be positive, got {self.gdl_eps}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]  # volume id -> fold index
    seed: int

    def fold_ids(self, fold: int) -> list[str]:
        return [vid for vid, f in self.assignment.items() if f == fold]

    def training_ids(self, held_out_fold: int) -> list[str]:
        return [vid for vid, f in self.assignment.items()
                if f != held_out_fold]


def make_folds(volume_ids: list[str], k: int, seed: int) -> FoldPlan:
    """Seeded shuffle then round-robin assignment at volume granularity;
    fold sizes differ by at most one."""
    ids = list(volume_ids)
    if k < 1:
        raise ValueError(f"fold count must be >= 1, got {k}")
    if k > len(ids):
        raise ValueError(
            f"cannot split {len(ids)} volumes into {k} folds")
    order = np.random.default_rng(np.random.PCG64(seed)).permutation(len(ids))
    assignment = {ids[int(pos)]: int(rank % k)
                  for rank, pos in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment, seed=seed)


# ---------------------------------------------------------------------------
# loss


def generalized_dice_loss(probs: Tensor, targets: Tensor,
                          eps: float = 1e-6) -> Tensor:
    """Multi-class overlap loss with inverse-square-volume class weights.

    With per-class sums over all pixels n of the batch,
    I_c = sum_n r_cn p_cn and D_c = sum_n (r_cn + p_cn), the loss is
    1 - 2 (sum_c w_c I_c + eps) / (sum_c w_c D_c + eps) where
    w_c = 1 / ((sum_n r_cn)^2 + eps). Perfect predictions land within
    O(eps) of zero; absent classes stay finite through the eps guards.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if probs.data.shape != targets.data.shape:
        raise ValueError(
            f"probs shape {probs.data.shape} does not match targets shape "
            f"{targets.data.shape}")
    if probs.data.ndim != 4:
        raise ValueError(
            f"expected (N, C, H, W) tensors, got {probs.data.shape}")

    p = probs.data
    r = targets.data
    axes = (0, 2, 3)
    r_sum = r.sum(axis=axes)
    weights = 1.0 / (r_sum * r_sum + eps)
    intersect = (p * r).sum(axis=axes)
    denom = p.sum(axis=axes) + r_sum
    num = float(weights @ intersect) + eps
    den = float(weights @ denom) + eps
    value = 1.0 - 2.0 * num / den

    def backward_fn(g: np.ndarray):
        if not probs.requires_grad:
            return (None, None)
        # d/dp_cn of -2(A+eps)/(B+eps): A picks up w_c r_cn, B picks up w_c
        coeff = -2.0 / den
        grad = coeff * (weights[:, None, None] * r.transpose(1, 0, 2, 3)
                        - (num / den) * weights[:, None, None])
        grad = grad.transpose(1, 0, 2, 3)
        return (float(g) * grad, None)

    return ad._record("generalized_dice_loss", (probs, targets),
                      np.asarray(value), backward_fn)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers and step counter, keyed by parameter
    name."""

    def __init__(self, store: ParamStore):
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}


def adam_step(store: ParamStore, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter with a gradient.

    Non-finite gradients halt training naming the parameter; parameters
    without a gradient this step keep their value.
    """
    beta1, beta2 = betas
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, tensor in store.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(
                f"non-finite gradient for parameter {name!r} at step "
                f"{state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensor.data = tensor.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# data loading


def load_training_slices(manifest_path, volume_ids: list[str],
                         config: ModelConfig):
    """Normalize, resize, and stack every slice of the listed volumes.

    Returns (images, labels): per-slice 3-channel inputs (3, S, S) and
    nearest-neighbour-resized per-slice class maps (S, S).
    """
    cases = {c["id"]: c for c in ctio.read_manifest(manifest_path)}
    missing = [vid for vid in volume_ids if vid not in cases]
    if missing:
        raise ValueError(f"manifest lacks volumes {missing}")
    images: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    size = config.image_size
    for vid in volume_ids:
        case = cases[vid]
        ct = ctio.read_nifti(case["ct_path"])
        gt = ctio.read_nifti(case["label_path"])
        if not isinstance(ct, ctio.CtVolume) or not isinstance(
                gt, ctio.LabelVolume):
            raise ValueError(
                f"case {vid}: ct_path must be a CT volume and label_path a "
                f"label volume")
        if ct.shape != gt.shape:
            raise ValueError(
                f"case {vid}: CT shape {ct.shape} does not match label "
                f"shape {gt.shape}")
        stack = ctio.resize_volume(ctio.normalize_hu(ct.data), size)
        lab = ctio.resize_labels_nearest(gt.data, size)
        for triple in ctio.make_triples(stack):
            images.append(triple.image)
            labels.append(lab[triple.center_index])
    if not images:
        raise ValueError("training set is empty")
    return images, labels


# ---------------------------------------------------------------------------
# the loop


def train_on_arrays(images: list[np.ndarray], labels: list[np.ndarray],
                    model_config: ModelConfig, train_config: TrainConfig,
                    log=None) -> tuple[ParamStore, dict]:
    """Train on pre-sliced arrays; returns the parameter store and a loss
    history {seed, epochs: [{epoch, mean_loss}]}.

    Every epoch reshuffles all training slices with the run's generator;
    a NaN loss aborts with the epoch and step recorded.
    """
    store = build_model(model_config, train_config.seed)
    state = AdamState(store)
    rng = np.random.default_rng(np.random.PCG64(train_config.seed))
    n = len(images)
    batch = train_config.batch_size
    num_classes = model_config.num_classes
    onehots = [ctio.labels_to_onehot(lab, num_classes) for lab in labels]

    history = []
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch):
            chosen = order[start:start + batch]
            xb = Tensor(np.stack([images[i] for i in chosen]))
            tb = Tensor(np.stack([onehots[i] for i in chosen]))
            store.zero_grads()
            probs = forward(store, xb)
            loss = generalized_dice_loss(probs, tb, eps=train_config.gdl_eps)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} step "
                    f"{start // batch}")
            ad.backward(loss)
            adam_step(store, state, train_config.learning_rate,
                      train_config.adam_betas, train_config.adam_eps)
            epoch_losses.append(value)
        mean_loss = float(np.mean(epoch_losses))
        history.append({"epoch": epoch, "mean_loss": mean_loss,
                        "step_losses": epoch_losses})
        if log is not None:
            log(epoch, mean_loss)
    return store, {"seed": train_config.seed, "epochs": history}


def train(manifest_path, model_config: ModelConfig,
          train_config: TrainConfig, fold_plan: FoldPlan,
          held_out_fold: int, log=None) -> tuple[ParamStore, dict]:
    """Train on every fold except `held_out_fold`."""
    if held_out_fold not in range(fold_plan.k):
        raise ValueError(
            f"held_out_fold {held_out_fold} outside 0..{fold_plan.k - 1}")
    train_ids = fold_plan.training_ids(held_out_fold)
    if not train_ids:
        raise ValueError("training set is empty for this fold plan")
    images, labels = load_training_slices(manifest_path, train_ids,
                                          model_config)
    store, history = train_on_arrays(images, labels, model_config,
                                     train_config, log=log)
    history["fold"] = held_out_fold
    history["training_volumes"] = train_ids
    return store, history


def infer_volume(store: ParamStore, volume: ctio.CtVolume,
                 batch_size: int = 10) -> ctio.LabelVolume:
    """Segment a CT volume slice-wise and rebuild it on the input grid."""
    config = store.config
    size = config.image_size
    stack = ctio.resize_volume(ctio.normalize_hu(volume.data), size)
    triples = ctio.make_triples(stack)
    probs: list[np.ndarray] = []
    with ad.no_grad():
        for start in range(0, len(triples), batch_size):
            chunk = triples[start:start + batch_size]
            xb = Tensor(np.stack([t.image for t in chunk]))
            out = forward(store, xb)
            probs.extend(out.data[i] for i in range(out.data.shape[0]))
    return ctio.reconstruct_volume(probs, volume)


def save_history(history: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2)
        fh.write("\n")
