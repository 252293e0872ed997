"""Training: class-scaled cross-entropy with L2, SGD with momentum, augmentation.

The loss scales each pixel's cross-entropy by one minus its class's share of
the batch, so small regions (tumors) are not drowned out by large ones, and
adds an L2 penalty over convolution kernels only; biases and normalization
affine terms are exempt since penalizing them would fight the normalization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .model import ModelParams
from .baselines import normalize_ct_display, normalize_pet_display
from .tensor import DTYPE, Tensor, backward, no_grad, zero_grads
from .weights_io import save_weights

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    lambda_: float = 0.1
    num_classes: int = 4

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")


def class_scale(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class scale 1 - n_r / N over the batch's pixel counts."""
    if labels.size == 0:
        raise ContractError("class_scale over an empty batch")
    counts = np.bincount(labels.reshape(-1).astype(np.int64), minlength=num_classes)
    if counts.size > num_classes:
        raise DataError(f"label outside 0..{num_classes - 1} present in batch")
    return (1.0 - counts / labels.size).astype(DTYPE)


def scaled_ce_loss(prob: Tensor, labels: np.ndarray, params: ModelParams | None,
                   cfg: LossConfig) -> Tensor:
    """Mean of S(o)*E(o) over batch pixels plus lambda * sum of squared kernels.

    ``prob`` must come from the pixel-wise softmax; log arguments are floored
    at 1e-12 so saturated predictions stay finite.
    """
    if labels.shape != prob.shape[:-1]:
        raise ContractError(f"labels shape {labels.shape} does not match prob {prob.shape}")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise DataError(
            f"labels must lie in 0..{cfg.num_classes - 1}, got range "
            f"[{labels.min()}, {labels.max()}]")

    scales = class_scale(labels, cfg.num_classes)
    s_map = scales[labels]
    idx = labels[..., None].astype(np.int64)
    p_true = np.take_along_axis(prob.data, idx, axis=-1)[..., 0]
    clipped = np.maximum(p_true, np.float32(LOG_FLOOR))
    n = labels.size
    ce_value = np.float32((s_map.astype(np.float64) * -np.log(clipped)).mean())

    def _bw(g):
        dprob = np.zeros_like(prob.data)
        dtrue = np.where(p_true > LOG_FLOOR, -s_map / (clipped * n), 0.0).astype(DTYPE)
        np.put_along_axis(dprob, idx, (g * dtrue)[..., None], axis=-1)
        return (dprob,)

    ce = Tensor(ce_value, parents=(prob,), backward=_bw)

    if params is None or cfg.lambda_ == 0.0:
        return ce
    reg = None
    for kernel in params.kernels():
        term = ops.sq_sum(kernel)
        reg = term if reg is None else ops.add(reg, term)
    if reg is None:
        return ce
    return ops.add(ce, ops.scale(reg, cfg.lambda_))


@dataclass
class OptimizerState:
    learning_rate: float = 0.0001
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_momentum_step(params: list, opt: OptimizerState) -> None:
    """v <- momentum*v + grad; w <- w - lr*v; gradients are zeroed afterwards."""
    lr = np.float32(opt.learning_rate)
    m = np.float32(opt.momentum)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in {p.name}")
        v = opt.velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
            opt.velocity[p.name] = v
        v *= m
        v += p.grad
        p.data -= lr * v
        p.zero_grad()


@dataclass
class AugmentConfig:
    crop_fraction: float = 0.9
    flip_probability: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.crop_fraction <= 1.0):
            raise ConfigError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ConfigError(f"flip_probability must lie in [0, 1]")


def augment_sample(ct: np.ndarray, pet: np.ndarray, labels: np.ndarray,
                   cfg: AugmentConfig, rng: np.random.Generator):
    """Random crop (resized back, nearest neighbor) and horizontal flip.

    One geometric transform is drawn and applied identically to the CT slice,
    the PET slice, and the label map, so labels stay exact.
    """
    h, w = labels.shape
    ch = max(1, round(h * cfg.crop_fraction))
    cw = max(1, round(w * cfg.crop_fraction))
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    ys = oy + (np.arange(h) * ch // h)
    xs = ox + (np.arange(w) * cw // w)
    flip = rng.random() < cfg.flip_probability
    if flip:
        xs = xs[::-1]

    def apply(img):
        return np.ascontiguousarray(img[np.ix_(ys, xs)])

    return apply(ct), apply(pet), apply(labels)


def make_inputs(variant: str, slices: list):
    """Per-variant network inputs: (ct[n,h,w,1], pet[n,h,w,1], labels[n,h,w]).

    The fused-input network consumes display-normalized images; all others see
    CT grayscale as-is and PET in SUV units.
    """
    cts, pets, labs = [], [], []
    for s in slices:
        if variant == "fs":
            cts.append(normalize_ct_display(s.ct))
            pets.append(normalize_pet_display(s.pet_suv))
        else:
            cts.append(s.ct.astype(DTYPE))
            pets.append(s.pet_suv.astype(DTYPE))
        labs.append(s.labels)
    ct = np.stack(cts)[..., None]
    pet = np.stack(pets)[..., None]
    return ct, pet, np.stack(labs).astype(np.int64)


@dataclass
class TrainConfig:
    batch_size: int = 5
    epochs: int = 500
    learning_rate: float = 0.0001
    momentum: float = 0.9
    lambda_: float = 0.1
    augment: bool = True
    crop_fraction: float = 0.9
    flip_probability: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 disables

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    pixel_accuracy: float
    wall_seconds: float


def train(model, slices: list, cfg: TrainConfig, out_dir: str | None = None) -> list:
    """Train ``model`` in place on ``slices``; returns per-epoch statistics.

    Mini-batches are drawn from a seeded shuffle each epoch. On divergence the
    last checkpoint (when checkpointing is on) is left in place and a
    DivergenceError propagates.
    """
    ct_all, pet_all, lab_all = make_inputs(model.variant, slices)
    n = ct_all.shape[0]
    loss_cfg = LossConfig(lambda_=cfg.lambda_, num_classes=model.config.num_classes)
    opt = OptimizerState(learning_rate=cfg.learning_rate, momentum=cfg.momentum)
    aug_cfg = AugmentConfig(cfg.crop_fraction, cfg.flip_probability)
    rng = np.random.default_rng(cfg.seed)
    params = model.params.parameters()
    zero_grads(params)
    log: list[EpochStats] = []

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        correct = 0
        total = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ct, pet, lab = ct_all[batch], pet_all[batch], lab_all[batch]
            if cfg.augment:
                ct, pet, lab = ct.copy(), pet.copy(), lab.copy()
                for i in range(len(batch)):
                    c2, p2, l2 = augment_sample(ct[i, :, :, 0], pet[i, :, :, 0],
                                                lab[i], aug_cfg, rng)
                    ct[i, :, :, 0], pet[i, :, :, 0], lab[i] = c2, p2, l2
            prob, _ = model.forward(Tensor(ct), Tensor(pet), mode="train")
            loss = scaled_ce_loss(prob, lab, model.params, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}")
            backward(loss)
            sgd_momentum_step(params, opt)
            losses.append(value)
            pred = prob.data.argmax(axis=-1)
            correct += int((pred == lab).sum())
            total += lab.size
        stats = EpochStats(epoch, float(np.mean(losses)), correct / total,
                           time.perf_counter() - t0)
        log.append(stats)
        if out_dir and cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
            save_weights(f"{out_dir}/checkpoint_{epoch:04d}.weights",
                         model.params.state_arrays(), variant=model.variant)
    return log


def write_training_log(path: str, log: list) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,pixel_accuracy,wall_seconds\n")
        for row in log:
            fh.write(f"{row.epoch},{row.mean_loss:.6f},{row.pixel_accuracy:.6f},"
                     f"{row.wall_seconds:.3f}\n")


def predict_probs(model, slices: list, batch_size: int = 8) -> np.ndarray:
    """Inference-mode probability maps for a list of slices, [n,h,w,R+1]."""
    ct_all, pet_all, _ = make_inputs(model.variant, slices)
    outs = []
    with no_grad():
        for start in range(0, ct_all.shape[0], batch_size):
            prob, _ = model.forward(Tensor(ct_all[start:start + batch_size]),
                                    Tensor(pet_all[start:start + batch_size]),
                                    mode="infer")
            outs.append(prob.data)
    return np.concatenate(outs, axis=0)


def pixel_accuracy(model, slices: list) -> float:
    prob = predict_probs(model, slices)
    labels = np.stack([s.labels for s in slices])
    return float((prob.argmax(axis=-1) == labels).mean())


def two_fold_validate(studies: list, make_model, cfg: TrainConfig, seed: int = 0):
    """Split studies into two study-disjoint halves; train on each, validate on the other.

    ``studies`` is a list of slice lists. Returns two (train_accuracy,
    validation_accuracy) pairs. Halves may hold different slice counts.
    """
    if len(studies) < 2:
        raise ContractError("two-fold validation needs at least 2 studies")
    order = np.random.default_rng(seed).permutation(len(studies))
    half = len(studies) // 2
    groups = [[studies[i] for i in order[:half]], [studies[i] for i in order[half:]]]
    results = []
    for fold, train_group in enumerate(groups):
        val_group = groups[1 - fold]
        train_slices = [s for study in train_group for s in study]
        val_slices = [s for study in val_group for s in study]
        model = make_model(fold)
        train(model, train_slices, cfg)
        results.append((pixel_accuracy(model, train_slices),
                        pixel_accuracy(model, val_slices)))
    return results
