"""Losses, optimizer, augmentation, and the training/search protocol.

Two losses carry the class imbalance of the dish images: a per-pixel
weighted cross-entropy and an unweighted cross-entropy mixed with a soft
Dice term per channel. Both consume post-softmax probabilities but return
the gradient with respect to the pre-softmax activations, which is the
numerically stable composite.

Training uses Adam, per-epoch reshuffling, random rotation augmentation,
and early stopping on the validation loss (patience in epochs). Model
selection across configurations uses the validation mAP from a k-fold
cross-validation, after which the winning configuration is retrained on
the full training-validation set.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import evalkit
from .dishgen import BACKGROUND_RGB
from .labels import NUM_CLASSES
from .tensor import Tensor, softmax_channels_vjp
from .unet import UNetConfig, UNetModel, build_unet, predict_mask

PROB_CLAMP = 1e-7
LOSS_KINDS = ("weighted_ce", "ce_soft_dice")
DICE_SMOOTHING = 1.0

# Fill for pixels rotated in from outside the canvas: the generator's
# outside-dish tone, normalized to [0, 1].
ROTATION_FILL = tuple(v / 255.0 for v in BACKGROUND_RGB)


@dataclasses.dataclass(frozen=True)
class ClassWeights:
    """Per-class pixel weights for the weighted cross-entropy."""

    background: float = 0.01
    bvg_plus: float = 0.25
    bvg_minus: float = 0.34
    border: float = 0.4

    def __post_init__(self):
        arr = self.as_array()
        if (arr < 0).any():
            raise ValueError("class weights must be nonnegative")
        if not (arr > 0).any():
            raise ValueError("at least one class weight must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.background, self.bvg_plus, self.bvg_minus, self.border],
            dtype=np.float64,
        )


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """One training run: architecture, loss, and optimization settings."""

    depth: int = 2
    batchnorm: bool = False
    base_channels: int = 16
    loss: str = "weighted_ce"
    class_weights: ClassWeights = dataclasses.field(default_factory=ClassWeights)
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    image_size: int = 128
    augment: bool = True

    def __post_init__(self):
        if self.depth not in (2, 4, 6):
            raise ValueError(f"depth must be 2, 4, or 6, got {self.depth}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            batchnorm=self.batchnorm,
        )


@dataclasses.dataclass
class TrainingHistory:
    train_loss: list = dataclasses.field(default_factory=list)
    val_loss: list = dataclasses.field(default_factory=list)
    val_map: list = dataclasses.field(default_factory=list)
    best_epoch: Optional[int] = None
    stop_reason: str = ""

    def append(self, train_loss: float, val_loss: float, val_map: float) -> None:
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_map.append(val_map)

    def num_epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_map"])
            for i in range(self.num_epochs()):
                writer.writerow(
                    [i, repr(self.train_loss[i]), repr(self.val_loss[i]), repr(self.val_map[i])]
                )


@dataclasses.dataclass
class Sample:
    """One labeled image: float32 (3, h, w) in [0, 1] plus a (h, w) class mask."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    n, h, w = labels.shape
    out = np.zeros((n, num_classes, h, w), dtype=np.float32)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1.0, axis=1)
    return out


def _check_labels(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 4:
        labels = labels.argmax(axis=1)
    if labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValueError(
            f"labels of shape {labels.shape} do not match probabilities {probs.shape}"
        )
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    return labels.astype(np.intp)


def weighted_ce(probs, labels, weights: ClassWeights = None):
    """Class-weighted cross-entropy, averaged over all pixels.

    Returns (loss, gradient with respect to the pre-softmax activations).
    The log sees probabilities clamped to [1e-7, 1 - 1e-7]; the gradient is
    the exact softmax composite w_y * (p - onehot) / n_pixels.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = _check_labels(p, labels)
    if weights is None:
        weights = ClassWeights()
    w = weights.as_array()
    n, c, h, wd = p.shape
    npix = n * h * wd
    p_true = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
    clamped = np.clip(p_true.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    wmap = w[labels]
    loss = float(-(wmap * np.log(clamped)).sum() / npix)
    grad = (p - one_hot(labels, c)) * wmap[:, None].astype(p.dtype) / npix
    return loss, Tensor(grad.astype(p.dtype, copy=False))


def soft_dice_per_channel(probs, target_one_hot, smoothing: float = DICE_SMOOTHING) -> np.ndarray:
    """Soft Dice coefficient of each channel over the whole batch."""
    p = (probs.data if isinstance(probs, Tensor) else np.asarray(probs)).astype(np.float64)
    g = np.asarray(target_one_hot, dtype=np.float64)
    inter = (p * g).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3))
    return (2.0 * inter + smoothing) / (denom + smoothing)


def ce_soft_dice(probs, labels, alpha: float = 1.0, beta: float = 1.0):
    """Unweighted cross-entropy plus mean per-channel soft Dice loss.

    loss = alpha * CE + beta * mean_c(1 - Dice_c). Returns (loss, gradient
    with respect to the pre-softmax activations). `labels` may be an
    integer mask or a one-hot tensor.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if alpha == 0 and beta == 0:
        raise ValueError("alpha and beta cannot both be zero")
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    labels = _check_labels(p, labels)
    n, c, h, w = p.shape
    npix = n * h * w
    g = one_hot(labels, c)

    p_true = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
    clamped = np.clip(p_true.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = float(-np.log(clamped).sum() / npix)

    p64 = p.astype(np.float64)
    inter = (p64 * g).sum(axis=(0, 2, 3))
    denom = p64.sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3))
    s = denom + DICE_SMOOTHING
    t = 2.0 * inter + DICE_SMOOTHING
    dice = t / s
    dice_loss = float((1.0 - dice).mean())

    loss = alpha * ce + beta * dice_loss

    grad_logits = alpha * (p - g) / npix
    if beta > 0:
        # d(1 - D_c)/dp_i = (T_c - 2 g_i S_c) / S_c^2, then through the
        # channel softmax per pixel.
        gp = (beta / c) * (t / (s * s))[None, :, None, None] - (
            (beta / c) * (2.0 / s)[None, :, None, None]
        ) * g
        grad_logits = grad_logits + softmax_channels_vjp(p64, gp)
    return loss, Tensor(grad_logits.astype(p.dtype, copy=False))


def make_loss(config: RunConfig) -> Callable:
    if config.loss == "weighted_ce":
        return lambda probs, labels: weighted_ce(probs, labels, config.class_weights)
    return lambda probs, labels: ce_soft_dice(probs, labels, config.alpha, config.beta)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    *,
    t: int,
) -> None:
    """One bias-corrected Adam update, applied to `params` in place."""
    if t < 1:
        raise ValueError("step counter t must be at least 1")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} "
                f"of shape {p.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _rotation_coeffs(angle_degrees: float) -> tuple[float, float]:
    c = math.cos(math.radians(angle_degrees))
    s = math.sin(math.radians(angle_degrees))
    # Snap right angles so 90-degree multiples stay exact index permutations.
    for v in (-1.0, 0.0, 1.0):
        if abs(c - v) < 1e-12:
            c = v
        if abs(s - v) < 1e-12:
            s = v
    return c, s


def rotate_augment(
    image: np.ndarray,
    mask: np.ndarray,
    angle_degrees: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    fill=ROTATION_FILL,
):
    """Rotate an image/mask pair about the canvas center.

    The image is sampled bilinearly, the mask with nearest-neighbor so
    labels are never blended. Pixels pulled from outside the canvas get the
    fill color and the background label. When `angle_degrees` is None the
    angle is drawn uniformly from [0, 360).
    """
    if angle_degrees is None:
        if rng is None:
            raise ValueError("an rng is required when the angle is sampled")
        angle_degrees = float(rng.uniform(0.0, 360.0))
    image = np.asarray(image)
    mask = np.asarray(mask)
    ch, h, w = image.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    c, s = _rotation_coeffs(angle_degrees)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xs - cx
    dy = ys - cy
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy

    out_img = np.empty_like(image)
    fill_arr = np.asarray(fill, dtype=image.dtype)

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0).astype(image.dtype if image.dtype.kind == "f" else np.float64)
    fy = (src_y - y0).astype(fx.dtype)

    def gather(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        return inside, yc, xc

    in00, y00, x00 = gather(y0, x0)
    in01, y01, x01 = gather(y0, x0 + 1)
    in10, y10, x10 = gather(y0 + 1, x0)
    in11, y11, x11 = gather(y0 + 1, x0 + 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    for k in range(ch):
        plane = image[k]
        fv = fill_arr[k] if fill_arr.ndim else fill_arr
        v00 = np.where(in00, plane[y00, x00], fv)
        v01 = np.where(in01, plane[y01, x01], fv)
        v10 = np.where(in10, plane[y10, x10], fv)
        v11 = np.where(in11, plane[y11, x11], fv)
        out_img[k] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    xn = np.rint(src_x).astype(np.int64)
    yn = np.rint(src_y).astype(np.int64)
    inside, yc, xc = gather(yn, xn)
    out_mask = np.where(inside, mask[yc, xc], 0).astype(mask.dtype)
    return out_img, out_mask


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a lower value."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0
        self._epoch = -1

    def update(self, value: float) -> bool:
        """Record one epoch's value; returns True when this is a new best."""
        self._epoch += 1
        if self.best is None or value < self.best:
            self.best = value
            self.best_epoch = self._epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _batched(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def pixel_accuracy(model: UNetModel, samples: Sequence[Sample], batch_size: int = 8) -> float:
    """Fraction of pixels whose predicted class matches the ground truth."""
    correct = 0
    total = 0
    for chunk in _batched(np.arange(len(samples)), batch_size):
        imgs = np.stack([samples[i].image for i in chunk])
        masks = np.stack([samples[i].mask for i in chunk])
        pred = predict_mask(model.forward(Tensor(imgs), mode="infer"))
        correct += int((pred == masks).sum())
        total += masks.size
    return correct / total


def evaluate_loss_and_map(
    model: UNetModel,
    samples: Sequence[Sample],
    loss_fn: Callable,
    batch_size: int,
    gt_instances=None,
):
    """Validation loss plus instance mAP of the argmax masks."""
    if gt_instances is None:
        gt_instances = [evalkit.extract_instances(s.mask) for s in samples]
    total = 0.0
    pred_sets = []
    for chunk in _batched(np.arange(len(samples)), batch_size):
        imgs = np.stack([samples[i].image for i in chunk])
        masks = np.stack([samples[i].mask for i in chunk])
        probs = model.forward(Tensor(imgs), mode="infer")
        loss, _ = loss_fn(probs, masks)
        total += loss * len(chunk)
        for m in predict_mask(probs):
            pred_sets.append(evalkit.extract_instances(m))
    val_loss = total / len(samples)
    val_map = evalkit.map_over_thresholds(pred_sets, gt_instances)
    return val_loss, val_map


def train(
    model: UNetModel,
    train_set: Sequence[Sample],
    val_set: Optional[Sequence[Sample]],
    config: RunConfig,
):
    """Fit the model; returns (model at its best epoch, TrainingHistory).

    Batches are reshuffled every epoch with a PRNG seeded from the config;
    each training image is rotated by a random angle when augmentation is
    on. Early stopping watches the validation loss and restores the
    weights of the best epoch. `val_set=None` disables validation and
    early stopping and simply runs `max_epochs` (used for the final
    retraining on the full training-validation set).
    """
    if not train_set:
        raise ValueError("training set must not be empty")
    if val_set is not None and not len(val_set):
        raise ValueError("validation set must not be empty (or pass None)")
    mult = 2 ** config.depth
    for s in train_set:
        if s.image.shape[1] % mult or s.image.shape[2] % mult:
            raise ValueError(
                f"sample {s.id!r} has size {s.image.shape[1:]} which is not a "
                f"multiple of {mult} required by depth {config.depth}"
            )

    rng = np.random.default_rng(config.seed)
    loss_fn = make_loss(config)
    state = AdamState()
    step = 0
    history = TrainingHistory()
    stopper = EarlyStopping(config.patience)
    params = {name: p.data for name, p in model.trainable_parameters()}
    best_state = model.snapshot()
    gt_val = (
        [evalkit.extract_instances(s.mask) for s in val_set] if val_set is not None else None
    )

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        seen = 0
        diverged = False
        for chunk in _batched(order, config.batch_size):
            imgs = []
            masks = []
            for i in chunk:
                s = train_set[i]
                if config.augment:
                    img, msk = rotate_augment(s.image, s.mask, rng=rng)
                else:
                    img, msk = s.image, s.mask
                imgs.append(img)
                masks.append(msk)
            x = Tensor(np.stack(imgs).astype(np.float32, copy=False))
            y = np.stack(masks)
            probs = model.forward(x, mode="train")
            loss, grad_logits = loss_fn(probs, y)
            if not math.isfinite(loss):
                diverged = True
                break
            model.backward_from_logits(grad_logits)
            grads = {name: p.grad for name, p in model.trainable_parameters()}
            step += 1
            adam_step(params, grads, state, config.lr, t=step)
            loss_sum += loss * len(chunk)
            seen += len(chunk)
        if diverged:
            history.stop_reason = "diverged"
            break
        train_loss = loss_sum / seen

        if val_set is None:
            history.append(train_loss, float("nan"), float("nan"))
            continue

        val_loss, val_map = evaluate_loss_and_map(
            model, val_set, loss_fn, config.batch_size, gt_val
        )
        if not math.isfinite(val_loss):
            history.append(train_loss, val_loss, val_map)
            history.stop_reason = "diverged"
            break
        history.append(train_loss, val_loss, val_map)
        if stopper.update(val_loss):
            best_state = model.snapshot()
        if stopper.should_stop:
            history.stop_reason = "early_stopping"
            break
    if not history.stop_reason:
        history.stop_reason = "max_epochs"

    if val_set is None:
        history.best_epoch = history.num_epochs() - 1 if history.num_epochs() else None
        return model, history

    history.best_epoch = stopper.best_epoch
    model.load_state(best_state)
    return model, history


# ---------------------------------------------------------------------------
# cross-validation and grid search
# ---------------------------------------------------------------------------


def kfold_split(ids: Sequence, k: int = 4, seed: int = 0):
    """Deterministic shuffle, then k near-equal folds; each id validates once."""
    if k < 2:
        raise ValueError("k must be at least 2")
    ids = list(ids)
    if len(ids) < k:
        raise ValueError(f"need at least {k} ids for {k} folds, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds = np.array_split(order, k)
    splits = []
    for i in range(k):
        val_idx = folds[i]
        train_idx = np.concatenate([folds[j] for j in range(k) if j != i])
        splits.append(
            ([ids[j] for j in train_idx], [ids[j] for j in val_idx])
        )
    return splits


def default_grid(
    base: Optional[RunConfig] = None,
    depths=(2, 4, 6),
    batchnorm=(True, False),
    losses=LOSS_KINDS,
    lrs=(1e-3, 1e-4, 1e-5),
) -> list[RunConfig]:
    """The full hyperparameter lattice: 3 depths x 2 batchnorm x 2 losses x 3 lrs."""
    if base is None:
        base = RunConfig()
    grid = []
    for depth in depths:
        for bn in batchnorm:
            for loss in losses:
                for lr in lrs:
                    grid.append(
                        dataclasses.replace(base, depth=depth, batchnorm=bn, loss=loss, lr=lr)
                    )
    return grid


def _derived_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


@dataclasses.dataclass
class GridEntry:
    config: RunConfig
    fold_maps: list
    fold_best_epochs: list
    mean_map: Optional[float]
    diverged_folds: int

    def sort_key(self):
        return -self.mean_map if self.mean_map is not None else math.inf


@dataclasses.dataclass
class GridSearchResult:
    entries: list  # sorted best-first
    best_config: Optional[RunConfig]
    final_model: Optional[UNetModel]
    final_epochs: int


def grid_search(
    grid: Sequence[RunConfig],
    dataset: Sequence[Sample],
    k: int = 4,
    seed: int = 0,
    retrain: bool = True,
    progress: Optional[Callable[[str], None]] = None,
) -> GridSearchResult:
    """Rank configurations by mean validation mAP over a k-fold CV.

    Every (config, fold) run gets its own PRNG stream derived from
    (seed, config index, fold index). A diverged fold is recorded and
    skipped in the mean, never fatal. With `retrain=True` the winner is
    retrained on the whole dataset for the average number of epochs its
    CV folds ran before their best validation loss.
    """
    if not grid:
        raise ValueError("the configuration grid must not be empty")
    say = progress or (lambda msg: None)
    splits = kfold_split(list(range(len(dataset))), k=k, seed=seed)
    entries = []
    for ci, cfg in enumerate(grid):
        fold_maps = []
        best_epochs = []
        diverged = 0
        for fi, (train_idx, val_idx) in enumerate(splits):
            run_seed = _derived_seed(seed, ci, fi)
            run_cfg = dataclasses.replace(cfg, seed=run_seed)
            model = build_unet(run_cfg.unet_config(), run_seed)
            tr = [dataset[i] for i in train_idx]
            va = [dataset[i] for i in val_idx]
            _, hist = train(model, tr, va, run_cfg)
            if hist.stop_reason == "diverged" or hist.best_epoch is None:
                diverged += 1
                say(f"config {ci} fold {fi}: diverged")
                continue
            fold_maps.append(hist.val_map[hist.best_epoch])
            best_epochs.append(hist.best_epoch)
            say(
                f"config {ci} fold {fi}: best epoch {hist.best_epoch}, "
                f"val mAP {fold_maps[-1]:.4f}"
            )
        mean_map = float(np.mean(fold_maps)) if fold_maps else None
        entries.append(GridEntry(cfg, fold_maps, best_epochs, mean_map, diverged))
    entries.sort(key=GridEntry.sort_key)

    best = entries[0]
    if best.mean_map is None:
        return GridSearchResult(entries, None, None, 0)

    final_model = None
    final_epochs = 0
    if retrain:
        final_epochs = max(1, int(round(np.mean(best.fold_best_epochs))) + 1)
        run_seed = _derived_seed(seed, len(grid), 0)
        final_cfg = dataclasses.replace(
            best.config, seed=run_seed, max_epochs=final_epochs
        )
        final_model = build_unet(final_cfg.unet_config(), run_seed)
        say(f"retraining winner on {len(dataset)} samples for {final_epochs} epochs")
        final_model, _ = train(final_model, list(dataset), None, final_cfg)
    return GridSearchResult(entries, best.config, final_model, final_epochs)
