"""SGD training loop with cosine-annealed learning rate and early stopping,
binary cross-entropy on the single-logit head, and ACC/AUROC metrics."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from math import cos, pi

import numpy as np

from . import autograd as ag
from . import ops, weights
from .augment import AugmentConfig, augment_image
from .data import LabeledDataset
from .errors import ConfigError, MetricError, NumericError
from .model import FakeImageDetector

# Paper-scale settings train for hours; the desk profile is the default.
PROFILES = {
    "desk": {"batch_size": 32, "max_epochs": 60},
    "paper": {"batch_size": 128, "max_epochs": 300},
}


@dataclass
class TrainConfig:
    lr0: float = 0.3
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 20
    seed: int = 0
    improve_eps: float = 1e-6

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def for_profile(cls, profile, **overrides):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}, expected one of {sorted(PROFILES)}")
        merged = {**PROFILES[profile], **overrides}
        return cls(**merged)


@dataclass
class Metrics:
    acc: float
    auroc: float | None
    loss: float


def cosine_lr(epoch, max_epochs, lr0):
    """lr0 * (1 + cos(pi * epoch / max_epochs)) / 2; lr0 at 0, zero at the end."""
    if not 0 <= epoch <= max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr0 * (1 + cos(pi * epoch / max_epochs)) / 2


class SGDMomentum:
    """v <- momentum * v - lr * grad; p <- p + v. Frozen parameters untouched."""

    def __init__(self, params, momentum=0.9):
        self.momentum = momentum
        self.params = [p for p in params if p.trainable]
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr):
        for p in self.params:
            if p.grad.shape != p.value.shape:
                raise ConfigError(f"gradient shape {p.grad.shape} != value shape {p.value.shape} for {p.name}")
            v = self.velocity[p.name]
            v *= self.momentum
            v -= lr * p.grad
            p.value += v


def bce_mean(probs, labels):
    """Mean BCE with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-7, 1 - 1e-7)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def accuracy(scores, labels):
    """Fraction correct at the 0.5 threshold."""
    predicted = np.asarray(scores) > 0.5
    return float((predicted == (np.asarray(labels) == 1)).mean())


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(fake score > real score), ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined when only one class is present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    s = scores[order]
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average rank of the tie run
        i = j
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(model: FakeImageDetector, dataset: LabeledDataset, batch_size=64) -> Metrics:
    """Rescale-only preprocessing, deterministic; AUROC is None if the set
    has a single class (accuracy and loss are still reported)."""
    scores = model.predict_proba(dataset.images, batch_size=batch_size)
    try:
        area = auroc(scores, dataset.labels)
    except MetricError:
        area = None
    return Metrics(acc=accuracy(scores, dataset.labels), auroc=area, loss=bce_mean(scores, dataset.labels))


def _augmented_batch(dataset, picks, epoch, seed, aug, threads):
    if aug is None:
        return dataset.images[picks]
    out = [None] * len(picks)

    def one(k):
        idx = int(picks[k])
        rng = np.random.default_rng([seed, 2, epoch, idx])
        out[k] = augment_image(dataset.images[idx], aug, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(len(picks))))
    else:
        for k in range(len(picks)):
            one(k)
    return np.stack(out)


def _first_nonfinite_param(model):
    for p in model.parameters():
        if not np.all(np.isfinite(p.value)):
            return p.name
    return None


def _divergence_error(model, epoch, cause=None):
    culprit = _first_nonfinite_param(model)
    if culprit:
        detail = f"first non-finite parameter: {culprit}"
    elif cause is not None:
        detail = str(cause)
    else:
        detail = "parameters are finite; the loss overflowed"
    return NumericError(f"training diverged at epoch {epoch + 1}; {detail}")


def train_loop(model, train_set, val_set, cfg: TrainConfig, aug: AugmentConfig | None = None, threads=1):
    """Train until the validation loss stops improving.

    Shuffles per epoch with a seeded stream, anneals the learning rate per
    epoch, snapshots the best-validation-loss weights (moving statistics
    included) and restores them on exit. Returns (model, history rows).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    optimizer = SGDMomentum(model.parameters(), cfg.momentum)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    history = []
    best_loss = np.inf
    best_state = None
    since_improve = 0
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr0)
        perm = shuffle_rng.permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(perm), cfg.batch_size):
            picks = perm[start : start + cfg.batch_size]
            xb = _augmented_batch(train_set, picks, epoch, cfg.seed, aug, threads)
            try:
                logits = model.logits_var(xb, mode="train")
                loss = ag.bce_with_logits(logits, train_set.labels[picks].reshape(-1, 1))
                ag.backward(loss)
            except NumericError as exc:
                raise _divergence_error(model, epoch, exc) from exc
            optimizer.step(lr)
            batch_losses.append(float(loss.value))
        train_loss = float(np.mean(batch_losses))

        val = evaluate(model, val_set)
        history.append(
            {
                "epoch": epoch + 1,
                "lr": lr,
                "train_loss": train_loss,
                "val_loss": val.loss,
                "val_acc": val.acc,
                "val_auroc": val.auroc if val.auroc is not None else float("nan"),
            }
        )
        if not (np.isfinite(train_loss) and np.isfinite(val.loss)):
            raise _divergence_error(model, epoch)

        if best_loss - val.loss >= cfg.improve_eps:
            best_loss = val.loss
            best_state = {p.name: p.value.copy() for p in model.parameters()}
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.patience:
                break

    if best_state is not None:
        for p in model.parameters():
            p.value = best_state[p.name]
            p.grad = np.zeros_like(p.value)
    return model, history


def fine_tune(
    backbone_path,
    finetune_set,
    val_set,
    stages=3,
    n_blocks=4,
    cfg: TrainConfig | None = None,
    aug: AugmentConfig | None = None,
    seed=None,
    attention_branch=True,
    head_init="zeros",
    threads=1,
):
    """Attach the trainable branches to stored backbone weights and train.

    The backbone is frozen throughout; only the attention tower, the
    inverted-residual blocks and the head receive updates.
    """
    cfg = cfg or TrainConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if aug is None:
        aug = AugmentConfig()
    model = weights.assemble_from_backbone(
        backbone_path,
        stages=stages,
        n_blocks=n_blocks,
        seed=cfg.seed,
        attention_branch=attention_branch,
        head_init=head_init,
    )
    model, history = train_loop(model, finetune_set, val_set, cfg, aug=aug, threads=threads)
    return model, history
