"""Objectives, optimizers, the exponential schedule and the epoch loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import metrics as M
from .model import MULTILABEL_CONT, check_geometry, mcf_forward
from .tensor import RngState, Tensor, clip, log, mul, no_grad, sigmoid, square

PROB_CLAMP = 1e-7


class UsageError(RuntimeError):
    pass


# -- losses ------------------------------------------------------------------
def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of ``sigmoid(logits)`` clamped to [1e-7, 1 - 1e-7]."""
    logits = F.to_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"label shape {y.shape} != logit shape {logits.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("binary labels must be 0 or 1")
    p = clip(sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = mul(log(p), y) + mul(log(1.0 - p), 1.0 - y)
    return -ll.mean()


def mse(pred, target):
    pred = F.to_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {pred.shape}")
    return square(pred - t).mean()


def emotic_loss(disc_logits, cont, y_disc, y_cont, lambda1=0.8, lambda2=0.2):
    """Weighted sum of multilabel BCE and AVD regression MSE, batch-averaged."""
    return bce_with_logits(disc_logits, y_disc) * lambda1 + mse(cont, y_cont) * lambda2


def caer_loss(disc_logits, y):
    """Multi-class cross-entropy against integer class indices, batch-averaged."""
    disc_logits = F.to_tensor(disc_logits)
    y = np.asarray(y)
    n = disc_logits.shape[-1]
    if y.shape != disc_logits.shape[:-1]:
        raise ValueError(f"class index shape {y.shape} != batch shape {disc_logits.shape[:-1]}")
    if ((y < 0) | (y >= n)).any():
        raise ValueError(f"class index out of range [0, {n})")
    onehot = np.zeros(disc_logits.shape, dtype=disc_logits.dtype)
    np.put_along_axis(onehot, y[..., None].astype(np.int64), 1.0, axis=-1)
    nll = -mul(F.log_softmax(disc_logits), onehot).sum(axis=-1)
    return nll.mean()


# -- optimizers ----------------------------------------------------------------
class Optimizer:
    def __init__(self, params):
        self.params = list(params)
        self.t = 0

    def _grads(self):
        for p in self.params:
            if not p.trainable:
                continue
            if p.grad is None or p.grad.shape != p.shape:
                raise UsageError(f"parameter {p!r} has no gradient to apply")
            yield p

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class SGD(Optimizer):
    def __init__(self, params, momentum=0.9):
        super().__init__(params)
        self.momentum = momentum
        self.buf = {}

    def step(self, lr):
        self.t += 1
        for p in self._grads():
            g = p.grad
            if self.momentum:
                b = self.buf.get(id(p))
                b = g.copy() if b is None else self.momentum * b + g
                self.buf[id(p)] = b
                g = b
            p.data -= (lr * g).astype(p.dtype)


class Adam(Optimizer):
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self._grads():
            g = p.grad
            m = self.m.get(id(p), 0.0) * b1 + (1 - b1) * g
            v = self.v.get(id(p), 0.0) * b2 + (1 - b2) * g * g
            self.m[id(p)], self.v[id(p)] = m, v
            if self.weight_decay:
                p.data -= (lr * self.weight_decay * p.data).astype(p.dtype)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class AdamW(Adam):
    """Adam with decoupled weight decay ``p <- p - lr * wd * p``."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        super().__init__(params, beta1, beta2, eps, weight_decay)


def make_optimizer(kind, params, momentum=0.9, weight_decay=0.01):
    if kind == "sgd":
        return SGD(params, momentum=momentum)
    if kind == "adam":
        return Adam(params)
    if kind == "adamw":
        return AdamW(params, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def exp_schedule(lr0, gamma, epoch):
    return lr0 * gamma ** epoch


# -- training loop -------------------------------------------------------------
@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr0: float = 2e-5
    gamma: float = 1.0
    batch_size: int = 32
    epochs: int = 50
    lambda1: float = 0.8
    lambda2: float = 0.2
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.01
    frozen: tuple = ()
    restore_best: bool = True

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        if self.optimizer not in ("sgd", "adam", "adamw"):
            raise ValueError(f"optimizer must be sgd, adam or adamw, got {self.optimizer!r}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    metrics: dict = field(default_factory=dict)

    def to_json(self):
        val = None if self.val_loss is None or math.isnan(self.val_loss) else self.val_loss
        return json.dumps({"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss,
                           "val_loss": val, "metrics": self.metrics})


@dataclass
class TrainHistory:
    """Per-epoch records; serialised as ``#``-comment header lines then JSON lines."""

    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict = None

    @property
    def lrs(self):
        return [r.lr for r in self.records]

    @property
    def train_losses(self):
        return [r.train_loss for r in self.records]

    def to_text(self, timestamp=None):
        lines = ["# mcf-history v1"]
        if timestamp:
            lines.append(f"# timestamp: {timestamp}")
        lines.append(f"# best_epoch: {self.best_epoch}")
        lines.extend(r.to_json() for r in self.records)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        hist = cls()
        for line in text.splitlines():
            if line.startswith("# best_epoch:"):
                hist.best_epoch = int(line.split(":", 1)[1])
            elif line and not line.startswith("#"):
                hist.records.append(EpochRecord(**json.loads(line)))
        return hist


def batch_loss(model, out, bundle, idx, cfg):
    if model.config.task == MULTILABEL_CONT:
        return emotic_loss(out.disc_logits, out.cont, bundle.y_disc[idx], bundle.y_cont[idx],
                           cfg.lambda1, cfg.lambda2)
    return caer_loss(out.disc_logits, bundle.y_class[idx])


def predict(model, bundle, batch_size=256):
    """Eval-mode outputs for a whole bundle as numpy arrays ``(disc, cont or None)``."""
    disc, cont = [], []
    with no_grad():
        for start in range(0, len(bundle), batch_size):
            idx = np.arange(start, min(start + batch_size, len(bundle)))
            out = mcf_forward(model, bundle.batch(idx), "eval")
            disc.append(out.disc_logits.data)
            if out.cont is not None:
                cont.append(out.cont.data)
    n = model.config.n_disc
    disc = np.concatenate(disc) if disc else np.zeros((0, n), np.float32)
    if model.config.task != MULTILABEL_CONT:
        return disc, None
    return disc, np.concatenate(cont) if cont else np.zeros((0, 3), np.float32)


def evaluate(model, bundle, cfg=None, batch_size=256):
    """Return ``(mean loss, EvalReport)`` of the model on a bundle in eval mode."""
    cfg = cfg or TrainConfig()
    disc, cont = predict(model, bundle, batch_size)
    if model.config.task == MULTILABEL_CONT:
        with no_grad():
            loss = emotic_loss(Tensor(disc), Tensor(cont), bundle.y_disc, bundle.y_cont,
                               cfg.lambda1, cfg.lambda2).item()
        report = M.multilabel_report(disc, bundle.y_disc, cont, bundle.y_cont)
    else:
        with no_grad():
            loss = caer_loss(Tensor(disc), bundle.y_class).item()
        report = M.single_label_report(disc, bundle.y_class, model.config.n_disc)
    return loss, report


def fit(model, train_set, val_set, cfg, log=None):
    """Train ``model`` in place and return its :class:`TrainHistory`.

    The train set is reshuffled every epoch from a seeded stream; the last
    partial batch is kept. Validation runs after every epoch when ``val_set``
    is non-empty; the parameters with the lowest validation loss (train loss
    when there is no validation set) are kept in ``history.best_state`` and
    loaded back at the end if ``cfg.restore_best``.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    for bundle in (train_set, val_set):
        if bundle is not None and len(bundle):
            check_geometry(model.config, bundle.batch(np.arange(1)))
            if bundle.header.n_disc != model.config.n_disc:
                raise ValueError(
                    f"n_disc: bundle has {bundle.header.n_disc}, model expects {model.config.n_disc}")
    model.set_frozen(cfg.frozen)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    drop_rng = RngState(cfg.seed + 2)
    history = TrainHistory()
    best = math.inf
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = exp_schedule(cfg.lr0, cfg.gamma, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            out = mcf_forward(model, train_set.batch(idx), "train", drop_rng)
            loss = batch_loss(model, out, train_set, idx, cfg)
            loss.backward()
            opt.step(lr)
            total += loss.item() * len(idx)
        train_loss = total / n
        if val_set is not None and len(val_set):
            val_loss, report = evaluate(model, val_set, cfg)
            metrics = report.summary()
            score = val_loss
        else:
            val_loss, metrics, score = float("nan"), {}, train_loss
        history.records.append(EpochRecord(epoch, lr, train_loss, val_loss, metrics))
        if score < best:
            best = score
            history.best_epoch = epoch
            history.best_state = model.state_dict()
        if log is not None:
            log(history.records[-1])
    if cfg.restore_best and history.best_state is not None:
        model.load_state_dict(history.best_state)
    return history

