"""Cross-entropy training with SGD + momentum."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import InvertibleBatchNorm, ModeError

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    lr_schedule: str = "constant"  # or "step"
    lr_decay: float = 0.1
    lr_every: int = 50
    shuffle: bool = True

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch statistics")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_schedule == "step" and self.lr_every < 1:
            raise ValueError("step schedule needs lr_every >= 1")

    def lr_at(self, epoch):
        if self.lr_schedule == "step":
            return self.learning_rate * self.lr_decay ** (epoch // self.lr_every)
        return self.learning_rate


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    final_train_accuracy: float | None = None
    final_eval_accuracy: float | None = None
    checkpoint: str | None = None

    def to_lines(self):
        lines = []
        for rec in self.epochs:
            lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()))
        lines.append(f"final train_accuracy={_fmt(self.final_train_accuracy)} "
                     f"eval_accuracy={_fmt(self.final_eval_accuracy)}")
        return lines

    def to_dict(self):
        return asdict(self)


def _fmt(v):
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over the batch, log-sum-exp stabilized.

    ``logits`` is ``N x K`` (or a single length-``K`` vector).
    """
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels))
    N, K = logits.shape
    if labels.shape != (N,):
        raise ad.ShapeError(f"need {N} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    y = logits.data.astype(np.float64)
    shifted = y - y.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(logz - shifted[rows, labels]))
    probs = np.exp(shifted - logz[:, None])
    probs[rows, labels] -= 1.0
    dlogits = (probs / N).astype(logits.dtype)
    out = np.asarray(loss, dtype=logits.dtype)
    return ad.apply_op(out, (logits,), lambda g: (dlogits * g,), "cross_entropy")


def sgd_step(params, grads, velocities, lr, momentum):
    """One momentum step: ``v <- momentum v + g``, ``p <- p - lr v``.

    Returns new ``(params, velocities)`` lists; inputs are untouched.
    """
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocities, strict=True):
        g = np.zeros(p.shape, dtype=p.dtype) if g is None else np.asarray(g)
        if g.shape != p.shape or v.shape != p.shape:
            raise ad.ShapeError(f"sgd shapes differ: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = (momentum * v + g).astype(p.dtype)
        new_v.append(v)
        new_p.append(Tensor(p.data - p.dtype.type(lr) * v, requires_grad=True, dtype=p.dtype))
    return new_p, new_v


class SGD:
    """Stateful wrapper that writes updated tensors back into their modules."""

    def __init__(self, module, momentum=0.9):
        self.slots = module.parameter_slots()
        self.momentum = momentum
        self.velocity = [np.zeros(m.params[k].shape, dtype=m.params[k].dtype) for m, k in self.slots]

    def step(self, lr):
        params = [m.params[k] for m, k in self.slots]
        grads = [p.grad for p in params]
        new_p, self.velocity = sgd_step(params, grads, self.velocity, lr, self.momentum)
        for (m, k), p in zip(self.slots, new_p):
            m.params[k] = p


def _batches(n, batch_size, order):
    starts = list(range(0, n, batch_size))
    for s in starts:
        idx = order[s:s + batch_size]
        if len(idx) < 2:
            continue  # a lone sample has no batch statistics
        yield idx


def evaluate(net, dataset, chunk=1024):
    """Return ``(accuracy, mean cross-entropy)`` of an eval-mode net."""
    if net.training:
        raise ModeError("evaluate expects an eval-mode net")
    X, y = dataset.features, dataset.labels
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct, total_loss = 0, 0.0
    for s in range(0, len(y), chunk):
        logits = net(X[s:s + chunk]).data
        yb = y[s:s + chunk]
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        total_loss += cross_entropy(Tensor(logits), yb).item() * len(yb)
    return correct / len(y), total_loss / len(y)


def finalize_running_stats(net, dataset, batch_size, order=None):
    """One train-mode pass that sets every running statistic to the average of batch statistics.

    Pass a shuffled ``order`` when the dataset is stored class by class;
    otherwise every batch is single-class and the averaged variance
    understates the population variance.
    """
    bns = [m for m in net.modules() if isinstance(m, InvertibleBatchNorm)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.momentum = None
        bn.reset_running_stats()
    net.train()
    try:
        order = np.arange(len(dataset.labels)) if order is None else np.asarray(order)
        for idx in _batches(len(order), batch_size, order):
            net.forward_features(dataset.features[idx])
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m
        net.eval()


def train(net, dataset, config: TrainConfig, eval_dataset=None, progress=None) -> TrainReport:
    """Fit ``net`` in place; deterministic for a fixed ``config.seed``."""
    config.validate()
    X, y = dataset.features, dataset.labels
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any(y >= net.spec.class_count) or np.any(y < 0):
        raise ValueError("dataset labels exceed the network's class count")
    rng = np.random.default_rng(config.seed)
    opt = SGD(net, config.momentum)
    report = TrainReport()

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        net.train()
        losses, counts = [], []
        for step, idx in enumerate(_batches(n, config.batch_size, order)):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = cross_entropy(net(X[idx]), y[idx])
                    loss.backward()
                    opt.step(lr)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch + 1}, step {step}: {exc}") from None
            losses.append(loss.item())
            counts.append(len(idx))
        net.eval()
        rec = {"epoch": epoch + 1, "lr": lr,
               "train_loss": float(np.average(losses, weights=counts)),
               "train_accuracy": evaluate(net, dataset)[0]}
        rec["eval_accuracy"] = evaluate(net, eval_dataset)[0] if eval_dataset is not None else None
        report.epochs.append(rec)
        log.debug("epoch %d loss %.4f acc %.4f", rec["epoch"], rec["train_loss"], rec["train_accuracy"])
        if progress is not None:
            progress(rec)

    finalize_running_stats(net, dataset, config.batch_size, rng.permutation(n) if config.shuffle else None)
    report.final_train_accuracy = evaluate(net, dataset)[0]
    if eval_dataset is not None:
        report.final_eval_accuracy = evaluate(net, eval_dataset)[0]
    return report
