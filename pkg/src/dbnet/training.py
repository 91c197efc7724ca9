"""Training protocol, metrics, and evaluation reports.

Training runs several independent seeded rounds.  Within a round, minibatch
Adam minimizes cross-entropy; the evaluation-set loss is monitored every
epoch and the weights of the best monitored epoch are restored when patience
runs out.  The round whose restored weights score the highest evaluation
accuracy is kept ("best of n rounds").

Accuracy here is the mean of per-class recalls, not the plain hit rate; the
two coincide only when classes are balanced.  Kappa rescales that accuracy
against the 1/n chance level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TrialSet
from .model import DualBranchModel
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 0.0009
    batch_size: int = 64
    max_epochs: int = 1000
    early_stop_patience: int = 300
    rounds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 \
                or self.rounds < 1:
            raise ValueError("learning rate, batch size, epochs and rounds must be positive")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError(
                f"patience must lie in [1, max_epochs], got {self.early_stop_patience}")

    def to_dict(self):
        return dict(learning_rate=self.learning_rate, batch_size=self.batch_size,
                    max_epochs=self.max_epochs, early_stop_patience=self.early_stop_patience,
                    rounds=self.rounds, seed=self.seed)


class Adam:
    """Adam with bias correction; moments live beside the parameters."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        params = list(params)
        if params and isinstance(params[0], tuple):
            params = [t for _, t in params]
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log probability of the true class, floored at 1e-12."""
    labels = np.asarray(labels)
    m, n = probs.shape
    if len(labels) != m:
        raise ValueError(f"{len(labels)} labels for {m} probability rows")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must lie in [0, {n}), got [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((m, n), dtype=probs.data.dtype)
    onehot[np.arange(m), labels] = 1.0
    picked = T.reduce_sum(T.mul(probs, Tensor(onehot)), axis=1)
    return T.scale(T.reduce_mean(T.log(T.clip_min(picked, 1e-12))), -1.0)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(true, pred, n_classes: int) -> np.ndarray:
    """Counts[true, predicted]."""
    true = np.asarray(true)
    pred = np.asarray(pred)
    if true.shape != pred.shape:
        raise ValueError("true and predicted label counts differ")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (true, pred), 1)
    return out


def accuracy_pa(confusion: np.ndarray) -> float:
    """Mean per-class recall; every class must be represented."""
    confusion = np.asarray(confusion)
    per_class = confusion.sum(axis=1)
    if (per_class == 0).any():
        missing = np.flatnonzero(per_class == 0).tolist()
        raise ValueError(f"classes without trials cannot be scored: {missing}")
    recalls = np.diag(confusion) / per_class
    return float(recalls.mean())


def kappa(p_a: float, n_classes: int) -> float:
    """Agreement above the 1/n chance level, scaled to 1 at perfection."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if not 0.0 <= p_a <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {p_a}")
    chance = 1.0 / n_classes
    return (p_a - chance) / (1.0 - chance)


@dataclass
class EvalReport:
    confusion: np.ndarray
    p_a: float
    kappa: float
    per_class_recall: list

    def to_dict(self):
        return dict(confusion=np.asarray(self.confusion).tolist(), p_a=self.p_a,
                    kappa=self.kappa, per_class_recall=list(self.per_class_recall))


def evaluate(model: DualBranchModel, ts: TrialSet, batch_size: int = 256) -> EvalReport:
    probs = model.predict(ts.trials, batch_size=batch_size)
    pred = probs.argmax(axis=1)
    confusion = confusion_matrix(ts.labels, pred, ts.n_classes)
    p_a = accuracy_pa(confusion)
    recalls = (np.diag(confusion) / confusion.sum(axis=1)).tolist()
    return EvalReport(confusion=confusion, p_a=p_a, kappa=kappa(p_a, ts.n_classes),
                      per_class_recall=recalls)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    eval_loss: float
    eval_pa: float


@dataclass
class RoundSummary:
    round_index: int
    init_seed: int
    epochs_run: int
    best_epoch: int
    best_eval_loss: float
    eval_pa: float


@dataclass
class TrainResult:
    best_round: int
    rounds: list
    history: list          # HistoryRows of the selected round
    report: EvalReport     # evaluation with the selected round's weights


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _eval_loss_and_pa(model, ts, batch_size):
    probs = model.predict(ts.trials, batch_size=batch_size)
    floored = np.maximum(probs[np.arange(ts.m), ts.labels], 1e-12)
    loss = float(-np.log(floored).mean())
    confusion = confusion_matrix(ts.labels, probs.argmax(axis=1), ts.n_classes)
    return loss, accuracy_pa(confusion)


def train(model: DualBranchModel, train_set: TrialSet, eval_set: TrialSet,
          cfg: TrainConfig, log=None) -> TrainResult:
    """Run the full multi-round protocol and leave the winning round's best
    weights loaded in `model`."""
    if train_set.m < 1:
        raise ValueError("training set is empty")
    if train_set.n_classes != model.cfg.n_classes:
        raise ValueError(
            f"model expects {model.cfg.n_classes} classes, data has {train_set.n_classes}")
    x_all = train_set.trials.astype(model.dtype)[:, None, :, :]
    y_all = train_set.labels
    summaries = []
    histories = []
    snapshots = []
    for r in range(cfg.rounds):
        init_seed = _derived_seed(cfg.seed, r)
        model.init_params(init_seed)
        optimizer = Adam(model.parameters(), cfg.learning_rate)
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, 1]))
        dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, 2]))
        best_loss = np.inf
        best_epoch = -1
        best_snap = None
        since_best = 0
        history = []
        epochs_run = 0
        for epoch in range(cfg.max_epochs):
            order = shuffle_rng.permutation(train_set.m)
            total = 0.0
            for lo in range(0, train_set.m, cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                x = Tensor(x_all[batch])
                optimizer.zero_grad()
                with T.Tape() as tape:
                    probs = model.forward(x, train=True, rng=dropout_rng)
                    loss = cross_entropy(probs, y_all[batch])
                T.backward(loss, tape)
                optimizer.step()
                total += float(loss.data) * len(batch)
            train_loss = total / train_set.m
            eval_loss, eval_pa = _eval_loss_and_pa(model, eval_set, cfg.batch_size)
            history.append(HistoryRow(epoch, train_loss, eval_loss, eval_pa))
            epochs_run = epoch + 1
            if log is not None:
                log(r, history[-1])
            if eval_loss < best_loss:
                best_loss = eval_loss
                best_epoch = epoch
                best_snap = model.snapshot()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    break
        model.load_snapshot(best_snap)
        _, pa = _eval_loss_and_pa(model, eval_set, cfg.batch_size)
        summaries.append(RoundSummary(r, init_seed, epochs_run, best_epoch, best_loss, pa))
        histories.append(history)
        snapshots.append(best_snap)
    best_round = max(range(cfg.rounds), key=lambda r: (summaries[r].eval_pa, -r))
    model.load_snapshot(snapshots[best_round])
    report = evaluate(model, eval_set, cfg.batch_size)
    return TrainResult(best_round=best_round, rounds=summaries,
                       history=histories[best_round], report=report)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "eval_loss", "eval_pa"])
        for row in history:
            writer.writerow([row.epoch, f"{row.train_loss:.6f}",
                             f"{row.eval_loss:.6f}", f"{row.eval_pa:.6f}"])
