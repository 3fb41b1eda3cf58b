"""Task losses, evaluation metrics and the optimisation loop."""

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import (ConfigError, DivergedLoss, InvalidBin, NoComparablePairs,
                     NonFiniteValue, SingleClass)

log = logging.getLogger(__name__)

TASK_KINDS = ("survival", "binary", "multiclass")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "binary"
    n_bins: int = 4
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "survival" and self.n_bins < 2:
            raise ConfigError("survival tasks need n_bins >= 2")
        if self.kind == "multiclass" and self.n_classes < 2:
            raise ConfigError("multiclass tasks need n_classes >= 2")
        if self.kind == "binary" and self.n_classes != 2:
            raise ConfigError("binary tasks have exactly 2 classes")

    @property
    def n_outputs(self):
        return self.n_bins if self.kind == "survival" else self.n_classes

    def to_dict(self):
        return {"kind": self.kind, "n_bins": self.n_bins, "n_classes": self.n_classes}


@dataclass
class Labels:
    """Targets aligned with a sample ordering.

    ``y`` holds class indices, or survival bin indices once bin edges are
    known.  ``censorship`` is 1 for right-censored samples.
    """

    kind: str
    y: np.ndarray
    times: np.ndarray = None
    censorship: np.ndarray = None

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Labels(self.kind, self.y[idx], pick(self.times), pick(self.censorship))

    def __len__(self):
        return len(self.y)


# -- survival -----------------------------------------------------------------------


def hazards_and_survival(logits):
    """Per-bin hazards (sigmoid of the logits) and the survival curve."""
    logits = np.asarray(logits, dtype=np.float64)
    hazards = 1.0 / (1.0 + np.exp(-logits))
    survival = np.cumprod(1.0 - hazards, axis=-1)
    return hazards, survival


def survival_bin_edges(times, censorship, n_bins=4):
    """Inner bin edges at the quantiles of the uncensored event times."""
    times = np.asarray(times, dtype=np.float64)
    events = times[np.asarray(censorship) == 0]
    if events.size == 0:
        events = times
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    return np.quantile(events, qs)


def assign_bins(times, edges):
    return np.searchsorted(np.asarray(edges), np.asarray(times), side="right").astype(np.int64)


def nll_survival_loss(logits, bins, censorship):
    """Discrete-time survival negative log-likelihood, averaged over the batch.

    Events in bin k contribute ``-(log S(k-1) + log h(k))``, censored samples
    ``-log S(k)``, with ``S(-1) = 1``.
    """
    bins = np.asarray(bins, dtype=np.int64)
    censorship = np.asarray(censorship, dtype=np.float64)
    n, k = logits.shape
    if bins.shape != (n,) or (bins < 0).any() or (bins >= k).any():
        raise InvalidBin(f"survival bins must lie in [0, {k}), got {bins}")
    log_h = T.log_sigmoid(logits)
    log_surv = T.cumsum(T.log_sigmoid(-logits), axis=-1)
    log_surv_prev = T.concat([T.Tensor(np.zeros((n, 1))), log_surv[:, :-1]], axis=1)
    rows = np.arange(n)
    event_ll = log_surv_prev[rows, bins] + log_h[rows, bins]
    censored_ll = log_surv[rows, bins]
    ll = event_ll * T.Tensor(1.0 - censorship) + censored_ll * T.Tensor(censorship)
    return -ll.mean()


# -- classification -------------------------------------------------------------------


def cross_entropy_loss(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = T.log_softmax(logits, axis=-1)
    return -logp[np.arange(n), labels].mean()


def task_loss(logits, labels, task):
    if task.kind == "survival":
        return nll_survival_loss(logits, labels.y, labels.censorship)
    return cross_entropy_loss(logits, labels.y)


# -- metrics ------------------------------------------------------------------------------


def concordance_index(risk, times, censorship):
    """Harrell's c-index with 0.5 credit for tied risks.

    A pair (i, j) is comparable when ``t_i < t_j`` and sample i had the event.
    """
    risk = np.asarray(risk, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    event = np.asarray(censorship) == 0
    comparable = (times[:, None] < times[None, :]) & event[:, None]
    n_comp = comparable.sum()
    if n_comp == 0:
        raise NoComparablePairs("no comparable pairs for the concordance index")
    diff = risk[:, None] - risk[None, :]
    concordant = (comparable & (diff > 0)).sum()
    ties = (comparable & (diff == 0)).sum()
    return float((concordant + 0.5 * ties) / n_comp)


def auc(scores, labels):
    """Mann-Whitney AUC with midranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores, labels):
    """Unweighted mean of one-vs-rest AUCs over the classes present in ``labels``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise SingleClass("macro AUC needs at least two classes present")
    return float(np.mean([auc(scores[:, k], labels == k) for k in present]))


def risk_from_logits(logits, sign=1.0):
    """Survival risk score: ``sign * -(sum of the survival curve)``."""
    _, surv = hazards_and_survival(logits)
    return -sign * surv.sum(axis=-1)


def scores_from_logits(logits, task, risk_sign=1.0):
    logits = np.asarray(logits)
    if task.kind == "survival":
        return risk_from_logits(logits, risk_sign)
    if task.kind == "binary":
        return logits[:, 1] - logits[:, 0]
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def task_metric(logits, labels, task, risk_sign=1.0):
    """c-index (survival), AUC (binary) or macro AUC (multiclass)."""
    scores = scores_from_logits(logits, task, risk_sign)
    if task.kind == "survival":
        return concordance_index(scores, labels.times, labels.censorship)
    if task.kind == "binary":
        return auc(scores, labels.y)
    return macro_auc(scores, labels.y)


METRIC_NAMES = {"survival": "c_index", "binary": "auc", "multiclass": "macro_auc"}


# -- optimisation -------------------------------------------------------------------------

_gradient_steps = 0


def gradient_step_count():
    """Total optimiser steps taken in this process (instrumentation)."""
    return _gradient_steps


class Adam:
    def __init__(self, params, lr=0.003, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        global _gradient_steps
        _gradient_steps += 1
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class ReduceLROnPlateau:
    """Scale the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, factor=0.5, patience=3, min_lr=0.0):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0

    def step(self, value):
        if value < self.best:
            self.best = value
            self.bad = 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.bad = 0


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a new best, keeping the best state."""

    def __init__(self, patience=7):
        self.patience = patience
        self.best = np.inf
        self.bad = 0
        self.best_state = None
        self.best_epoch = None

    def step(self, value, state=None, epoch=None):
        """Record one epoch; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.bad = 0
            self.best_state = state
            self.best_epoch = epoch
            return False
        self.bad += 1
        return self.bad >= self.patience


def l1_penalty(tensors, weight):
    total = None
    for t in tensors:
        term = T.tabs(t).sum()
        total = term if total is None else total + term
    return total * weight


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_epoch: int = None
    stopped_early: bool = False
    steps: int = 0


def snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def restore(params, state):
    for k, p in params.items():
        p.data[...] = state[k]


def evaluate(model, source, labels, task, batch_size=512, risk_sign=1.0):
    """Loss and metric of ``model`` over a full split (eval mode)."""
    logits = predict(model, source, batch_size)
    with T.no_grad():
        loss = float(task_loss(T.Tensor(logits), labels, task).data)
    try:
        metric = task_metric(logits, labels, task, risk_sign)
    except (SingleClass, NoComparablePairs):
        metric = float("nan")
    return loss, metric, logits


def predict(model, source, batch_size=512):
    out = []
    with T.no_grad():
        for start in range(0, len(source), batch_size):
            idx = np.arange(start, min(start + batch_size, len(source)))
            out.append(model.forward(source.collate(idx), training=False).data)
    return np.concatenate(out, axis=0)


def fit(model, train, train_labels, val, val_labels, task, *, epochs, lr=0.003,
        batch_size=128, l1=0.0, early_stopping_patience=7, scheduler_patience=3,
        scheduler_factor=0.5, rng=None, early_stopping=True, risk_sign=1.0):
    """Minimise the task loss of ``model`` with Adam.

    ``train``/``val`` are batch sources exposing ``__len__`` and
    ``collate(indices)``; ``model`` exposes ``parameters()``,
    ``l1_parameters()`` and ``forward(inputs, training, rng)``.

    With ``early_stopping`` the best validation-loss state is restored at
    the end; otherwise exactly ``epochs`` passes are made.  A NaN/Inf loss
    restores the last good state and raises :class:`DivergedLoss`.
    """
    rng = np.random.default_rng(rng)
    params = model.parameters()
    opt = Adam(params, lr=lr)
    sched = ReduceLROnPlateau(opt, factor=scheduler_factor, patience=scheduler_patience)
    stopper = EarlyStopping(early_stopping_patience)
    result = FitResult()
    last_good = snapshot(params)
    l1_params = model.l1_parameters() if l1 else []
    n = len(train)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        t0 = time.perf_counter()
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            try:
                logits = model.forward(train.collate(idx), training=True, rng=rng)
                loss = task_loss(logits, train_labels.subset(idx), task)
                if l1_params:
                    loss = loss + l1_penalty(l1_params, l1)
                loss.backward()
                grads_ok = all(p.grad is None or np.isfinite(p.grad).all()
                               for p in params.values())
                if not grads_ok:
                    raise NonFiniteValue("non-finite gradient")
            except NonFiniteValue as exc:
                restore(params, last_good)
                raise DivergedLoss(f"training diverged in epoch {epoch}: {exc}") from exc
            opt.step()
            result.steps += 1
            losses.append(float(loss.data))
        seconds = time.perf_counter() - t0
        last_good = snapshot(params)
        val_loss, val_metric, _ = evaluate(model, val, val_labels, task, risk_sign=risk_sign)
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                               "val_loss": val_loss, "val_metric": val_metric, "lr": opt.lr,
                               "seconds": seconds})
        log.debug("epoch %d train %.4f val %.4f metric %.4f", epoch, np.mean(losses),
                  val_loss, val_metric)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"validation loss is not finite in epoch {epoch}")
        sched.step(val_loss)
        if early_stopping:
            if stopper.step(val_loss, snapshot(params), epoch):
                result.stopped_early = True
                break
    if early_stopping and stopper.best_state is not None:
        restore(params, stopper.best_state)
        result.best_epoch = stopper.best_epoch
    else:
        result.best_epoch = epochs
    return result


def clone(model):
    return copy.deepcopy(model)
