"""Supervised training with the masked two-head loss.

The loss pools unmasked (sample, head) terms across both heads and
averages over that set; a fully-masked batch contributes nothing and the
step is skipped. Optimization is AdamW with decoupled weight decay,
global-norm gradient clipping and reduce-on-plateau scheduling monitoring
validation loss. Model selection keeps the best-validation-loss epoch.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from . import tensor as tz
from .errors import NumericalError
from .windowing import MASK

log = logging.getLogger(__name__)

GROUP_INDEX = {"HC": 0, "PD": 1, "DD": 2}
HEAD_KEYS = ("head_hc_pd", "head_pd_dd")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 100
    clip_norm: float = 1.0
    sched_factor: float = 0.5
    sched_patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accuracy_target: float | None = None  # optional early stop on mean head accuracy


def one_hot_masked(labels, n_classes=2):
    """[B, n] one-hot rows; MASK labels become all-zero rows."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    active = labels != MASK
    out[np.arange(labels.shape[0])[active], labels[active]] = 1.0
    return out


def masked_ce(p1, p2, y1, y2):
    """Mean of -log p over unmasked (sample, head) terms: (loss, |S|).

    Returns (None, 0) when every term is masked.
    """
    oh1 = one_hot_masked(y1)
    oh2 = one_hot_masked(y2)
    n_terms = int((np.asarray(y1) != MASK).sum() + (np.asarray(y2) != MASK).sum())
    if n_terms == 0:
        return None, 0
    total = tz.add(tz.cross_entropy(p1, oh1), tz.cross_entropy(p2, oh2))
    return tz.scale(total, 1.0 / n_terms), n_terms


def masked_ce_value(p1, p2, y1, y2):
    """Same quantity as ``masked_ce`` on plain probability arrays."""
    terms = []
    for p, y in ((p1, y1), (p2, y2)):
        active = np.asarray(y) != MASK
        if active.any():
            picked = p[active, np.asarray(y)[active]]
            terms.append(-np.log(np.maximum(picked, 1e-12)))
    if not terms:
        return 0.0
    flat = np.concatenate(terms)
    return float(flat.sum() / flat.size)


def three_class_ce(p, y):
    onehot = np.eye(3)[np.asarray(y)]
    return tz.scale(tz.cross_entropy(p, onehot), 1.0 / len(y))


# ---------------------------------------------------------------------------
# optimizer stack


class AdamW:
    """Decoupled weight decay: θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        cfg = self.cfg
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in {name}")
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= (self.lr * (update + cfg.weight_decay * p.data)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params, max_norm=1.0):
    """Scale all grads so the global L2 norm is at most max_norm; returns pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


class PlateauScheduler:
    """Halve the lr after `patience` consecutive epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=5, min_delta=1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stale = 0

    def step(self, val_loss):
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


# ---------------------------------------------------------------------------
# metrics


def _one_vs_rest_f1(pred, true, cls):
    tp = int(((pred == cls) & (true == cls)).sum())
    fp = int(((pred == cls) & (true != cls)).sum())
    fn = int(((pred != cls) & (true == cls)).sum())
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def classification_metrics(pred, true, n_classes):
    pred, true = np.asarray(pred), np.asarray(true)
    acc = float((pred == true).mean()) if len(true) else 0.0
    f1 = float(np.mean([_one_vs_rest_f1(pred, true, c) for c in range(n_classes)]))
    return {"accuracy": acc, "macro_f1": f1}


def _head_metrics(probs, labels):
    active = labels != MASK
    return classification_metrics(probs[active].argmax(axis=1), labels[active], 2), int(active.sum())


def _subject_majority(probs, labels, subjects):
    """Accuracy of per-subject majority vote over that head's unmasked windows."""
    active = labels != MASK
    pred = probs.argmax(axis=1)
    votes = {}
    for p, y, s in zip(pred[active], labels[active], np.asarray(subjects)[active]):
        votes.setdefault(s, [0, 0, int(y)])[p] += 1
    if not votes:
        return 0.0
    hits = sum(1 for c0, c1, y in votes.values() if int(c1 > c0) == y)
    return hits / len(votes)


def evaluate(params, cfg, ws, batch_size=128):
    """Eval-mode loss and per-head metrics on a WindowSet."""
    if cfg.mode == "three_class":
        probs = mdl.predict(params, cfg, ws.left, ws.right, batch_size)
        true = np.array([GROUP_INDEX[g] for g in ws.groups])
        loss = float(-np.log(np.maximum(probs[np.arange(len(true)), true], 1e-12)).mean())
        out = {"loss": loss, "overall": classification_metrics(probs.argmax(1), true, 3)}
        out["per_class"] = {
            g: float((probs.argmax(1)[true == i] == i).mean()) if (true == i).any() else 0.0
            for g, i in GROUP_INDEX.items()}
        return out
    p1, p2 = mdl.predict(params, cfg, ws.left, ws.right, batch_size)
    m1, n1 = _head_metrics(p1, ws.y1)
    m2, n2 = _head_metrics(p2, ws.y2)
    return {
        "loss": masked_ce_value(p1, p2, ws.y1, ws.y2),
        "head_hc_pd": m1, "head_pd_dd": m2,
        "n_active": {"head_hc_pd": n1, "head_pd_dd": n2},
        "subject_majority": {
            "head_hc_pd": _subject_majority(p1, ws.y1, ws.subjects),
            "head_pd_dd": _subject_majority(p2, ws.y2, ws.subjects),
        },
    }


# ---------------------------------------------------------------------------
# fold driver


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    history: list = field(default_factory=list)
    val_metrics: dict = field(default_factory=dict)


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.data = snap[k].copy()


def train_fold(train_ws, val_ws, model_cfg, train_cfg, out_dir=None,
               init=None, trainable=None, curve_name="loss_curve.csv"):
    """Train on one fold; returns the best-validation-loss checkpoint.

    ``init`` seeds parameter values by name (e.g. a pretrained encoder);
    ``trainable`` restricts the optimized subset (others stay frozen).
    """
    params = mdl.init_params(model_cfg, seed=train_cfg.seed)
    if init:
        for name, arr in init.items():
            if name in params:
                params[name].data = np.array(arr, dtype=params[name].data.dtype)
    opt_params = {k: v for k, v in params.items() if trainable is None or k in trainable}
    for name, p in params.items():
        p.requires_grad = name in opt_params
    rng = np.random.default_rng(train_cfg.seed)
    optimizer = AdamW(opt_params, train_cfg)
    scheduler = PlateauScheduler(train_cfg.lr, train_cfg.sched_factor, train_cfg.sched_patience)
    three_class = model_cfg.mode == "three_class"
    y_3c = np.array([GROUP_INDEX[g] for g in train_ws.groups]) if three_class else None

    history = []
    best_loss, best_epoch, best_snap = np.inf, -1, _snapshot(params)
    n = len(train_ws)
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(n)
        epoch_loss, epoch_terms = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            out = mdl.forward_batch(params, model_cfg, train_ws.left[idx], train_ws.right[idx],
                                    train=True, rng=rng)
            if three_class:
                loss = three_class_ce(out, y_3c[idx])
                n_terms = len(idx)
            else:
                loss, n_terms = masked_ce(out[0], out[1], train_ws.y1[idx], train_ws.y2[idx])
                if loss is None:
                    continue
            optimizer.zero_grad()
            loss.backward()
            clip_grad_norm(opt_params, train_cfg.clip_norm)
            try:
                optimizer.step()
            except NumericalError as e:
                log.warning("epoch %d: step aborted (%s)", epoch, e)
                continue
            epoch_loss += float(loss.data) * n_terms
            epoch_terms += n_terms
        train_loss = epoch_loss / max(epoch_terms, 1)
        report = evaluate(params, model_cfg, val_ws)
        val_loss = report["loss"]
        row = {"epoch": epoch, "train_loss": train_loss,
               "val_loss": val_loss, "lr": optimizer.lr}
        if three_class:
            row["val_accuracy"] = report["overall"]["accuracy"]
        else:
            row["val_acc_hc_pd"] = report["head_hc_pd"]["accuracy"]
            row["val_acc_pd_dd"] = report["head_pd_dd"]["accuracy"]
        history.append(row)
        if val_loss < best_loss:
            best_loss, best_epoch, best_snap = val_loss, epoch, _snapshot(params)
        optimizer.lr = scheduler.step(val_loss)
        if three_class:
            acc = report["overall"]["accuracy"]
            log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, train_loss, val_loss, acc)
        else:
            a1 = report["head_hc_pd"]["accuracy"]
            a2 = report["head_pd_dd"]["accuracy"]
            log.info("epoch %d train %.4f val %.4f acc %.3f/%.3f",
                     epoch, train_loss, val_loss, a1, a2)
            if train_cfg.accuracy_target is not None and \
                    min(a1, a2) >= train_cfg.accuracy_target:
                log.info("accuracy target %.2f reached at epoch %d",
                         train_cfg.accuracy_target, epoch)
                break

    _restore(params, best_snap)
    for p in params.values():
        p.requires_grad = True
    result = TrainResult(params=params, best_epoch=best_epoch, history=history,
                         val_metrics=evaluate(params, model_cfg, val_ws))
    if out_dir is not None:
        write_loss_curve(Path(out_dir) / curve_name, history)
    return result


def write_loss_curve(path, history):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_loss"]), repr(row["lr"])])


# ---------------------------------------------------------------------------
# cross-validation aggregation


def aggregate_metrics(per_fold, mode="hierarchical"):
    """Population mean/std of accuracy and macro-F1 across folds."""

    def agg(path):
        vals = np.array([fold[path[0]][path[1]] for fold in per_fold])
        return {"mean": float(vals.mean()), "std": float(vals.std())}

    if mode == "three_class":
        return {"overall": {k: agg(("overall", k)) for k in ("accuracy", "macro_f1")}}
    return {head: {k: agg((head, k)) for k in ("accuracy", "macro_f1")} for head in HEAD_KEYS}


def metrics_json(per_fold, mode="hierarchical"):
    return {
        "mode": mode,
        "folds": per_fold,
        "aggregate": aggregate_metrics(per_fold, mode),
        "std_formula": "population",
    }


def write_metrics(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))
