"""Contrastive pretraining and the label-efficiency harness.

A batch of clean windows forms the anchors; each positive view is built
by one of two augmentations chosen with 50% probability: temporal
warping (natural cubic spline over 4 speed knots ~ N(1, 0.3^2), pinned
endpoints) or Gaussian jitter (sigma 0.05). The batch loss pulls each
anchor toward its own positive against the other positives in the batch
(cosine similarity / temperature). Labels are never read during
pretraining; fine-tune and linear-probe reuse the supervised stack.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import model as mdl
from . import tensor as tz
from . import train as tr
from .errors import InvalidArgument, NumericalError

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.05
    warp_knots: int = 4
    warp_sigma: float = 0.3
    choice_prob: float = 0.5  # probability of picking the warp
    seed: int = 0


@dataclass
class SslConfig:
    temperature: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidArgument(f"temperature must be positive, got {self.temperature}")


# ---------------------------------------------------------------------------
# augmentations


def jitter(x, sigma, rng):
    """x + N(0, sigma^2) noise, elementwise."""
    return x + rng.normal(0.0, sigma, size=x.shape)


def warp_positions(T, knots, sigma, rng):
    """Warped, strictly-increasing time axis over [0, T-1].

    Speed multipliers ~ N(1, sigma^2) clamped to [0.25, 1.75] at `knots`
    interior points; unit speed pinned at both endpoints; natural cubic
    spline; trapezoid-integrated and rescaled to end exactly at T-1.
    """
    knot_t = np.linspace(0.0, T - 1.0, knots + 2)
    mult = np.clip(rng.normal(1.0, sigma, size=knots), 0.25, 1.75)
    speeds = np.concatenate([[1.0], mult, [1.0]])
    spline = CubicSpline(knot_t, speeds, bc_type="natural")
    speed = np.clip(spline(np.arange(T, dtype=float)), 0.05, None)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]))])
    return cum / cum[-1] * (T - 1.0)


def time_warp(x, knots, sigma, rng):
    """Resample each channel at warped time positions (linear interpolation)."""
    T = x.shape[0]
    pos = warp_positions(T, knots, sigma, rng)
    grid = np.arange(T, dtype=float)
    out = np.empty_like(x, dtype=np.float64)
    for c in range(x.shape[1]):
        out[:, c] = np.interp(pos, grid, x[:, c])
    return out.astype(x.dtype)


def augment_window(x, cfg, rng):
    if rng.random() < cfg.choice_prob:
        return time_warp(x, cfg.warp_knots, cfg.warp_sigma, rng), "warp"
    return jitter(x, cfg.jitter_sigma, rng).astype(x.dtype), "jitter"


def make_batch_pairs(windows, cfg, seed):
    """(anchors, positives) for a [B, T, C] stack; anchor = clean window.

    Per-sample generators are derived from (cfg.seed, seed, index) so the
    batch is reproducible and each sample is augmentable in parallel.
    """
    positives = np.empty_like(windows)
    choices = []
    for i in range(windows.shape[0]):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed, i)))
        positives[i], kind = augment_window(windows[i], cfg, rng)
        choices.append(kind)
    return windows, positives, choices


# ---------------------------------------------------------------------------
# loss


def info_nce(z, zp, tau):
    """-mean_i log( exp(sim(z_i, z⁺_i)/τ) / Σ_j exp(sim(z_i, z⁺_j)/τ) ).

    sim is cosine similarity; the denominator runs over all B positives
    including j = i, so the loss is nonnegative and equals ln B when all
    embeddings coincide.
    """
    B = z.data.shape[0]
    if B < 2:
        raise InvalidArgument(f"info_nce needs a batch of >= 2, got {B}")
    for emb in (z, zp):
        if float(np.min(np.linalg.norm(emb.data, axis=-1))) == 0.0:
            raise NumericalError("zero-norm embedding: cosine similarity undefined")
    zn = _l2_normalize(z)
    zpn = _l2_normalize(zp)
    sim = tz.matmul(zn, tz.transpose(zpn, (1, 0)))
    logits = tz.scale(sim, 1.0 / tau)
    log_den = tz.log(tz.sum_axis(tz.exp(logits), axis=-1))
    diag = tz.sum_axis(tz.mul(logits, tz.Tensor(np.eye(B, dtype=logits.dtype))), axis=-1)
    return tz.scale(tz.sum_axis(tz.add(log_den, tz.scale(diag, -1.0))), 1.0 / B)


def _l2_normalize(z):
    norm = tz.sqrt(tz.sum_axis(tz.mul(z, z), axis=-1, keepdims=True))
    return tz.div(z, norm)


# ---------------------------------------------------------------------------
# pretraining


def pretrain(windows, model_cfg, ssl_cfg, train_cfg, aug_cfg=None):
    """Optimize info_nce over encoder embeddings; labels are never read.

    Returns (params, history); history rows carry per-epoch mean loss and
    the loss of the very first step for descent checks.
    """
    aug_cfg = aug_cfg or AugmentConfig(seed=ssl_cfg.seed)
    params = mdl.init_params(model_cfg, seed=train_cfg.seed)
    encoder = {k: v for k, v in params.items() if not k.startswith("head.")}
    for name, p in params.items():
        p.requires_grad = name in encoder
    optimizer = tr.AdamW(encoder, train_cfg)
    rng = np.random.default_rng(ssl_cfg.seed)
    X = windows.X
    history = []
    first_loss = None
    step_id = 0
    for epoch in range(ssl_cfg.epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), ssl_cfg.batch_size):
            idx = order[start:start + ssl_cfg.batch_size]
            if len(idx) < 2:
                continue
            anchors, positives, _ = make_batch_pairs(X[idx], aug_cfg, seed=step_id)
            za = mdl.encode_batch(params, model_cfg, anchors[:, :, :6], anchors[:, :, 6:],
                                  train=True, rng=rng)
            zp = mdl.encode_batch(params, model_cfg, positives[:, :, :6], positives[:, :, 6:],
                                  train=True, rng=rng)
            loss = info_nce(za, zp, ssl_cfg.temperature)
            if first_loss is None:
                first_loss = float(loss.data)
            optimizer.zero_grad()
            loss.backward()
            tr.clip_grad_norm(encoder, train_cfg.clip_norm)
            optimizer.step()
            losses.append(float(loss.data))
            step_id += 1
        history.append({"epoch": epoch, "ssl_loss": float(np.mean(losses))})
        log.info("ssl epoch %d loss %.4f", epoch, history[-1]["ssl_loss"])
    for p in params.values():
        p.requires_grad = True
    return params, {"history": history, "first_step_loss": first_loss}


# ---------------------------------------------------------------------------
# label-efficiency harness


def label_fraction_subset(windows, fraction, seed):
    """Keep ceil(fraction * n_subjects) subjects per group, all their windows."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = []
    for group in sorted(set(windows.groups)):
        subjects = sorted(set(windows.subjects[windows.groups == group]))
        n_keep = int(np.ceil(fraction * len(subjects)))
        order = rng.permutation(len(subjects))
        keep.extend(subjects[i] for i in order[:n_keep])
    mask = np.isin(windows.subjects, keep)
    return windows.subset(mask)


def fine_tune(pretrained, train_ws, val_ws, model_cfg, train_cfg, out_dir=None,
              curve_name="finetune_loss.csv"):
    """Encoder from the checkpoint, fresh heads, full supervised recipe."""
    encoder_init = {k: v for k, v in pretrained.items() if not k.startswith("head.")}
    return tr.train_fold(train_ws, val_ws, model_cfg, train_cfg, out_dir=out_dir,
                         init=encoder_init, curve_name=curve_name)


def linear_probe(pretrained, train_ws, val_ws, model_cfg, train_cfg):
    """Train only the heads on frozen embeddings.

    The encoder never enters the graph: embeddings are precomputed in
    eval mode, so encoder tensors stay bit-identical and receive no
    gradient at all.
    """
    params = mdl.init_params(model_cfg, seed=train_cfg.seed)
    for name, arr in pretrained.items():
        if not name.startswith("head."):
            params[name].data = np.array(arr, dtype=params[name].data.dtype)
    encoder_before = {k: p.data.copy() for k, p in params.items() if not k.startswith("head.")}

    def embed_all(ws):
        chunks = []
        with tz.no_grad():
            for start in range(0, len(ws), 64):
                z = mdl.encode_batch(params, model_cfg, ws.left[start:start + 64],
                                     ws.right[start:start + 64], train=False)
                chunks.append(z.data)
        return np.concatenate(chunks)

    z_train, z_val = embed_all(train_ws), embed_all(val_ws)
    heads = {k: v for k, v in params.items() if k.startswith("head.")}
    optimizer = tr.AdamW(heads, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    for _ in range(train_cfg.max_epochs):
        order = rng.permutation(len(z_train))
        for start in range(0, len(z_train), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            p1, p2 = mdl.heads_from_z(params, model_cfg, tz.Tensor(z_train[idx]))
            loss, _ = tr.masked_ce(p1, p2, train_ws.y1[idx], train_ws.y2[idx])
            if loss is None:
                continue
            optimizer.zero_grad()
            loss.backward()
            tr.clip_grad_norm(heads, train_cfg.clip_norm)
            optimizer.step()
    with tz.no_grad():
        p1, p2 = mdl.heads_from_z(params, model_cfg, tz.Tensor(z_val))
    m1, _ = tr._head_metrics(p1.data, val_ws.y1)
    m2, _ = tr._head_metrics(p2.data, val_ws.y2)
    for name, before in encoder_before.items():
        if not np.array_equal(params[name].data, before):
            raise NumericalError(f"frozen encoder weight {name} changed during probe")
    return {
        "head_hc_pd": m1,
        "head_pd_dd": m2,
        "loss": tr.masked_ce_value(p1.data, p2.data, val_ws.y1, val_ws.y2),
        "encoder_grads_zero": all(params[k].grad is None for k in encoder_before),
    }, params
