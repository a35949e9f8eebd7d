"""Dual-channel cross-attention encoder with two masked binary heads.

Each wrist stream is linearly projected to d dimensions with sinusoidal
positions added, then passes through N layers of (cross-attention,
self-attention, feed-forward), each sub-layer wrapped post-norm as
LayerNorm(x + Dropout(sublayer(x))). Both cross-attention directions in a
layer read the layer-input states (parallel update). Time-mean pooling of
each stream is concatenated into z of length 2d, feeding either two
binary softmax heads (hierarchical mode) or one three-way head.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tz
from .errors import InvalidArgument, ShapeError
from .tensor import Tensor

STREAMS = ("L", "R")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 3
    n_heads: int = 8
    ff_dim: int = 256
    dropout: float = 0.2
    T: int = 256
    C: int = 6
    mode: str = "hierarchical"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise InvalidArgument(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.mode not in ("hierarchical", "three_class"):
            raise InvalidArgument(f"unknown mode {self.mode!r}")

    @classmethod
    def base(cls, **kw):
        return cls(d=64, n_layers=3, n_heads=8, ff_dim=256, dropout=0.2, **kw)

    @classmethod
    def edge(cls, **kw):
        return cls(d=32, n_layers=3, n_heads=8, ff_dim=256, dropout=0.12, **kw)

    def to_dict(self):
        return {"d": self.d, "n_layers": self.n_layers, "n_heads": self.n_heads,
                "ff_dim": self.ff_dim, "dropout": self.dropout, "T": self.T,
                "C": self.C, "mode": self.mode}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoidal_positions(T, d, dtype=np.float32):
    """PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(same)."""
    if d % 2:
        raise InvalidArgument(f"embedding dim must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.empty((T, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


@lru_cache(maxsize=8)
def _cached_positions(T, d, dtype_str):
    pe = sinusoidal_positions(T, d, dtype=np.dtype(dtype_str))
    pe.setflags(write=False)
    return pe


def head_names(mode):
    return ("h1", "h2") if mode == "hierarchical" else ("c3",)


def init_params(cfg, seed=0, dtype=np.float32):
    """Xavier-uniform projections, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)

    def xavier(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return tz.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)

    def zeros(*shape):
        return tz.parameter(np.zeros(shape), dtype=dtype)

    def ones(*shape):
        return tz.parameter(np.ones(shape), dtype=dtype)

    p = {}
    for s in STREAMS:
        p[f"in.{s}.W"] = xavier(cfg.C, cfg.d)
        p[f"in.{s}.b"] = zeros(cfg.d)
    for i in range(cfg.n_layers):
        for s in STREAMS:
            for blk in ("cross", "self"):
                for w in ("Wq", "Wk", "Wv", "Wo"):
                    p[f"enc{i}.{s}.{blk}.{w}"] = xavier(cfg.d, cfg.d)
            p[f"enc{i}.{s}.ffn.W1"] = xavier(cfg.d, cfg.ff_dim)
            p[f"enc{i}.{s}.ffn.b1"] = zeros(cfg.ff_dim)
            p[f"enc{i}.{s}.ffn.W2"] = xavier(cfg.ff_dim, cfg.d)
            p[f"enc{i}.{s}.ffn.b2"] = zeros(cfg.d)
            for ln in ("ln1", "ln2", "ln3"):
                p[f"enc{i}.{s}.{ln}.g"] = ones(cfg.d)
                p[f"enc{i}.{s}.{ln}.b"] = zeros(cfg.d)
    n_out = 2 if cfg.mode == "hierarchical" else 3
    for h in head_names(cfg.mode):
        p[f"head.{h}.W"] = xavier(2 * cfg.d, n_out)
        p[f"head.{h}.b"] = zeros(n_out)
    return p


def param_count(cfg):
    """Closed-form parameter count for a config."""
    per_stream_layer = (
        2 * 4 * cfg.d * cfg.d                      # cross + self projections
        + cfg.d * cfg.ff_dim + cfg.ff_dim          # ffn W1, b1
        + cfg.ff_dim * cfg.d + cfg.d               # ffn W2, b2
        + 3 * 2 * cfg.d                            # three layer norms
    )
    total = 2 * (cfg.C * cfg.d + cfg.d)            # input projections
    total += 2 * cfg.n_layers * per_stream_layer
    n_out = 2 if cfg.mode == "hierarchical" else 3
    total += len(head_names(cfg.mode)) * (2 * cfg.d * n_out + n_out)
    return total


def encoder_names(cfg):
    return [n for n in init_params(cfg, seed=0) if not n.startswith("head.")]


# ---------------------------------------------------------------------------
# forward


def embed(x, W, b, positions):
    """x·W + b + PE for one wrist; x is [B, T, C]."""
    h = tz.linear(x, W, b)
    return tz.add(h, positions)


def _mha(params, prefix, x_q, x_kv, n_heads, capture=None, capture_key=None):
    q = tz.matmul(x_q, params[f"{prefix}.Wq"])
    k = tz.matmul(x_kv, params[f"{prefix}.Wk"])
    v = tz.matmul(x_kv, params[f"{prefix}.Wv"])
    bucket = None
    if capture is not None:
        bucket = capture.setdefault(capture_key, [])
    out = tz.scaled_dot_attention(q, k, v, n_heads, capture=bucket)
    return tz.matmul(out, params[f"{prefix}.Wo"])


def _sublayer(params, prefix, x, sub_out, dropout_p, train, rng):
    y = tz.add(x, tz.dropout(sub_out, dropout_p, train, rng))
    return tz.layer_norm(y, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(params, prefix, x):
    h = tz.relu(tz.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return tz.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def encode_batch(params, cfg, left, right, train=False, rng=None,
                 use_positions=True, capture=None):
    """Encode [B, T, C] wrist pairs into z = [B, 2d]."""
    if left.shape != right.shape or left.shape[-1] != cfg.C:
        raise ShapeError("encode", left.shape, right.shape)
    dtype = params["in.L.W"].dtype
    T = left.shape[1]
    if use_positions:
        pe = Tensor(_cached_positions(T, cfg.d, np.dtype(dtype).str))
    else:
        pe = Tensor(np.zeros((T, cfg.d), dtype=dtype))
    hl = embed(Tensor(np.asarray(left, dtype=dtype)), params["in.L.W"], params["in.L.b"], pe)
    hr = embed(Tensor(np.asarray(right, dtype=dtype)), params["in.R.W"], params["in.R.b"], pe)
    for i in range(cfg.n_layers):
        # cross-attention: both directions read the layer-input states
        al = _mha(params, f"enc{i}.L.cross", hl, hr, cfg.n_heads,
                  capture, capture_key=(i, "L"))
        ar = _mha(params, f"enc{i}.R.cross", hr, hl, cfg.n_heads,
                  capture, capture_key=(i, "R"))
        hl = _sublayer(params, f"enc{i}.L.ln1", hl, al, cfg.dropout, train, rng)
        hr = _sublayer(params, f"enc{i}.R.ln1", hr, ar, cfg.dropout, train, rng)
        sl = _mha(params, f"enc{i}.L.self", hl, hl, cfg.n_heads)
        sr = _mha(params, f"enc{i}.R.self", hr, hr, cfg.n_heads)
        hl = _sublayer(params, f"enc{i}.L.ln2", hl, sl, cfg.dropout, train, rng)
        hr = _sublayer(params, f"enc{i}.R.ln2", hr, sr, cfg.dropout, train, rng)
        fl = _ffn(params, f"enc{i}.L.ffn", hl)
        fr = _ffn(params, f"enc{i}.R.ffn", hr)
        hl = _sublayer(params, f"enc{i}.L.ln3", hl, fl, cfg.dropout, train, rng)
        hr = _sublayer(params, f"enc{i}.R.ln3", hr, fr, cfg.dropout, train, rng)
    zl = tz.mean(hl, axis=1)
    zr = tz.mean(hr, axis=1)
    return tz.concat([zl, zr], axis=-1)


def heads_from_z(params, cfg, z):
    outs = tuple(tz.softmax(tz.linear(z, params[f"head.{h}.W"], params[f"head.{h}.b"]))
                 for h in head_names(cfg.mode))
    return outs if cfg.mode == "hierarchical" else outs[0]


def forward_batch(params, cfg, left, right, train=False, rng=None, capture=None):
    """Hierarchical mode: (p1, p2) each [B, 2]; three_class: p [B, 3]."""
    z = encode_batch(params, cfg, left, right, train=train, rng=rng, capture=capture)
    return heads_from_z(params, cfg, z)


def predict(params, cfg, left, right, batch_size=64):
    """Eval-mode forward without graph recording, in batches."""
    chunks = []
    with tz.no_grad():
        for start in range(0, left.shape[0], batch_size):
            out = forward_batch(params, cfg, left[start:start + batch_size],
                                right[start:start + batch_size], train=False)
            chunks.append([o.data for o in out] if cfg.mode == "hierarchical" else [out.data])
    if cfg.mode == "hierarchical":
        return np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks])
    return np.concatenate([c[0] for c in chunks])


def export_attention(params, cfg, left, right, out_dir=None):
    """Cross-attention maps for one window: {(layer, stream): [h, T, T]}.

    When ``out_dir`` is given, writes one T x T CSV per layer/stream/head
    and returns the paths.
    """
    from pathlib import Path

    capture = {}
    with tz.no_grad():
        forward_batch(params, cfg, left[None], right[None], train=False, capture=capture)
    maps = {key: bucket[0][0] for key, bucket in capture.items()}  # [h, T, T]
    if out_dir is None:
        return maps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for (layer, stream), heads in sorted(maps.items()):
        for h in range(heads.shape[0]):
            path = out / f"attn_layer{layer}_{stream}_head{h}.csv"
            np.savetxt(path, heads[h], delimiter=",", fmt="%.8e")
            paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, cfg, meta=None):
    info = {"model": cfg.to_dict()}
    if meta:
        info.update(meta)
    tz.save_tensors(path, params, meta=info)


def load_checkpoint(path):
    arrays, meta = tz.load_tensors(path)
    cfg = ModelConfig.from_dict(meta["model"])
    expected = init_params(cfg, seed=0)
    if set(arrays) != set(expected):
        missing = set(expected) ^ set(arrays)
        raise InvalidArgument(f"checkpoint does not match config parameter set: {sorted(missing)[:4]}")
    params = {}
    for name, arr in arrays.items():
        if arr.shape != expected[name].data.shape:
            raise ShapeError(f"checkpoint[{name}]", arr.shape, expected[name].data.shape)
        params[name] = tz.parameter(arr, dtype=arr.dtype)
    return params, cfg, meta
