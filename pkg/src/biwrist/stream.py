"""Real-time streaming inference.

100 Hz samples are pushed one at a time: an incremental polyphase
resampler (same kernel as the offline path, operated causally) emits
64 Hz samples at 16/25 cadence, each emitted sample passes through the
causal band-pass with persistent per-channel state into a 256-sample ring
buffer. The first prediction fires when the ring first fills; afterwards
one fires every 128 emitted samples (2.0 s, 50% window overlap).

The streaming path is causal by construction: the resampler accepts the
kernel's group delay as latency instead of compensating it, so its output
is a prefix of the batch causal resample. Predictions therefore differ
from the offline filtfilt pipeline and are only comparable to the batch
causal path.
"""

from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from . import model as mdl
from . import tensor as tz
from .errors import InvalidArgument, StateMismatch

WINDOW = 256
INFER_EVERY = 128


@dataclass
class Prediction:
    timestamp: int          # 64 Hz sample index at the window end
    p1: np.ndarray
    p2: np.ndarray
    latency_ms: float


class StreamingResampler:
    """Incremental causal 16/25 polyphase resampler.

    Output m is emitted as soon as input floor(25m/16) has arrived; its
    value equals the batch causal convolution (zero history before the
    stream start), so streaming output is a prefix of the batch output.
    """

    def __init__(self, channels, kernel=None):
        h = dsp.resample_kernel() if kernel is None else np.asarray(kernel)
        self.up, self.down = dsp.UP, dsp.DOWN
        self.phase_taps = [np.ascontiguousarray(h[p::self.up]) for p in range(self.up)]
        self.hist_len = max(len(t) for t in self.phase_taps)
        self.hist = np.zeros((self.hist_len, channels))
        self.channels = channels
        self.t = 0   # inputs consumed
        self.m = 0   # outputs emitted

    def push(self, sample):
        sample = np.asarray(sample, dtype=float)
        if sample.shape != (self.channels,):
            raise StateMismatch(f"expected {self.channels}-channel sample, got {sample.shape}")
        self.hist[self.t % self.hist_len] = sample
        self.t += 1
        out = []
        while (self.down * self.m) // self.up == self.t - 1:
            p = (self.down * self.m) % self.up
            taps = self.phase_taps[p]
            idx = (self.t - 1 - np.arange(len(taps))) % self.hist_len
            out.append(taps @ self.hist[idx])
            self.m += 1
        return out

    def run(self, signal):
        """Batch helper: push every row; identical code path to streaming."""
        out = []
        for row in np.asarray(signal, dtype=float):
            out.extend(self.push(row))
        return np.asarray(out).reshape(-1, self.channels)


class RingWindow:
    """Fixed 256-row circular buffer with ordered snapshots."""

    def __init__(self, channels):
        self.buf = np.zeros((WINDOW, channels))
        self.count = 0

    @property
    def fill(self):
        return min(self.count, WINDOW)

    def append(self, row):
        self.buf[self.count % WINDOW] = row
        self.count += 1

    def snapshot(self):
        if self.fill < WINDOW:
            raise StateMismatch(f"ring holds {self.fill} samples, need {WINDOW}")
        split = self.count % WINDOW
        return np.concatenate([self.buf[split:], self.buf[:split]])


class StreamEngine:
    """Stateful 100 Hz → prediction pipeline around one model."""

    def __init__(self, params, model_cfg, channels=12):
        if model_cfg.C * 2 != channels:
            raise StateMismatch(f"model expects {2 * model_cfg.C} channels, stream has {channels}")
        self.params = params
        self.cfg = model_cfg
        self.resampler = StreamingResampler(channels)
        self.filt = dsp.design_bandpass()
        self.filter_state = dsp.init_state(self.filt, channels)
        self.ring = RingWindow(channels)
        self.emitted = 0
        self.since_last_infer = 0
        self._first_fired = False

    def push(self, sample_100hz):
        """Consume one 100 Hz sample; returns a Prediction when one fires."""
        prediction = None
        for emitted in self.resampler.push(sample_100hz):
            filtered = dsp._sos_step(self.filt.sections, self.filter_state, emitted)
            self.ring.append(filtered)
            self.emitted += 1
            self.since_last_infer += 1
            if not self._first_fired:
                if self.ring.fill == WINDOW:
                    prediction = self._infer()
                    self._first_fired = True
                    self.since_last_infer = 0
            elif self.since_last_infer == INFER_EVERY:
                prediction = self._infer()
                self.since_last_infer = 0
        return prediction

    def _infer(self):
        window = self.ring.snapshot().astype(np.float32)
        t0 = time.perf_counter()
        with tz.no_grad():
            p1, p2 = mdl.forward_batch(self.params, self.cfg,
                                       window[None, :, :6], window[None, :, 6:])
        latency = (time.perf_counter() - t0) * 1000.0
        return Prediction(timestamp=self.emitted - 1, p1=p1.data[0].copy(),
                          p2=p2.data[0].copy(), latency_ms=latency)


def run_stream(params, model_cfg, signal_100hz):
    """Feed a [n, 12] signal through a fresh engine; list of Predictions."""
    engine = StreamEngine(params, model_cfg, channels=signal_100hz.shape[1])
    preds = []
    for row in signal_100hz:
        p = engine.push(row)
        if p is not None:
            preds.append(p)
    return preds


def write_predictions_csv(path, predictions):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("timestamp,p1_0,p1_1,p2_0,p2_1\n")
        for p in predictions:
            fh.write(f"{p.timestamp},{p.p1[0]!r},{p.p1[1]!r},{p.p2[0]!r},{p.p2[1]!r}\n")


# ---------------------------------------------------------------------------
# latency benchmark


def bench(params, model_cfg, n_windows=200, warmup=10, seed=0):
    """Wall-clock per-window forward latency; returns the report dict.

    Inputs are synthesized noise windows; model outputs are discarded.
    Reports mean/std/p95 latency, windows per second and peak RSS.
    """
    if n_windows < 10:
        raise InvalidArgument(f"n_windows must be >= 10, got {n_windows}")
    rng = np.random.default_rng(seed)
    windows = rng.standard_normal((warmup + n_windows, model_cfg.T, 12)).astype(np.float32)
    latencies = []
    with tz.no_grad():
        for i, w in enumerate(windows):
            t0 = time.perf_counter()
            mdl.forward_batch(params, model_cfg, w[None, :, :6], w[None, :, 6:])
            dt = (time.perf_counter() - t0) * 1000.0
            if i >= warmup:
                latencies.append(dt)
    lat = np.asarray(latencies)
    return {
        "n_windows": int(n_windows),
        "warmup": int(warmup),
        "mean_ms": float(lat.mean()),
        "std_ms": float(lat.std()),
        "p95_ms": float(np.percentile(lat, 95)),
        "fps": float(1000.0 / lat.mean()),
        "peak_rss_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
    }


def write_bench_json(path, report):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=1))
