"""Deterministic signal conditioning.

Transient trim, 100→64 Hz polyphase resampling, zero-phase band-pass for
the training pipeline, and a causal second-order-sections path for
streaming. Filter design and the offline resample lean on scipy; the
causal per-sample recurrence is implemented here so the streaming engine
and the batch causal filter share one code path bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import butter, firwin, sosfiltfilt, upfirdn

from .errors import RecordingTooShort, SignalTooShort, StateMismatch

FS_IN = 100.0
FS_OUT = 64.0
UP, DOWN = 16, 25
TRIM_SAMPLES = 50
BAND_HZ = (0.1, 20.0)
FILTER_ORDER = 5

# windowed-sinc polyphase kernel: Kaiser beta=5, 16*25*2 + 1 taps,
# cutoff at the output Nyquist (1/25 of the upsampled Nyquist), gain 16
# to undo zero-stuffing attenuation
KERNEL_TAPS = UP * DOWN * 2 + 1
KAISER_BETA = 5.0


def resample_kernel():
    return firwin(KERNEL_TAPS, 1.0 / DOWN, window=("kaiser", KAISER_BETA)) * UP


@dataclass(frozen=True)
class SosFilter:
    """Normalized second-order sections plus the design they came from."""

    sections: np.ndarray  # [n_sections, 6] rows of (b0, b1, b2, a0, a1, a2)
    design: dict

    @property
    def n_sections(self):
        return self.sections.shape[0]

    def pole_radii(self):
        radii = []
        for _, _, _, a0, a1, a2 in self.sections:
            radii.extend(np.abs(np.roots([a0, a1, a2])))
        return np.array(radii)

    def magnitude(self, freq_hz):
        """|H(f)| evaluated directly from the section polynomials."""
        fs = self.design["fs_hz"]
        z = np.exp(2j * np.pi * np.asarray(freq_hz, dtype=float) / fs)
        h = np.ones_like(z, dtype=complex)
        for b0, b1, b2, a0, a1, a2 in self.sections:
            h *= (b0 + b1 / z + b2 / z**2) / (a0 + a1 / z + a2 / z**2)
        return np.abs(h)

    def export_csv(self, path):
        header = "b0,b1,b2,a0,a1,a2"
        np.savetxt(path, self.sections, delimiter=",", header=header, comments="")


def design_bandpass():
    """Fifth-order Butterworth band-pass [0.1, 20] Hz at fs=64 Hz, as SOS."""
    sos = butter(FILTER_ORDER, list(BAND_HZ), btype="bandpass", fs=FS_OUT, output="sos")
    return SosFilter(sections=sos, design={"order": FILTER_ORDER, "band_hz": list(BAND_HZ), "fs_hz": FS_OUT})


def trim_transient(rec):
    """Drop the first 0.5 s (50 samples at 100 Hz) of both wrists."""
    if rec.sample_rate_hz != FS_IN:
        raise StateMismatch(f"expected {FS_IN} Hz recording, got {rec.sample_rate_hz}")
    if rec.left.shape[0] <= TRIM_SAMPLES:
        raise RecordingTooShort(
            f"{rec.subject_id}/{rec.task}: {rec.left.shape[0]} rows, need > {TRIM_SAMPLES}")
    return replace(rec, left=rec.left[TRIM_SAMPLES:], right=rec.right[TRIM_SAMPLES:])


def resample_100_to_64(signal):
    """Polyphase 100→64 Hz resample of an [n, c] matrix.

    Up-by-16 / down-by-25 with the Kaiser windowed-sinc kernel; the
    kernel's group delay (400 upsampled ticks = 16 output samples) is
    compensated so output m sits at input time m*25/16. Output length is
    ceil(n*16/25).
    """
    signal = np.asarray(signal)
    n = signal.shape[0]
    if n < DOWN:
        raise SignalTooShort(f"resample needs >= {DOWN} samples, got {n}")
    h = resample_kernel()
    m = -(-n * UP // DOWN)  # ceil
    y = upfirdn(h, signal, UP, DOWN, axis=0)
    delay = (KERNEL_TAPS - 1) // 2 // DOWN  # 400/25 = 16 output samples
    return y[delay:delay + m]


def filtfilt(filt, signal):
    """Zero-phase forward-backward SOS filtering per channel.

    Odd-reflection padding of 3*(2*n_sections) samples with steady-state
    initial conditions; output length equals input length.
    """
    signal = np.asarray(signal)
    padlen = 3 * (2 * filt.n_sections)
    if signal.shape[0] <= padlen:
        raise SignalTooShort(f"filtfilt needs > {padlen} samples, got {signal.shape[0]}")
    return sosfiltfilt(filt.sections, signal, axis=0, padtype="odd", padlen=padlen)


# ---------------------------------------------------------------------------
# causal path (streaming)


def init_state(filt, channels):
    """Fresh zero delay registers: [n_sections, 2, channels]."""
    return np.zeros((filt.n_sections, 2, channels))


def _sos_step(sections, state, x):
    """One transposed-direct-form-II step across all channels, in place."""
    for s in range(sections.shape[0]):
        b0, b1, b2, _, a1, a2 = sections[s]
        y = b0 * x + state[s, 0]
        state[s, 0] = b1 * x - a1 * y + state[s, 1]
        state[s, 1] = b2 * x - a2 * y
        x = y
    return x


def causal_step(filt, state, sample):
    """Pure single-sample causal filter step: returns (new_state, output)."""
    sample = np.asarray(sample, dtype=float)
    if state.shape != (filt.n_sections, 2, sample.shape[0]):
        raise StateMismatch(
            f"state shape {state.shape} does not match {filt.n_sections} sections x {sample.shape[0]} channels")
    state = state.copy()
    y = _sos_step(filt.sections, state, sample)
    return state, y


def causal_filter(filt, signal, state=None):
    """Single-pass causal SOS filter over an [n, c] matrix.

    Runs the same per-sample recurrence as ``causal_step``, so feeding a
    signal sample-by-sample matches this batch path bit-exactly.
    """
    signal = np.asarray(signal, dtype=float)
    if state is None:
        state = init_state(filt, signal.shape[1])
    else:
        state = state.copy()
    out = np.empty_like(signal)
    for i in range(signal.shape[0]):
        out[i] = _sos_step(filt.sections, state, signal[i])
    return out, state
