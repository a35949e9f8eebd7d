"""Window segmentation with class-dependent hops, masked labels, folds.

Class imbalance is mitigated by differential hopping: each class keeps
a fixed window length of 256 samples but hops by floor(256*(1-overlap)),
with overlaps of 70% (HC), 0% (PD) and 65% (DD). Labels are encoded for
two binary heads where the irrelevant head is masked. Folds are built at
the patient level, stratified by group.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .errors import InsufficientSubjects, InvalidArgument, SignalTooShort
from .ingest import GROUPS

log = logging.getLogger(__name__)

T_WINDOW = 256
MASK = -1
OVERLAP = {"HC": 0.70, "PD": 0.0, "DD": 0.65}
HOPS = {g: int(T_WINDOW * (1.0 - OVERLAP[g])) for g in GROUPS}  # 76 / 256 / 89


@dataclass(frozen=True)
class HierLabel:
    """Two-head label: (HC-vs-PD, PD-vs-DD), each 0, 1 or MASK."""

    hc_pd: int
    pd_dd: int


_ENCODING = {"HC": HierLabel(0, MASK), "PD": HierLabel(1, 0), "DD": HierLabel(MASK, 1)}


def encode_label(group):
    if group not in _ENCODING:
        raise InvalidArgument(f"unknown group {group!r}")
    return _ENCODING[group]


@dataclass
class BilateralWindow:
    left: np.ndarray   # [256, 6]
    right: np.ndarray  # [256, 6]
    subject_id: str
    group: str
    task: str
    offset: int

    def validate(self):
        for mat in (self.left, self.right):
            if mat.shape != (T_WINDOW, 6):
                raise InvalidArgument(f"window must be [{T_WINDOW} x 6], got {mat.shape}")
            if not np.isfinite(mat).all():
                raise InvalidArgument(f"{self.subject_id}/{self.task}@{self.offset}: non-finite values")
        return self


def window_count(n, group, T=T_WINDOW):
    """Closed-form count: floor((n - T)/hop) + 1 for n >= T."""
    if n < T:
        return 0
    return (n - T) // HOPS[group] + 1


def dhwt_segment(left, right, group, subject_id="", task=""):
    """Cut both wrists into T=256 windows with the class hop; trailing partial dropped."""
    n = left.shape[0]
    if n < T_WINDOW:
        raise SignalTooShort(f"{subject_id}/{task}: {n} samples < {T_WINDOW}")
    hop = HOPS[group]
    windows = []
    for start in range(0, n - T_WINDOW + 1, hop):
        windows.append(BilateralWindow(
            left=left[start:start + T_WINDOW], right=right[start:start + T_WINDOW],
            subject_id=subject_id, group=group, task=task, offset=start))
    return windows


@dataclass
class FoldSpec:
    k: int
    assignment: dict[str, int]

    def subjects_in(self, fold_idx):
        return {s for s, f in self.assignment.items() if f == fold_idx}

    def validate(self, subjects):
        if set(self.assignment) != set(subjects):
            raise InvalidArgument("fold assignment does not cover the cohort's subjects")
        return self


def stratified_patient_folds(cohort, k=5, seed=0):
    """Seeded per-group shuffle then round-robin; fold sizes differ by <= 1 per group."""
    rng = np.random.default_rng(seed)
    by_group = {g: sorted(s for s, grp in cohort.subjects.items() if grp == g) for g in GROUPS}
    assignment = {}
    for g in GROUPS:
        members = by_group[g]
        if 0 < len(members) < k:
            raise InsufficientSubjects(f"group {g} has {len(members)} subjects, need >= {k}")
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            assignment[members[idx]] = pos % k
    return FoldSpec(k=k, assignment=assignment).validate(cohort.subjects)


# ---------------------------------------------------------------------------
# window sets


@dataclass
class WindowSet:
    """Stacked float32 windows plus aligned per-window metadata."""

    X: np.ndarray          # [n, 256, 12]; columns 0:6 left wrist, 6:12 right
    y1: np.ndarray         # int8 HC-vs-PD labels (0/1/MASK)
    y2: np.ndarray         # int8 PD-vs-DD labels
    groups: np.ndarray     # str per window
    subjects: np.ndarray
    tasks: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    @property
    def left(self):
        return self.X[:, :, :6]

    @property
    def right(self):
        return self.X[:, :, 6:]

    def subset(self, idx):
        return WindowSet(self.X[idx], self.y1[idx], self.y2[idx], self.groups[idx],
                         self.subjects[idx], self.tasks[idx], self.offsets[idx])

    def group_counts(self):
        return {g: int((self.groups == g).sum()) for g in GROUPS}


def window_cohort(cohort, bandpass=True):
    """trim → resample → (optional) filtfilt → segment → label, whole cohort.

    Recordings too short to window are skipped with a warning. Windows are
    ordered by (subject, task, offset) so parallel per-recording processing
    would merge deterministically.
    """
    filt = dsp.design_bandpass() if bandpass else None
    rows, y1, y2, groups, subjects, tasks, offsets = [], [], [], [], [], [], []
    for rec in sorted(cohort.recordings, key=lambda r: (r.subject_id, r.task)):
        try:
            trimmed = dsp.trim_transient(rec)
            both = np.hstack([trimmed.left, trimmed.right])
            both = dsp.resample_100_to_64(both)
            if filt is not None:
                both = dsp.filtfilt(filt, both)
            wins = dhwt_segment(both[:, :6], both[:, 6:], rec.group, rec.subject_id, rec.task)
        except SignalTooShort:
            log.warning("skipping %s/%s: too short to window", rec.subject_id, rec.task)
            continue
        label = encode_label(rec.group)
        for w in wins:
            w.validate()
            rows.append(np.hstack([w.left, w.right]).astype(np.float32))
            y1.append(label.hc_pd)
            y2.append(label.pd_dd)
            groups.append(w.group)
            subjects.append(w.subject_id)
            tasks.append(w.task)
            offsets.append(w.offset)
    return WindowSet(
        X=np.stack(rows) if rows else np.zeros((0, T_WINDOW, 12), np.float32),
        y1=np.asarray(y1, np.int8), y2=np.asarray(y2, np.int8),
        groups=np.asarray(groups), subjects=np.asarray(subjects),
        tasks=np.asarray(tasks), offsets=np.asarray(offsets, np.int64))


def split_by_fold(windows, foldspec, fold_idx):
    if fold_idx >= foldspec.k:
        raise InvalidArgument(f"fold {fold_idx} out of range for k={foldspec.k}")
    val_subjects = foldspec.subjects_in(fold_idx)
    val_mask = np.isin(windows.subjects, sorted(val_subjects))
    return windows.subset(~val_mask), windows.subset(val_mask)


def build_dataset(cohort, foldspec, fold_idx, bandpass=True):
    """Full preprocessing for one fold: returns (train WindowSet, val WindowSet)."""
    return split_by_fold(window_cohort(cohort, bandpass=bandpass), foldspec, fold_idx)


# ---------------------------------------------------------------------------
# binary cache: little-endian float32 payload + JSON sidecar manifest


def save_cache(cache_dir, windows, foldspec, flags):
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(windows.X, dtype="<f4")
    (cache / "windows.f32").write_bytes(payload.tobytes())
    manifest = {
        "shape": list(windows.X.shape),
        "dtype": "<f4",
        "order": "C",
        "labels_hc_pd": windows.y1.tolist(),
        "labels_pd_dd": windows.y2.tolist(),
        "groups": windows.groups.tolist(),
        "subjects": windows.subjects.tolist(),
        "tasks": windows.tasks.tolist(),
        "offsets": windows.offsets.tolist(),
        "folds": {"k": foldspec.k, "assignment": foldspec.assignment},
        "flags": dict(flags),
    }
    (cache / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_cache(cache_dir):
    cache = Path(cache_dir)
    manifest = json.loads((cache / "manifest.json").read_text())
    X = np.frombuffer((cache / "windows.f32").read_bytes(), dtype=manifest["dtype"])
    X = X.reshape(manifest["shape"]).copy()
    windows = WindowSet(
        X=X,
        y1=np.asarray(manifest["labels_hc_pd"], np.int8),
        y2=np.asarray(manifest["labels_pd_dd"], np.int8),
        groups=np.asarray(manifest["groups"]),
        subjects=np.asarray(manifest["subjects"]),
        tasks=np.asarray(manifest["tasks"]),
        offsets=np.asarray(manifest["offsets"], np.int64))
    foldspec = FoldSpec(k=manifest["folds"]["k"], assignment=dict(manifest["folds"]["assignment"]))
    return windows, foldspec, manifest["flags"]
