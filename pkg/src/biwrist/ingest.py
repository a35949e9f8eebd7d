"""Cohort loading and synthesis.

On-disk layout: one directory per subject containing ``meta.json``
(``{"subject_id": ..., "group": ...}``) and ``task_<Name>.csv`` files with
a header row and 12 numeric columns (6 left-wrist then 6 right-wrist) at
100 Hz. The synthetic generator emits the same layout and gives each
class a distinct, deliberately separable spectral signature so the full
pipeline can be validated in minutes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, MalformedDataset, ParseError

log = logging.getLogger(__name__)

GROUPS = ("HC", "PD", "DD")
TASKS = (
    "CrossArms", "DrinkGlas", "Entrainment", "HoldWeight", "LiftHold",
    "PointFinger", "Relaxed", "StretchHold", "TouchIndex", "TouchNose",
)
CSV_COLUMNS = ("ax_l", "ay_l", "az_l", "gx_l", "gy_l", "gz_l",
               "ax_r", "ay_r", "az_r", "gx_r", "gy_r", "gz_r")
SAMPLE_RATE_HZ = 100.0

# synthetic class profile. All amplitudes are fractions of TREMOR_AMP
# (the dominant-wrist amplitude); noise sigma is 0.1 of it. TREMOR_AMP is
# large relative to the encoder's unit-scale positional encodings so the
# class signal dominates the tokens from the first step (desk-scale
# budgets allow only a handful of epochs).
TREMOR_AMP = 3.0
NOISE_FRAC = 0.1
PD_BAND = (4.3, 5.5)          # dominant-wrist tremor, asymmetric
PD_OTHER_FRAC = 0.15          # other wrist: ~7:1 amplitude ratio
DD_BAND = (7.0, 8.6)          # distinct band, near-symmetric
DD_OTHER_FRAC = (0.92, 1.0)
TASK_FREQ_JITTER = 0.25       # per-task wander around the subject's tremor frequency
TASK_AMP_RANGE = (0.85, 1.15)
HF_ARTIFACT_BAND = (29.0, 31.0)          # optional injected sensor artifact
HF_ARTIFACT_FRAC = (2.0, 3.0)            # relative to TREMOR_AMP


@dataclass
class RawRecording:
    subject_id: str
    group: str
    task: str
    sample_rate_hz: float
    left: np.ndarray   # [T_raw, 6]
    right: np.ndarray  # [T_raw, 6]

    def validate(self):
        if self.group not in GROUPS:
            raise MalformedDataset(f"{self.subject_id}: unknown group {self.group!r}")
        if self.left.shape != self.right.shape:
            raise MalformedDataset(
                f"{self.subject_id}/{self.task}: wrist row counts differ "
                f"{self.left.shape} vs {self.right.shape}")
        if self.left.ndim != 2 or self.left.shape[1] != 6:
            raise MalformedDataset(f"{self.subject_id}/{self.task}: expected 6 columns per wrist")
        if self.left.shape[0] < 50:
            raise MalformedDataset(
                f"{self.subject_id}/{self.task}: {self.left.shape[0]} rows, too short to trim")
        return self


@dataclass
class Cohort:
    recordings: list[RawRecording]
    subjects: dict[str, str] = field(default_factory=dict)

    def group_counts(self):
        counts = {g: 0 for g in GROUPS}
        for g in self.subjects.values():
            counts[g] += 1
        return counts

    def validate(self):
        for rec in self.recordings:
            rec.validate()
            if self.subjects.get(rec.subject_id) != rec.group:
                raise MalformedDataset(
                    f"{rec.subject_id}: group {rec.group!r} inconsistent with cohort metadata")
        by_subject = {}
        for rec in self.recordings:
            by_subject.setdefault(rec.subject_id, set()).add(rec.task)
        all_tasks = set().union(*by_subject.values()) if by_subject else set()
        for sid, tasks in sorted(by_subject.items()):
            missing = all_tasks - tasks
            if missing:
                log.warning("subject %s is missing tasks: %s", sid, ",".join(sorted(missing)))
        return self


def load_pads(root_dir):
    """Load a PADS-layout directory tree into a Cohort.

    Subject directories are read in sorted order; rows keep file order.
    """
    root = Path(root_dir)
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subject_dirs:
        raise MalformedDataset(f"{root}: no subject directories")
    recordings, subjects = [], {}
    for sdir in subject_dirs:
        meta_path = sdir / "meta.json"
        if not meta_path.exists():
            raise MalformedDataset(f"{sdir}: missing meta.json")
        meta = json.loads(meta_path.read_text())
        sid, group = meta.get("subject_id"), meta.get("group")
        if not sid or group not in GROUPS:
            raise MalformedDataset(f"{meta_path}: need subject_id and group in {GROUPS}")
        subjects[sid] = group
        for csv_path in sorted(sdir.glob("task_*.csv")):
            task = csv_path.stem[len("task_"):]
            rows = _read_task_csv(csv_path)
            recordings.append(RawRecording(
                subject_id=sid, group=group, task=task,
                sample_rate_hz=SAMPLE_RATE_HZ,
                left=rows[:, :6], right=rows[:, 6:]))
    return Cohort(recordings=recordings, subjects=subjects).validate()


def _read_task_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 12:
            raise MalformedDataset(f"{path}: expected 12 columns, found {len(header)}")
        for i, line in enumerate(fh, start=2):
            cells = line.strip().split(",")
            if len(cells) != 12:
                raise MalformedDataset(f"{path}: row {i} has {len(cells)} columns, expected 12")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as e:
                raise ParseError(path, i, str(e)) from None
    return np.asarray(rows, dtype=np.float64)


def save_cohort(cohort, out_dir):
    """Write a cohort back out in the loader's layout (%.17g round-trips floats)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in cohort.recordings:
        sdir = out / rec.subject_id
        sdir.mkdir(exist_ok=True)
        (sdir / "meta.json").write_text(
            json.dumps({"subject_id": rec.subject_id, "group": rec.group}))
        data = np.hstack([rec.left, rec.right])
        np.savetxt(sdir / f"task_{rec.task}.csv", data, delimiter=",",
                   header=",".join(CSV_COLUMNS), comments="", fmt="%.17g")


def synth_cohort(n_per_class, duration_s, seed, hf_artifacts=False):
    """Deterministic class-conditional synthetic cohort at 100 Hz.

    HC: low-amplitude broadband noise on both wrists. PD: 4-6 Hz tremor
    with a 4:1 amplitude ratio between wrists (dominant side fixed per
    subject). DD: 6.5-8.5 Hz tremor, near-symmetric. ``hf_artifacts``
    additionally injects a strong 29-31 Hz tone per recording (for the
    band-pass ablation).
    """
    if n_per_class < 1:
        raise InvalidArgument(f"n_per_class must be >= 1, got {n_per_class}")
    if not 10.0 <= duration_s <= 20.0:
        raise InvalidArgument(f"duration_s must be in [10, 20], got {duration_s}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * SAMPLE_RATE_HZ))
    t = np.arange(n) / SAMPLE_RATE_HZ
    noise_sigma = NOISE_FRAC * TREMOR_AMP
    recordings, subjects = [], {}
    for group in GROUPS:
        for idx in range(n_per_class):
            sid = f"SYN_{group}_{idx:03d}"
            subjects[sid] = group
            profile = _subject_profile(rng, group)
            for task in TASKS:
                left = rng.standard_normal((n, 6)) * noise_sigma
                right = rng.standard_normal((n, 6)) * noise_sigma
                if profile is not None:
                    # same per-channel projection on both wrists; only the
                    # amplitude differs across sides (motor asymmetry).
                    # frequency and overall amplitude wander a little per
                    # task so subjects are bands, not single spectral lines
                    freq = profile["freq"] + rng.uniform(-TASK_FREQ_JITTER, TASK_FREQ_JITTER)
                    amp_scale = rng.uniform(*TASK_AMP_RANGE)
                    weights = rng.uniform(0.5, 1.0, size=6)
                    phases = rng.uniform(0.0, 2.0 * np.pi, size=6)
                    tone = np.sin(2.0 * np.pi * freq * t[:, None] + phases) * weights
                    left += amp_scale * profile["amp_left"] * tone
                    right += amp_scale * profile["amp_right"] * tone
                if hf_artifacts:
                    for mat in (left, right):
                        f_hf = rng.uniform(*HF_ARTIFACT_BAND)
                        a_hf = rng.uniform(*HF_ARTIFACT_FRAC) * TREMOR_AMP
                        ph = rng.uniform(0.0, 2.0 * np.pi, size=6)
                        mat += a_hf * np.sin(2.0 * np.pi * f_hf * t[:, None] + ph)
                recordings.append(RawRecording(
                    subject_id=sid, group=group, task=task,
                    sample_rate_hz=SAMPLE_RATE_HZ, left=left, right=right))
    return Cohort(recordings=recordings, subjects=subjects).validate()


def _subject_profile(rng, group):
    """Subject-level tremor profile; the dominant side is a subject trait."""
    if group == "HC":
        return None
    dominant_left = rng.random() < 0.5
    if group == "PD":
        freq = rng.uniform(*PD_BAND)
        amp_dom, amp_oth = TREMOR_AMP, PD_OTHER_FRAC * TREMOR_AMP
    else:
        freq = rng.uniform(*DD_BAND)
        amp_dom, amp_oth = TREMOR_AMP, rng.uniform(*DD_OTHER_FRAC) * TREMOR_AMP
    return {
        "freq": freq,
        "amp_left": amp_dom if dominant_left else amp_oth,
        "amp_right": amp_oth if dominant_left else amp_dom,
    }
