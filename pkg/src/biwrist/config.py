"""Run configuration.

A run config is a JSON document with sections {data, dsp, windowing,
model, train, ssl, stream}; every field is optional and defaults to the
published recipe values. Unknown sections or keys are rejected with the
full list of offending keys. The effective post-default config is echoed
to ``run_config.resolved.json`` in the workdir together with the command
and its arguments; re-running a command from that echo reproduces the
run bit-exactly.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "data": {
        "per_class": 10,
        "duration_s": 12.0,
        "seed": 42,
        "hf_artifacts": False,
    },
    "dsp": {
        "bandpass": True,   # the band-pass ablation flag: False skips filtfilt
    },
    "windowing": {
        "k_folds": 5,
        "fold_seed": 0,
    },
    "model": {
        "d": 64,
        "n_layers": 3,
        "n_heads": 8,
        "ff_dim": 256,
        "dropout": 0.2,
        "mode": "hierarchical",
    },
    "train": {
        "lr": 5e-4,
        "weight_decay": 0.01,
        "batch_size": 32,
        "max_epochs": 100,
        "clip_norm": 1.0,
        "sched_factor": 0.5,
        "sched_patience": 5,
        "seed": 0,
        "accuracy_target": None,
    },
    "ssl": {
        "temperature": 0.1,
        "epochs": 20,
        "batch_size": 32,
        "seed": 0,
        "jitter_sigma": 0.05,
        "warp_knots": 4,
        "warp_sigma": 0.3,
        "choice_prob": 0.5,
    },
    "stream": {
        "n_windows": 200,
        "warmup": 10,
        "seed": 0,
    },
}


def load_config(path=None):
    """Defaults deep-copied, then overridden by the JSON file if given.

    Accepts either a plain sections document or a ``run_config.resolved.json``
    echo (whose sections live under the "config" key).
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    doc = json.loads(Path(path).read_text())
    if set(doc) >= {"command", "config"}:  # a resolved-config echo
        doc = doc["config"]
    problems = []
    for section, fields in doc.items():
        if section not in DEFAULTS:
            problems.append(f"unknown section {section!r}")
            continue
        if not isinstance(fields, dict):
            problems.append(f"section {section!r} must be an object")
            continue
        for key, value in fields.items():
            if key not in DEFAULTS[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            default = DEFAULTS[section][key]
            if default is not None and value is not None and \
                    not isinstance(value, _compatible_types(default)):
                problems.append(f"{section}.{key}: expected {type(default).__name__}, "
                                f"got {type(value).__name__}")
                continue
            cfg[section][key] = value
    if problems:
        raise ConfigError(problems)
    return cfg


def _compatible_types(default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, float):
        return (int, float)
    if isinstance(default, int):
        return int
    return type(default)


def write_resolved(workdir, command, args, cfg):
    path = Path(workdir) / "run_config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(
        {"command": command, "args": args, "config": cfg}, indent=1, sort_keys=True))
    return path
