"""Labeled synthetic EEG: sinusoid mixtures with class-dependent band tones."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .signal_io import Recording, load_container, save_container
from .topology import get_montage

# one tone per class, each sitting in a different canonical frequency band
CLASS_TONES = {"class-a": 6.0, "class-b": 10.0, "class-c": 20.0}

DATASET_MANIFEST = "dataset.json"
LABELS_FILE = "labels.csv"


def make_recording(
    label: str,
    channels: tuple[str, ...],
    rng: np.random.Generator,
    fs: float = 200.0,
    seconds: float = 2.0,
    noise: float = 0.25,
    amp: float = 1.0,
) -> Recording:
    """One sample: class tone + class-neutral slow drift + white noise."""
    if label not in CLASS_TONES:
        raise ConfigError(f"unknown class {label!r}; valid classes: {sorted(CLASS_TONES)}")
    tone = CLASS_TONES[label]
    t = np.arange(int(round(fs * seconds))) / fs
    if t.size < 1:
        raise ConfigError(f"duration {seconds}s at {fs} Hz yields no samples")
    data = np.empty((len(channels), t.size))
    for c in range(len(channels)):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        drift_phase = rng.uniform(0.0, 2.0 * np.pi)
        data[c] = (
            amp * np.sin(2.0 * np.pi * tone * t + phase)
            + 0.2 * np.sin(2.0 * np.pi * 1.5 * t + drift_phase)
            + noise * rng.standard_normal(t.size)
        )
    return Recording(channels=channels, fs=fs, data=data)


def make_dataset(
    out_dir: str | Path,
    n_per_class: int = 8,
    classes: tuple[str, ...] = ("class-a", "class-b", "class-c"),
    montage: str | None = "synthetic-4",
    fs: float = 200.0,
    seconds: float = 2.0,
    noise: float = 0.25,
    seed: int = 0,
) -> dict:
    """Write a labeled dataset directory: containers + labels.csv + dataset.json."""
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    channels = get_montage(montage).labels
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names, labels = [], []
    for i in range(n_per_class * len(classes)):
        label = classes[i % len(classes)]
        name = f"sample_{i:04d}"
        rec = make_recording(label, channels, rng, fs=fs, seconds=seconds, noise=noise)
        save_container(rec, root / name)
        names.append(name)
        labels.append(label)
    with open(root / LABELS_FILE, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "label"])
        writer.writerows(zip(names, labels))
    manifest = {
        "classes": list(classes),
        "montage": montage,
        "fs": fs,
        "seconds": seconds,
        "noise": noise,
        "seed": seed,
        "n_per_class": n_per_class,
        "samples": names,
    }
    (root / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_labels(dataset_dir: str | Path) -> dict[str, str]:
    """Read labels.csv as {sample name: label}."""
    path = Path(dataset_dir) / LABELS_FILE
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataError(f"cannot read label file {path}: {e}") from e
    if not rows or rows[0] != ["name", "label"]:
        raise DataError(f"label file {path} must start with a 'name,label' header")
    out = {}
    for row in rows[1:]:
        if len(row) != 2:
            raise DataError(f"malformed label row {row!r} in {path}")
        out[row[0]] = row[1]
    return out


def load_corpus(
    dataset_dir: str | Path, require_labels: bool = False
) -> list[tuple[str, Recording, str | None]]:
    """Load every container under a dataset directory with optional labels."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    sample_dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not sample_dirs:
        raise DataError(f"no containers found under {root}")
    labels: dict[str, str] = {}
    if (root / LABELS_FILE).is_file():
        labels = read_labels(root)
    elif require_labels:
        raise DataError(f"dataset {root} has no {LABELS_FILE}")
    out = []
    for sample in sample_dirs:
        label = labels.get(sample.name)
        if require_labels and label is None:
            raise DataError(f"sample {sample.name!r} missing from {LABELS_FILE}")
        out.append((sample.name, load_container(sample), label))
    return out
