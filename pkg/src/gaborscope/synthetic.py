"""Synthetic sleep-like signals with known generators.

Used as ground truth for end-to-end checks: the class-defining frequencies are
fixed, so recovered kernels can be compared against them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .edf import write_edf
from .ingest import EPOCH_S, EPOCH_SAMPLES, TARGET_HZ, LabeledEpoch
from .stages import StageLabel

SLOW_HZ = 1.0
SPINDLE_HZ = 14.0
T = np.arange(EPOCH_SAMPLES) / TARGET_HZ

# class A, B, C of the three-class task
THREE_CLASS = {StageLabel.SWS: "slow", StageLabel.S2: "spindle", StageLabel.WAKE: "noise"}


def _noise(rng, scale=1.0):
    return scale * rng.standard_normal(EPOCH_SAMPLES)


def slow_wave(rng, amp=1.5, freq=SLOW_HZ):
    return amp * np.sin(2 * np.pi * freq * T + rng.uniform(0, 2 * np.pi))


def spindle_bursts(rng, amp=2.0, freq=SPINDLE_HZ, n_bursts=(3, 6), length_s=(1.0, 2.0)):
    """Hann-windowed ``freq`` Hz bursts at random positions."""
    x = np.zeros(EPOCH_SAMPLES)
    for _ in range(rng.integers(n_bursts[0], n_bursts[1] + 1)):
        n = int(rng.uniform(*length_s) * TARGET_HZ)
        start = rng.integers(0, EPOCH_SAMPLES - n)
        t = np.arange(n) / TARGET_HZ
        x[start:start + n] += amp * np.hanning(n) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return x


def alpha(rng, amp=1.5):
    return amp * np.sin(2 * np.pi * rng.uniform(9.5, 10.5) * T + rng.uniform(0, 2 * np.pi))


def theta(rng, amp=1.5):
    return amp * np.sin(2 * np.pi * rng.uniform(5.0, 6.0) * T + rng.uniform(0, 2 * np.pi))


def eye_movements(rng, amp=3.0, rate=(6, 12)):
    """Sharp biphasic deflections as in rapid eye movements."""
    x = np.zeros(EPOCH_SAMPLES)
    for _ in range(rng.integers(*rate)):
        c = rng.integers(50, EPOCH_SAMPLES - 50)
        x[c - 50:c + 50] += amp * rng.choice([-1, 1]) * np.sin(np.linspace(0, 2 * np.pi, 100))
    return x


def three_class_epoch(label: StageLabel, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    kind = THREE_CLASS[StageLabel(label)]
    eeg = _noise(rng)
    if kind == "slow":
        eeg += slow_wave(rng)
    elif kind == "spindle":
        eeg += spindle_bursts(rng)
    return eeg, _noise(rng)


def three_class_task(n_per_class: int = 600, seed: int = 0) -> list[LabeledEpoch]:
    """Interleaved epochs of slow-wave (SWS), spindle (S2) and noise-only (Wake) classes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for label in THREE_CLASS:
            eeg, eog = three_class_epoch(label, rng)
            out.append(LabeledEpoch(eeg, eog, label, len(out), "three_class"))
    return out


def stage_epoch(label: StageLabel, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """A 5-stage caricature: alpha wake, theta S1, spindle S2, slow SWS, theta plus eye movements in REM."""
    label = StageLabel(label)
    eeg, eog = _noise(rng), _noise(rng, 0.5)
    if label == StageLabel.WAKE:
        eeg += alpha(rng)
        eog += eye_movements(rng, amp=2.0, rate=(2, 5))
    elif label == StageLabel.S1:
        eeg += theta(rng)
    elif label == StageLabel.S2:
        eeg += spindle_bursts(rng)
    elif label == StageLabel.SWS:
        eeg += slow_wave(rng, amp=2.5)
    else:
        eeg += theta(rng, amp=1.0)
        eog += eye_movements(rng)
    return eeg, eog


def markov_hypnogram(n_epochs: int, rng: np.random.Generator, stay: float = 0.9) -> np.ndarray:
    """Stage sequence that stays put with probability ``stay`` and otherwise moves to a random other stage."""
    stages = np.empty(n_epochs, dtype=np.int64)
    stages[0] = rng.integers(0, 5)
    for i in range(1, n_epochs):
        if rng.random() < stay:
            stages[i] = stages[i - 1]
        else:
            stages[i] = (stages[i - 1] + rng.integers(1, 5)) % 5
    return stages


@dataclass
class SyntheticRecording:
    id: str
    subject: str
    night: int
    epochs: list[LabeledEpoch]
    corrupted: np.ndarray


def markov_cohort(n_subjects: int = 4, nights: int = 2, n_epochs: int = 120, corruption: float = 0.1,
                  seed: int = 0) -> list[SyntheticRecording]:
    """Recordings whose stages follow a sticky Markov chain.

    A ``corruption`` fraction of epochs carry the signal of a different stage
    while keeping their true label, so they can only be recovered from context.
    """
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        for night in range(1, nights + 1):
            rec_id = f"SC4{s:02d}{night}E0"
            labels = markov_hypnogram(n_epochs, rng)
            corrupted = rng.random(n_epochs) < corruption
            epochs = []
            for i, lb in enumerate(labels):
                shown = (lb + rng.integers(1, 5)) % 5 if corrupted[i] else lb
                eeg, eog = stage_epoch(StageLabel(shown), rng)
                epochs.append(LabeledEpoch(eeg, eog, StageLabel(lb), i, rec_id))
            out.append(SyntheticRecording(rec_id, f"{s:02d}", night, epochs, corrupted))
    return out


def write_edf_cohort(recordings: list[SyntheticRecording], out_dir) -> list[tuple[Path, Path]]:
    """Write each recording as ``<id>-PSG.edf`` plus an EDF+ ``<id>-Hypnogram.edf``.

    Channel names and stage annotation texts follow the Sleep-EDF conventions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in recordings:
        eeg = np.concatenate([e.eeg for e in rec.epochs])
        eog = np.concatenate([e.eog for e in rec.epochs])
        psg = out_dir / f"{rec.id}-PSG.edf"
        psg.write_bytes(write_edf({"EEG Fpz-Cz": eeg, "EOG horizontal": eog},
                                  {"EEG Fpz-Cz": TARGET_HZ, "EOG horizontal": TARGET_HZ}, record_duration=EPOCH_S))
        notes = []
        for e in rec.epochs:
            text = "Sleep stage " + ("R" if e.label == StageLabel.REM else
                                     "W" if e.label == StageLabel.WAKE else
                                     "3" if e.label == StageLabel.SWS else str(int(e.label)))
            if notes and notes[-1][2] == text:
                onset, dur, _ = notes[-1]
                notes[-1] = (onset, dur + EPOCH_S, text)
            else:
                notes.append((float(e.index * EPOCH_S), float(EPOCH_S), text))
        hyp = out_dir / f"{rec.id}-Hypnogram.edf"
        hyp.write_bytes(write_edf({}, {}, annotations=notes))
        written.append((psg, hyp))
    return written
