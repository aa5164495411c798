"""From PSG files to labeled 30-second epochs and train/validation/test splits."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.signal

from .edf import EdfFile, SignalHeader, read_edf
from .stages import STAGES, StageLabel

EPOCH_S = 30
TARGET_HZ = 100.0
EPOCH_SAMPLES = int(EPOCH_S * TARGET_HZ)

# R&K hypnogram vocabulary; None marks epochs that are dropped from every split
_RK_LABELS = {
    "W": StageLabel.WAKE, "1": StageLabel.S1, "2": StageLabel.S2,
    "3": StageLabel.SWS, "4": StageLabel.SWS, "R": StageLabel.REM, "?": None,
}


class IngestError(ValueError):
    pass


@dataclass
class Recording:
    id: str
    channels: dict[str, np.ndarray]
    sample_rates: dict[str, float]
    duration_s: float
    subject: str | None = None
    night: int | None = None
    annotations: list[tuple[float, float, str]] = field(default_factory=list)
    headers: dict[str, SignalHeader] = field(default_factory=dict)

    def __post_init__(self):
        for name, x in self.channels.items():
            expected = self.sample_rates[name] * self.duration_s
            if abs(len(x) - expected) > 1e-6 * max(expected, 1):
                raise IngestError(f"{self.id}/{name}: {len(x)} samples, expected {expected:g}")


@dataclass
class LabeledEpoch:
    eeg: np.ndarray
    eog: np.ndarray
    label: StageLabel
    index: int
    recording: str = ""


def recording_from_edf(edf: EdfFile, rec_id: str, subject: str | None = None, night: int | None = None) -> Recording:
    duration = edf.n_records * edf.record_duration
    rates = {s.label: s.samples_per_record / edf.record_duration for s in edf.signals if s.label in edf.data}
    if len(rates) != len(edf.data):
        raise IngestError(f"{rec_id}: duplicate channel names")
    headers = {s.label: s for s in edf.signals if s.label in edf.data}
    return Recording(rec_id, dict(edf.data), rates, duration, subject, night, list(edf.annotations), headers)


def derive_channel(rec: Recording, a: str, b: str, out: str) -> Recording:
    """Add ``out = a - b`` (re-referencing)."""
    for name in (a, b):
        if name not in rec.channels:
            raise IngestError(f"{rec.id}: missing channel {name!r}")
    if rec.sample_rates[a] != rec.sample_rates[b] or len(rec.channels[a]) != len(rec.channels[b]):
        raise IngestError(f"{rec.id}: {a!r} and {b!r} differ in rate or length")
    channels = dict(rec.channels)
    rates = dict(rec.sample_rates)
    channels[out] = rec.channels[a] - rec.channels[b]
    rates[out] = rec.sample_rates[a]
    return Recording(rec.id, channels, rates, rec.duration_s, rec.subject, rec.night, rec.annotations)


def resample(signal, from_hz: float, to_hz: float) -> np.ndarray:
    """Band-limited (FFT) resampling to ``round(len * to_hz / from_hz)`` samples."""
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    x = np.asarray(signal, dtype=np.float64)
    if from_hz == to_hz:
        return x.copy()
    n = int(round(len(x) * to_hz / from_hz))
    return scipy.signal.resample(x, n)


def resample_recording(rec: Recording, channels: Sequence[str], to_hz: float = TARGET_HZ) -> Recording:
    out, rates = {}, {}
    for name in channels:
        if name not in rec.channels:
            raise IngestError(f"{rec.id}: missing channel {name!r}")
        out[name] = resample(rec.channels[name], rec.sample_rates[name], to_hz)
        rates[name] = to_hz
    return Recording(rec.id, out, rates, rec.duration_s, rec.subject, rec.night, rec.annotations)


def stage_from_text(text: str) -> StageLabel | None:
    t = text.strip()
    if t == "Movement time":
        return None
    if t.startswith("Sleep stage "):
        t = t[len("Sleep stage "):]
    if t not in _RK_LABELS:
        raise IngestError(f"unknown hypnogram label {text!r}")
    return _RK_LABELS[t]


def map_hypnogram(raw_labels: Sequence[tuple[float, float, str]]) -> list[StageLabel | None]:
    """One entry per 30 s epoch from onset 0; ``None`` marks excluded epochs.

    Gaps between annotations are excluded epochs.  A trailing excluded
    annotation whose duration is not a multiple of 30 s is truncated.
    """
    out: list[StageLabel | None] = []
    cursor = 0.0
    for onset, duration, text in raw_labels:
        stage = stage_from_text(text)
        if onset < cursor - 1e-6:
            raise IngestError(f"overlapping annotations at {onset} s")
        gap = onset - cursor
        if abs(gap / EPOCH_S - round(gap / EPOCH_S)) > 1e-6:
            raise IngestError(f"annotation onset {onset} s is not on the 30 s epoch grid")
        out.extend([None] * int(round(gap / EPOCH_S)))
        n = duration / EPOCH_S
        if abs(n - round(n)) > 1e-6:
            if stage is not None:
                raise IngestError(f"duration {duration} s of {text!r} is not a multiple of 30 s")
            n = np.floor(n)
        out.extend([stage] * int(round(n)))
        cursor = onset + int(round(n)) * EPOCH_S
    return out


def read_hypnogram_csv(path) -> list[tuple[float, float, str]]:
    """Rows ``onset_s,duration_s,label`` (header optional)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "onset_s":
                continue
            rows.append((float(row[0]), float(row[1]), row[2]))
    return rows


def segment_epochs(rec: Recording, labels: Sequence[StageLabel | None], eeg: str, eog: str) -> list[LabeledEpoch]:
    """Cut consecutive 3000-sample windows; excluded epochs and the trailing remainder are dropped."""
    for name in (eeg, eog):
        if name not in rec.channels:
            raise IngestError(f"{rec.id}: missing channel {name!r}")
        if rec.sample_rates[name] != TARGET_HZ:
            raise IngestError(f"{rec.id}/{name}: expected {TARGET_HZ:g} Hz, got {rec.sample_rates[name]:g}")
    available = min(len(rec.channels[eeg]), len(rec.channels[eog])) // EPOCH_SAMPLES
    if len(labels) > available:
        raise IngestError(f"{rec.id}: {len(labels)} labels but only {available} full epochs of signal")
    out = []
    for i, label in enumerate(labels):
        if label is None:
            continue
        sl = slice(i * EPOCH_SAMPLES, (i + 1) * EPOCH_SAMPLES)
        out.append(LabeledEpoch(rec.channels[eeg][sl].copy(), rec.channels[eog][sl].copy(), StageLabel(label), i, rec.id))
    return out


def load_recording(psg_path, hypnogram_path=None, eeg: str = "EEG Fpz-Cz", eog: str = "EOG horizontal",
                   derive: tuple[str, str] | None = None, rec_id: str | None = None,
                   subject: str | None = None, night: int | None = None) -> list[LabeledEpoch]:
    """Read one PSG file plus its hypnogram (EDF+ or CSV) into labeled epochs.

    ``derive=(a, b)`` builds the EEG channel as ``a - b`` before resampling.
    """
    psg_path = Path(psg_path)
    rec = recording_from_edf(read_edf(psg_path), rec_id or psg_path.stem, subject, night)
    if derive:
        rec = derive_channel(rec, derive[0], derive[1], eeg)
    if hypnogram_path is None:
        raw = rec.annotations
    elif str(hypnogram_path).endswith(".csv"):
        raw = read_hypnogram_csv(hypnogram_path)
    else:
        raw = read_edf(hypnogram_path).annotations
    stage_annotations = [a for a in raw if a[2].startswith("Sleep stage") or a[2] == "Movement time"
                         or a[2].strip() in _RK_LABELS]
    labels = map_hypnogram(sorted(stage_annotations))
    rec = resample_recording(rec, [eeg, eog])
    available = len(rec.channels[eeg]) // EPOCH_SAMPLES
    # hypnograms commonly end with an unscored tail reaching past the signal
    while len(labels) > available and labels[-1] is None:
        labels.pop()
    return segment_epochs(rec, labels, eeg, eog)


# -- splits ---------------------------------------------------------------

@dataclass(frozen=True)
class EpochRef:
    recording: str
    index: int
    label: StageLabel


@dataclass
class RecordingInfo:
    id: str
    subject: str
    night: int
    labels: list[StageLabel]
    indices: list[int] | None = None

    def refs(self) -> list[EpochRef]:
        idx = self.indices if self.indices is not None else range(len(self.labels))
        return [EpochRef(self.id, int(i), StageLabel(lb)) for i, lb in zip(idx, self.labels)]


STRATEGIES = {"night": "night-holdout", "subject": "subject-holdout", "record": "record-holdout",
              "loo": "leave-one-out"}


@dataclass
class DatasetSplit:
    strategy: str
    fold: int
    seed: int
    train_records: list[str]
    validation_records: list[str]
    test_records: list[str]
    train: list[EpochRef] = field(default_factory=list)
    validation: list[EpochRef] = field(default_factory=list)
    test: list[EpochRef] = field(default_factory=list)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in ("train", "validation", "test")}
        for part in ("train", "validation", "test"):
            d[part] = [[r.recording, r.index, int(r.label)] for r in getattr(self, part)]
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        for part in ("train", "validation", "test"):
            d[part] = [EpochRef(r, int(i), StageLabel(lb)) for r, i, lb in d[part]]
        return cls(**d)


def _by_subject(recordings: Sequence[RecordingInfo]):
    subjects: dict[str, list[RecordingInfo]] = {}
    for r in recordings:
        subjects.setdefault(r.subject, []).append(r)
    for recs in subjects.values():
        recs.sort(key=lambda r: r.night)
    multi = sorted(s for s, recs in subjects.items() if len(recs) >= 2)
    single = [r.id for s in sorted(subjects) if len(subjects[s]) == 1 for r in subjects[s]]
    return subjects, multi, single


def build_split(recordings: Sequence[RecordingInfo], strategy: str, fold_index: int = 0, seed: int = 0,
                k: int = 5) -> DatasetSplit:
    """Partition recordings into train/validation/test for one fold.

    ``night``: nights of two-night subjects are dealt into ``k`` folds so the two
    nights of a subject always land in different folds; single-night subjects
    form the validation set.  ``subject``: two-night subjects are dealt into
    ``k`` groups, one group's recordings is the test set.  ``record``: 10% test,
    2% (at least one) validation.  ``loo``: recording ``fold_index`` is the test
    set and one other recording, picked by ``seed``, the validation set.
    """
    strategy = {v: k_ for k_, v in STRATEGIES.items()}.get(strategy, strategy)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown split strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    ids = [r.id for r in recordings]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate recording ids")

    if strategy in ("night", "subject"):
        subjects, multi, single = _by_subject(recordings)
        if not 0 <= fold_index < k:
            raise ValueError(f"fold {fold_index} out of range for k={k}")
        if len(multi) < k:
            raise ValueError(f"{strategy} split needs at least {k} two-night subjects, found {len(multi)}")
        order = [multi[i] for i in rng.permutation(len(multi))]
        if strategy == "night":
            nights = max(len(subjects[s]) for s in order)
            seq = [subjects[s][n].id for n in range(nights) for s in order if n < len(subjects[s])]
            chunks = np.array_split(np.array(seq, dtype=object), k)
            test = list(chunks[fold_index])
        else:
            groups = np.array_split(np.array(order, dtype=object), k)
            test = [r.id for s in groups[fold_index] for r in subjects[s]]
        validation = single
        train = [i for i in ids if i not in set(test) and i not in set(validation)]
    elif strategy == "record":
        if fold_index != 0:
            raise ValueError("record-holdout has a single fold")
        n = len(ids)
        n_test, n_val = max(1, round(0.1 * n)), max(1, round(0.02 * n))
        if n < n_test + n_val + 1:
            raise ValueError(f"record split needs at least {n_test + n_val + 1} recordings")
        perm = [ids[i] for i in rng.permutation(n)]
        test, validation, train = perm[:n_test], perm[n_test:n_test + n_val], perm[n_test + n_val:]
    else:
        n = len(ids)
        if n < 3:
            raise ValueError("leave-one-out needs at least 3 recordings")
        if not 0 <= fold_index < n:
            raise ValueError(f"fold {fold_index} out of range for {n} recordings")
        test = [ids[fold_index]]
        rest = [i for i in ids if i != ids[fold_index]]
        validation = [rest[int(rng.integers(len(rest)))]]
        train = [i for i in rest if i not in validation]

    info = {r.id: r for r in recordings}
    keep = lambda names: [ref for name in names for ref in info[name].refs()]  # noqa: E731
    return DatasetSplit(STRATEGIES[strategy], fold_index, seed, sorted(train), sorted(validation), sorted(test),
                        keep(sorted(train)), keep(sorted(validation)), keep(sorted(test)))


def epoch_census(split: DatasetSplit) -> dict[str, dict[str, int]]:
    """Per-stage epoch counts for each part of the split."""
    out = {}
    for part in ("train", "validation", "test"):
        counts = {s.short: 0 for s in STAGES}
        for ref in getattr(split, part):
            counts[StageLabel(ref.label).short] += 1
        out[part] = counts
    return out
