"""On-disk epoch store: one binary file per recording plus a JSON index.

Binary layout (little-endian)::

    magic    4s   b"GSEP"
    version  u4
    n_epochs u4
    n_chan   u4   (2: EEG, EOG)
    n_samp   u4   (3000)
    labels   u1[n_epochs]
    indices  u4[n_epochs]   epoch ordinals within the recording
    data     f4[n_epochs, n_chan, n_samp]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .ingest import EPOCH_SAMPLES, LabeledEpoch, RecordingInfo
from .stages import StageLabel

MAGIC = b"GSEP"
VERSION = 1
INDEX_NAME = "index.json"
_HEAD = struct.Struct("<4sIIII")


class StoreError(ValueError):
    pass


def write_epochs(path, epochs: list[LabeledEpoch]) -> None:
    n = len(epochs)
    labels = np.array([int(e.label) for e in epochs], dtype="u1")
    indices = np.array([e.index for e in epochs], dtype="<u4")
    data = np.empty((n, 2, EPOCH_SAMPLES), dtype="<f4")
    for i, e in enumerate(epochs):
        data[i, 0] = e.eeg
        data[i, 1] = e.eog
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, n, 2, EPOCH_SAMPLES))
        fh.write(labels.tobytes())
        fh.write(indices.tobytes())
        fh.write(data.tobytes())


def read_epochs(path, rec_id: str = "") -> list[LabeledEpoch]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise StoreError(f"{path}: truncated epoch file")
    magic, version, n, n_chan, n_samp = _HEAD.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise StoreError(f"{path}: not an epoch file (magic {magic!r}, version {version})")
    off = _HEAD.size
    expected = off + n + 4 * n + 4 * n * n_chan * n_samp
    if len(raw) != expected:
        raise StoreError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, "u1", n, off)
    off += n
    indices = np.frombuffer(raw, "<u4", n, off)
    off += 4 * n
    data = np.frombuffer(raw, "<f4", n * n_chan * n_samp, off).reshape(n, n_chan, n_samp)
    return [LabeledEpoch(data[i, 0].astype(np.float64), data[i, 1].astype(np.float64),
                         StageLabel(int(labels[i])), int(indices[i]), rec_id) for i in range(n)]


class EpochStore:
    """A directory of per-recording epoch files described by ``index.json``."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / INDEX_NAME
        if not index_path.exists():
            raise StoreError(f"{self.root}: no {INDEX_NAME}")
        self.index = json.loads(index_path.read_text())
        self._cache: dict[str, list[LabeledEpoch]] = {}

    @staticmethod
    def create(root, recordings: dict[str, tuple[list[LabeledEpoch], dict]]) -> "EpochStore":
        """``recordings`` maps id -> (epochs, metadata with ``subject`` and ``night``)."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for rec_id in sorted(recordings):
            epochs, meta = recordings[rec_id]
            fname = f"{rec_id}.epochs"
            write_epochs(root / fname, epochs)
            entries.append({"id": rec_id, "file": fname, "subject": str(meta.get("subject", rec_id)),
                            "night": int(meta.get("night", 1)), "n_epochs": len(epochs),
                            "labels": [int(e.label) for e in epochs], "indices": [e.index for e in epochs]})
        (root / INDEX_NAME).write_text(json.dumps({"recordings": entries}, indent=1))
        return EpochStore(root)

    @property
    def recording_ids(self) -> list[str]:
        return [r["id"] for r in self.index["recordings"]]

    def info(self) -> list[RecordingInfo]:
        return [RecordingInfo(r["id"], r["subject"], r["night"], [StageLabel(x) for x in r["labels"]], r["indices"])
                for r in self.index["recordings"]]

    def epochs(self, rec_id: str) -> list[LabeledEpoch]:
        if rec_id not in self._cache:
            entry = next((r for r in self.index["recordings"] if r["id"] == rec_id), None)
            if entry is None:
                raise StoreError(f"unknown recording {rec_id!r}")
            self._cache[rec_id] = read_epochs(self.root / entry["file"], rec_id)
        return self._cache[rec_id]

    def resolve(self, refs) -> list[LabeledEpoch]:
        """Epochs for a list of :class:`~gaborscope.ingest.EpochRef`."""
        out = []
        by_rec: dict[str, dict[int, LabeledEpoch]] = {}
        for ref in refs:
            if ref.recording not in by_rec:
                by_rec[ref.recording] = {e.index: e for e in self.epochs(ref.recording)}
            out.append(by_rec[ref.recording][ref.index])
        return out
