"""EDF / EDF+ reading and writing.

Only what polysomnography ingestion needs: ordinary 16-bit signals with the
linear digital->physical scaling, and EDF+ ``EDF Annotations`` channels, whose
time-stamped annotation lists (TALs) carry hypnograms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

ANNOTATION_LABEL = "EDF Annotations"
HEADER_BYTES = 256
SIGNAL_HEADER_BYTES = 256

# (name, width) for the per-signal header block; each field is stored for all signals in turn
_SIGNAL_FIELDS = [
    ("label", 16), ("transducer", 80), ("physical_dimension", 8),
    ("physical_min", 8), ("physical_max", 8), ("digital_min", 8), ("digital_max", 8),
    ("prefiltering", 80), ("samples_per_record", 8), ("reserved", 32),
]

_TAL = re.compile(
    r"(?P<onset>[+\-]\d+(?:\.\d*)?)"
    r"(?:\x15(?P<duration>\d+(?:\.\d*)?))?"
    r"\x14(?P<annotation>[^\x00]*?)\x14?\x00"
)


class EdfError(ValueError):
    """Malformed EDF input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class SignalHeader:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    physical_dimension: str = "uV"
    transducer: str = ""
    prefiltering: str = ""

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        return (digital.astype(np.float64) - self.digital_min) * self.gain + self.physical_min

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        d = np.round((np.asarray(physical, dtype=np.float64) - self.physical_min) / self.gain + self.digital_min)
        return np.clip(d, self.digital_min, self.digital_max).astype("<i2")


@dataclass
class EdfFile:
    patient: str
    recording: str
    start_date: str
    start_time: str
    reserved: str
    n_records: int
    record_duration: float
    signals: list[SignalHeader]
    data: dict[str, np.ndarray] = field(default_factory=dict)
    annotations: list[tuple[float, float, str]] = field(default_factory=list)

    @property
    def is_edf_plus(self) -> bool:
        return self.reserved.startswith("EDF+")

    def sample_rate(self, label: str) -> float:
        sig = next(s for s in self.signals if s.label == label)
        return sig.samples_per_record / self.record_duration


def _field(raw: bytes, start: int, width: int) -> str:
    return raw[start:start + width].decode("ascii", errors="replace").strip()


def _number(raw: bytes, start: int, width: int, kind=float):
    text = _field(raw, start, width)
    try:
        return kind(float(text)) if kind is int else kind(text)
    except ValueError:
        raise EdfError(f"non-numeric header field {text!r}", start) from None


def parse_tal(raw: bytes) -> list[tuple[float, float, str]]:
    """Annotations ``(onset_s, duration_s, text)`` from one record of an annotation signal.

    Timekeeping TALs (empty text) are skipped.
    """
    text = raw.decode("latin-1")
    out = []
    for m in _TAL.finditer(text):
        dur = float(m.group("duration")) if m.group("duration") else 0.0
        for ann in m.group("annotation").split("\x14"):
            if ann:
                out.append((float(m.group("onset")), dur, ann))
    return out


def parse_edf(raw: bytes) -> EdfFile:
    """Decode a complete EDF/EDF+ file held in memory."""
    if len(raw) < HEADER_BYTES:
        raise EdfError(f"truncated file: {len(raw)} bytes, need a {HEADER_BYTES}-byte header", len(raw))
    header_bytes = _number(raw, 184, 8, int)
    n_records = _number(raw, 236, 8, int)
    record_duration = _number(raw, 244, 8, float)
    ns = _number(raw, 252, 4, int)
    if ns < 0 or header_bytes != HEADER_BYTES + ns * SIGNAL_HEADER_BYTES:
        raise EdfError(f"header declares {header_bytes} bytes for {ns} signals", 184)
    if len(raw) < header_bytes:
        raise EdfError(f"truncated file: signal headers need {header_bytes} bytes, got {len(raw)}", len(raw))

    columns: dict[str, list] = {}
    pos = HEADER_BYTES
    for name, width in _SIGNAL_FIELDS:
        vals = []
        for i in range(ns):
            start = pos + i * width
            if name in ("physical_min", "physical_max"):
                vals.append(_number(raw, start, width, float))
            elif name in ("digital_min", "digital_max", "samples_per_record"):
                vals.append(_number(raw, start, width, int))
            else:
                vals.append(_field(raw, start, width))
        columns[name] = vals
        pos += ns * width
    signals = [
        SignalHeader(label=columns["label"][i], physical_min=columns["physical_min"][i],
                     physical_max=columns["physical_max"][i], digital_min=columns["digital_min"][i],
                     digital_max=columns["digital_max"][i], samples_per_record=columns["samples_per_record"][i],
                     physical_dimension=columns["physical_dimension"][i], transducer=columns["transducer"][i],
                     prefiltering=columns["prefiltering"][i])
        for i in range(ns)
    ]
    for i, s in enumerate(signals):
        if s.digital_max <= s.digital_min:
            raise EdfError(f"signal {s.label!r} has empty digital range", HEADER_BYTES + ns * 120 + i * 8)

    record_samples = sum(s.samples_per_record for s in signals)
    record_bytes = 2 * record_samples
    body = len(raw) - header_bytes
    if n_records == -1 and record_bytes:
        n_records = body // record_bytes
    expected = n_records * record_bytes
    if body != expected:
        raise EdfError(
            f"header/data length mismatch: {n_records} records need {expected} data bytes, found {body}",
            header_bytes + min(body, expected))

    edf = EdfFile(
        patient=_field(raw, 8, 80), recording=_field(raw, 88, 80),
        start_date=_field(raw, 168, 8), start_time=_field(raw, 176, 8),
        reserved=_field(raw, 192, 44), n_records=n_records,
        record_duration=record_duration, signals=signals,
    )
    samples = np.frombuffer(raw, dtype="<i2", offset=header_bytes, count=n_records * record_samples)
    samples = samples.reshape(n_records, record_samples)
    col = 0
    for s in signals:
        block = samples[:, col:col + s.samples_per_record]
        col += s.samples_per_record
        if s.label == ANNOTATION_LABEL:
            for rec in block:
                edf.annotations.extend(parse_tal(rec.tobytes()))
        else:
            edf.data[s.label] = s.to_physical(block.reshape(-1))
    return edf


def read_edf(path) -> EdfFile:
    with open(path, "rb") as fh:
        return parse_edf(fh.read())


# -- writing --------------------------------------------------------------

def _fmt(value, width: int) -> bytes:
    text = str(value)
    if len(text) > width:
        raise ValueError(f"{text!r} does not fit in {width} characters")
    return text.ljust(width).encode("ascii")


def _fit(value: float) -> float:
    """Round ``value`` so it prints in an 8-character header field."""
    for digits in range(8, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= 8:
            return float(text)
    raise ValueError(f"cannot encode {value} in 8 characters")


def _float_text(value: float) -> str:
    for digits in range(8, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= 8 and float(text) == value:
            return text
    raise ValueError(f"{value} is not exactly representable in 8 characters; round it with _fit first")


def signal_header_for(label: str, samples: np.ndarray, samples_per_record: int,
                      dimension: str = "uV") -> SignalHeader:
    """A header whose physical range covers ``samples`` with 16-bit resolution."""
    lo, hi = float(np.min(samples)), float(np.max(samples))
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    lo, hi = _fit(lo - 1e-3 * span), _fit(hi + 1e-3 * span)
    return SignalHeader(label, lo, hi, -32768, 32767, samples_per_record, physical_dimension=dimension)


def _tal_record(entries: list[tuple[float, float, str]], record_onset: float, n_bytes: int) -> bytes:
    out = f"+{record_onset:g}\x14\x14\x00".encode("latin-1")
    for onset, dur, text in entries:
        out += f"+{onset:g}\x15{dur:g}\x14{text}\x14\x00".encode("latin-1")
    if len(out) > n_bytes:
        raise ValueError("annotations do not fit in the annotation record")
    return out.ljust(n_bytes, b"\x00")


def write_edf(signals: dict[str, np.ndarray], sample_rates: dict[str, float], record_duration: float = 1.0,
              headers: dict[str, SignalHeader] | None = None,
              annotations: list[tuple[float, float, str]] | None = None,
              patient: str = "X X X X", recording: str = "Startdate X X X X",
              start_date: str = "01.01.00", start_time: str = "00.00.00") -> bytes:
    """Encode signals (physical units) as EDF, or EDF+ when ``annotations`` is given.

    Every signal must span a whole number of records.  ``headers`` lets a caller
    reuse existing scaling so already-quantized samples survive a round trip
    bit for bit.  Annotations all go in the first data record.
    """
    headers = dict(headers or {})
    per_record, n_records = {}, None
    for label, x in signals.items():
        spr = sample_rates[label] * record_duration
        if abs(spr - round(spr)) > 1e-9:
            raise ValueError(f"{label}: {sample_rates[label]} Hz does not give whole samples per record")
        spr = int(round(spr))
        if len(x) % spr:
            raise ValueError(f"{label}: {len(x)} samples is not a whole number of records")
        n = len(x) // spr
        if n_records is None:
            n_records = n
        elif n != n_records:
            raise ValueError("signals cover different durations")
        per_record[label] = spr
        if label not in headers:
            headers[label] = signal_header_for(label, x, spr)
    if n_records is None:
        n_records = 1 if annotations else 0
    hdrs = [headers[label] for label in signals]
    if annotations is not None:
        ann_bytes = 64 + sum(len(f"+{o:g}\x15{d:g}\x14{t}\x14\x00") for o, d, t in annotations)
        ann_samples = (ann_bytes + 1) // 2
        hdrs.append(SignalHeader(ANNOTATION_LABEL, -1.0, 1.0, -32768, 32767, ann_samples, physical_dimension=""))

    ns = len(hdrs)
    head = b"".join([
        _fmt("0", 8), _fmt(patient, 80), _fmt(recording, 80), _fmt(start_date, 8), _fmt(start_time, 8),
        _fmt(HEADER_BYTES + ns * SIGNAL_HEADER_BYTES, 8),
        _fmt("EDF+C" if annotations is not None else "", 44),
        _fmt(n_records, 8), _fmt(_float_text(_fit(record_duration)), 8), _fmt(ns, 4),
    ])
    for name, width in _SIGNAL_FIELDS:
        for h in hdrs:
            value = "" if name == "reserved" else getattr(h, name)
            if isinstance(value, float):
                value = _float_text(value)
            head += _fmt(value, width)

    digital = {label: headers[label].to_digital(x).reshape(n_records, per_record[label])
               for label, x in signals.items()}
    body = bytearray()
    for r in range(n_records):
        for label in signals:
            body += digital[label][r].tobytes()
        if annotations is not None:
            entries = annotations if r == 0 else []
            body += _tal_record(entries, r * record_duration, 2 * hdrs[-1].samples_per_record)
    return head + bytes(body)
