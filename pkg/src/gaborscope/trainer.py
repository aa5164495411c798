"""Stage-balanced minibatch training of the single- and multi-epoch networks."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, NonFiniteError, ops, step_decay
from .ingest import LabeledEpoch
from .metrics import confusion, report
from .network import MultiEpochNet, SingleEpochNet, build_windows
from .stages import N_STAGES

log = logging.getLogger(__name__)

ABLATIONS = ("gabor", "plain_conv_200")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite loss or gradient at iteration {iteration}" + (f": {detail}" if detail else ""))
        self.iteration = iteration


@dataclass
class TrainConfig:
    minibatch_size: int = 16
    initial_lr: float = 0.000625
    lr_decay_every: int = 5000
    lr_decay_factor: float = 0.5
    validate_every: int = 1000
    max_iterations: int = 100_000
    patience: int = 20
    seed: int = 0
    ablation: str = "gabor"
    dropout: float = 0.5
    classes: tuple[int, ...] = tuple(range(N_STAGES))

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        for name in ("minibatch_size", "initial_lr", "lr_decay_every", "validate_every", "max_iterations", "patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not self.classes or any(not 0 <= c < N_STAGES for c in self.classes) or len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"classes must be distinct stage indices, got {self.classes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse a JSON object or ``key=value`` lines (``#`` starts a comment)."""
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                return cls.from_dict(json.loads(stripped))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad JSON config: {exc}") from exc
        types = {f.name: f.type for f in fields(cls)}
        d = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            d[key] = _coerce(key, value, types[key])
        return cls.from_dict(d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _coerce(key: str, value: str, typ: str):
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "str":
            return value
        return tuple(int(v) for v in value.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc


@dataclass
class LogRow:
    iteration: int
    train_loss: float
    val_loss: float
    train_kappa: float
    val_kappa: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("log iterations must increase")
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_loss", "val_loss", "train_kappa", "val_kappa"])
            for r in self.rows:
                w.writerow([r.iteration, repr(r.train_loss), repr(r.val_loss), repr(r.train_kappa), repr(r.val_kappa)])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([LogRow(int(r["iteration"]), float(r["train_loss"]), float(r["val_loss"]),
                           float(r["train_kappa"]), float(r["val_kappa"])) for r in rows])


@dataclass
class TrainResult:
    model: object
    log: TrainLog
    best_iteration: int
    best_kappa: float


# -- data -------------------------------------------------------------------

@dataclass
class EpochArrays:
    """Epochs packed as arrays: ``eeg``/``eog`` are ``(N, 3000)``, ``labels`` ``(N,)``."""

    eeg: np.ndarray
    eog: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_epochs(cls, epochs: Sequence[LabeledEpoch]) -> "EpochArrays":
        if not epochs:
            raise ConfigError("no epochs")
        return cls(np.stack([e.eeg for e in epochs]).astype(np.float32),
                   np.stack([e.eog for e in epochs]).astype(np.float32),
                   np.array([int(e.label) for e in epochs], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)


def stage_pools(labels: np.ndarray, classes: Sequence[int]) -> dict[int, np.ndarray]:
    """Indices of each configured class; a class with no epochs is a configuration error."""
    labels = np.asarray(labels)
    pools = {c: np.flatnonzero(labels == c) for c in classes}
    empty = [c for c, idx in pools.items() if len(idx) == 0]
    if empty:
        raise ConfigError(f"no training epochs for stage(s) {empty}")
    return pools


def sample_minibatch(pools: dict[int, Sequence], size: int, rng: np.random.Generator) -> list:
    """Each slot draws a stage uniformly, then an item uniformly within that stage."""
    stages = sorted(pools)
    for s in stages:
        if len(pools[s]) == 0:
            raise ConfigError(f"no training epochs for stage {s}")
    picks = rng.integers(0, len(stages), size=size)
    return [pools[stages[k]][rng.integers(0, len(pools[stages[k]]))] for k in picks]


def cross_entropy(logits, target: int) -> float:
    """``-log softmax(logits)[target]`` for one logit vector."""
    return float(-ops.log_softmax(np.asarray(logits, dtype=np.float64)[None, :])[0, target])


def _kappa(truth, pred) -> float:
    cm = confusion(truth, pred)
    return report(cm).kappa if cm.sum() else float("nan")


# -- loop ---------------------------------------------------------------------

def _snapshot(model) -> dict[str, np.ndarray]:
    out = {k: t.data.copy() for k, t in model.parameters().items()}
    out.update({k: v.copy() for k, v in model.buffers().items()})
    return out


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for k, t in params.items():
        t.data = snap[k].copy()
    model.load_buffers({k: v for k, v in snap.items() if k not in params})


def fit(model, config: TrainConfig, pools: dict[int, np.ndarray],
        forward_batch: Callable[[np.ndarray, np.random.Generator], object],
        train_labels: np.ndarray,
        evaluate: Callable[[], tuple[np.ndarray, np.ndarray]]) -> TrainResult:
    """Shared optimisation loop.

    ``forward_batch(idx, rng)`` returns train-mode logits for training items
    ``idx``; ``evaluate()`` returns eval-mode validation ``(logits, labels)``.
    """
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.parameters(), lr=config.initial_lr)
    result_log = TrainLog()
    best = (-np.inf, 0, None)
    stale = 0
    losses, truth, preds = [], [], []
    for it in range(config.max_iterations):
        opt.lr = step_decay(it, config.initial_lr, config.lr_decay_every, config.lr_decay_factor)
        idx = np.asarray(sample_minibatch(pools, config.minibatch_size, rng))
        y = train_labels[idx]
        try:
            logits = forward_batch(idx, drop_rng)
            loss = ops.softmax_cross_entropy(logits, y)
            loss.backward()
            model.before_step()
            opt.step()
            model.after_step()
        except NonFiniteError as exc:
            raise DivergenceError(it + 1, str(exc)) from exc
        losses.append(float(loss.data))
        truth.extend(y.tolist())
        preds.extend(logits.data.argmax(axis=1).tolist())
        done = it + 1
        if done % config.validate_every and done != config.max_iterations:
            continue
        val_logits, val_labels = evaluate()
        logp = ops.log_softmax(val_logits)
        val_loss = float(-logp[np.arange(len(val_labels)), val_labels].mean())
        val_kappa = _kappa(val_labels, val_logits.argmax(axis=1))
        row = LogRow(done, float(np.mean(losses)), val_loss, _kappa(truth, preds), val_kappa)
        result_log.append(row)
        log.info("iter %d train_loss %.4f val_loss %.4f val_kappa %.4f lr %.3g", done, row.train_loss,
                 val_loss, val_kappa, opt.lr)
        losses, truth, preds = [], [], []
        if best[2] is None or val_kappa > best[0]:
            best = (val_kappa, done, _snapshot(model))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, best[2])
    return TrainResult(model, result_log, best[1], float(best[0]))


def build_single(config: TrainConfig, seed: int | None = None) -> SingleEpochNet:
    return SingleEpochNet(seed=config.seed if seed is None else seed, first_layer=config.ablation,
                          dropout=config.dropout)


def train_single(config: TrainConfig, train: EpochArrays, val: EpochArrays,
                 model: SingleEpochNet | None = None) -> TrainResult:
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    model = model or build_single(config)
    pools = stage_pools(train.labels, config.classes)

    def forward_batch(idx, rng):
        return model.forward(train.eeg[idx], train.eog[idx], training=True, rng=rng)

    def evaluate():
        return model.predict_logits(val.eeg, val.eog), val.labels

    return fit(model, config, pools, forward_batch, train.labels, evaluate)


@dataclass
class WindowSet:
    """Multi-epoch inputs: ``windows`` ``(N, 9, 5)`` of single-epoch probabilities and centre labels."""

    windows: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def single_outputs(single: SingleEpochNet, recordings: Sequence[Sequence[LabeledEpoch]]) -> WindowSet:
    """Run the frozen single-epoch net once per recording and window its softmax outputs."""
    windows, labels = [], []
    for epochs in recordings:
        if not epochs:
            continue
        arr = EpochArrays.from_epochs(epochs)
        probs = ops.softmax(single.predict_logits(arr.eeg, arr.eog))
        windows.append(build_windows(probs))
        labels.append(arr.labels)
    if not windows:
        raise ConfigError("no epochs")
    return WindowSet(np.concatenate(windows), np.concatenate(labels))


def train_multi(config: TrainConfig, train: WindowSet, val: WindowSet,
                model: MultiEpochNet | None = None) -> TrainResult:
    """Train the context network on precomputed single-epoch probability windows."""
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    model = model or MultiEpochNet(seed=config.seed)
    pools = stage_pools(train.labels, config.classes)

    def forward_batch(idx, rng):
        return model.forward(train.windows[idx], training=True, rng=rng)

    def evaluate():
        return model.predict_logits(val.windows), val.labels

    return fit(model, config, pools, forward_batch, train.labels, evaluate)
