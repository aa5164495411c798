"""Kernel-level attribution for a trained single-epoch network.

For kernel ``i`` with activation ``GL_i(t)`` and a target logit ``O[c]``:

    Sen_i(t) = dO[c] / dGL_i(t)
    Eff_i(t) = GL_i(t) * Sen_i(t) * [Sen_i(t) > 0]
    Effbar_i = sum_t Eff_i(t)^2

Per-epoch ``Effbar`` values are then aggregated per stage and over stages with
each stage weighted by ``1 / N_j``.
"""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .autodiff import Tensor, ops
from .gabor import FS, N_TAPS, write_bank_export
from .metrics import AgreementMatrix, write_agreement_csv
from .network import EEG_KERNELS, SingleEpochNet
from .stages import N_STAGES, STAGES

SIGNIFICANCE = 0.05


@contextmanager
def frozen(model):
    """Stop gradient bookkeeping on model parameters for the duration."""
    params = list(model.parameters().values())
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def sensitivity(model: SingleEpochNet, eeg, eog, classes, softmax: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """First-layer activations and the gradient of the target output w.r.t. them.

    ``eeg``/``eog`` are ``(B, 3000)``, ``classes`` one target per epoch.  The
    target is the raw logit ``O[c]``, or ``softmax(O)[c]`` with ``softmax``.
    Returns ``(activations, sensitivity)``, both ``(B, T, 40)``.  Evaluation is
    in eval mode, so epochs in a batch do not interact.
    """
    classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    with frozen(model):
        act = model.first_layer(eeg, eog).data
        leaf = Tensor(act, requires_grad=True)
        out = model.head(leaf, training=False)
        rows = np.arange(len(classes))
        seed = np.zeros(out.shape, dtype=out.dtype)
        if softmax:
            p = ops.softmax(out.data.astype(np.float64))
            pc = p[rows, classes]
            seed[:] = -pc[:, None] * p
            seed[rows, classes] += pc
        else:
            seed[rows, classes] = 1.0
        out.backward(seed)
    return act, leaf.grad


def effect_series(activations: np.ndarray, sens: np.ndarray) -> np.ndarray:
    """``GL * Sen`` where the sensitivity is strictly positive, zero elsewhere."""
    activations = np.asarray(activations, dtype=np.float64)
    sens = np.asarray(sens, dtype=np.float64)
    return np.where(sens > 0, activations * sens, 0.0)


def effect_scalar(eff_t: np.ndarray, axis: int = -2) -> np.ndarray:
    """Sum of squares over time (axis ``-2`` of ``(..., T, K)``)."""
    return np.sum(np.square(eff_t), axis=axis)


@dataclass
class EffectRecord:
    klass: int
    eff_t: np.ndarray  # (T, K)
    eff_bar: np.ndarray  # (K,)


def effect(model: SingleEpochNet, eeg, eog, klass: int, softmax: bool = False) -> EffectRecord:
    act, sen = sensitivity(model, np.atleast_2d(eeg), np.atleast_2d(eog), [klass], softmax)
    eff_t = effect_series(act[0], sen[0])
    return EffectRecord(int(klass), eff_t, effect_scalar(eff_t))


def epoch_effects(model: SingleEpochNet, eeg, eog, classes, batch_size: int = 16, softmax: bool = False,
                  traces: Sequence[int] = ()) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """``Effbar`` for every epoch ``(N, K)`` plus full ``Eff(t)`` for epochs listed in ``traces``."""
    classes = np.asarray(classes, dtype=np.int64)
    traces = set(int(i) for i in traces)
    bars, kept = [], {}
    for s in range(0, len(classes), batch_size):
        act, sen = sensitivity(model, eeg[s:s + batch_size], eog[s:s + batch_size], classes[s:s + batch_size], softmax)
        eff = effect_series(act, sen)
        bars.append(effect_scalar(eff))
        for j in range(len(eff)):
            if s + j in traces:
                kept[s + j] = eff[j]
    return np.concatenate(bars) if bars else np.zeros((0, 0)), kept


@dataclass
class EffectSummary:
    eff: np.ndarray  # (K,) stage-weighted overall impact
    top: np.ndarray  # (K,) stage-weighted top-impact frequency
    eff_stage: np.ndarray  # (K, 5)
    top_stage: np.ndarray  # (K, 5) integer counts
    n_stage: np.ndarray  # (5,)
    skipped: list[int] = field(default_factory=list)


def top_kernels(eff_bar: np.ndarray) -> np.ndarray:
    """Index of the largest ``Effbar`` per epoch; ties go to the lowest index."""
    return np.argmax(np.asarray(eff_bar), axis=1)


def summarize(eff_bar: np.ndarray, stages: Sequence[int], n_stages: int = N_STAGES) -> EffectSummary:
    """Aggregate ``(N, K)`` per-epoch effects; stages with no epochs are skipped and listed."""
    eff_bar = np.asarray(eff_bar, dtype=np.float64)
    stages = np.asarray(stages, dtype=np.int64)
    n, k = eff_bar.shape
    if len(stages) != n:
        raise ValueError(f"{len(stages)} stage labels for {n} epochs")
    winners = top_kernels(eff_bar)
    n_stage = np.bincount(stages, minlength=n_stages)
    eff_stage = np.zeros((k, n_stages))
    top_stage = np.zeros((k, n_stages), dtype=np.int64)
    skipped = []
    for j in range(n_stages):
        mask = stages == j
        if n_stage[j] == 0:
            skipped.append(j)
            continue
        eff_stage[:, j] = eff_bar[mask].sum(axis=0) / n_stage[j]
        top_stage[:, j] = np.bincount(winners[mask], minlength=k)
    present = n_stage > 0
    eff = eff_stage[:, present].sum(axis=1)
    top = (top_stage[:, present] / n_stage[present]).sum(axis=1)
    return EffectSummary(eff, top, eff_stage, top_stage, n_stage, skipped)


def modality_ratio(eff_bar_row: np.ndarray, n_eeg: int = EEG_KERNELS) -> float | None:
    """Mean EEG-kernel ``Effbar`` over mean EOG-kernel ``Effbar``; ``None`` when the EOG mean is zero."""
    row = np.asarray(eff_bar_row, dtype=np.float64)
    eog = row[n_eeg:].mean()
    if eog == 0:
        return None
    return float(row[:n_eeg].mean() / eog)


def stage_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch t-test; groups with no spread in either sample give ``(0, 1)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two values")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 0.0, 1.0
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def _activation_times(n: int) -> np.ndarray:
    # activation i covers input samples i..i+199; it is stamped at the kernel's t=0 tap
    return (np.arange(n) + N_TAPS // 2) / FS


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _num(v) -> str:
    return repr(float(v))


def interpretation_report(model: SingleEpochNet, eeg, eog, labels, out_dir, predicted=None,
                          epoch_ids: Sequence[tuple[str, int]] | None = None, trace_epochs: Sequence[int] = (),
                          agreement: AgreementMatrix | None = None, softmax: bool = False) -> list[Path]:
    """Write every interpretation artifact for a test set into ``out_dir``; returns the file list.

    The target class is the true label, or ``predicted`` when given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels, dtype=np.int64)
    classes = labels if predicted is None else np.asarray(predicted, dtype=np.int64)
    epoch_ids = list(epoch_ids) if epoch_ids is not None else [("", i) for i in range(len(labels))]
    eff_bar, traces = epoch_effects(model, eeg, eog, classes, softmax=softmax, traces=trace_epochs)
    summary = summarize(eff_bar, labels)
    k = eff_bar.shape[1]
    modality = ["EEG" if i < EEG_KERNELS else "EOG" for i in range(k)]
    files: list[Path] = []

    if model.first_layer_kind == "gabor":
        files += write_bank_export([model.eeg_bank, model.eog_bank], out_dir)

    eff_max = summary.eff.max() if summary.eff.max() > 0 else 1.0
    top_max = summary.top.max() if summary.top.max() > 0 else 1.0
    files.append(_write_csv(out_dir / "kernel_impact.csv",
                            ["kernel", "modality", "eff", "eff_normalized", "top", "top_normalized"],
                            [(i, modality[i], _num(summary.eff[i]), _num(summary.eff[i] / eff_max),
                              _num(summary.top[i]), _num(summary.top[i] / top_max)) for i in range(k)]))
    files.append(_write_csv(out_dir / "stage_impact.csv", ["kernel", "stage", "eff", "top_count"],
                            [(i, s.short, _num(summary.eff_stage[i, s]), int(summary.top_stage[i, s]))
                             for i in range(k) for s in STAGES]))
    files.append(_write_csv(out_dir / "epoch_effects.csv",
                            ["epoch", "recording", "index", "true_label", "target_class"] + [f"k{i}" for i in range(k)],
                            [(n, rec, idx, int(labels[n]), int(classes[n])) + tuple(_num(v) for v in eff_bar[n])
                             for n, (rec, idx) in enumerate(epoch_ids)]))

    by_stage = {s: np.flatnonzero(labels == s) for s in range(N_STAGES)}
    tests = []
    for a, b in combinations(range(N_STAGES), 2):
        if len(by_stage[a]) < 2 or len(by_stage[b]) < 2:
            continue
        for i in range(k):
            t, p = stage_test(eff_bar[by_stage[a], i], eff_bar[by_stage[b], i])
            tests.append((i, STAGES[a].short, STAGES[b].short, _num(t), _num(p), int(p < SIGNIFICANCE)))
    files.append(_write_csv(out_dir / "stage_tests.csv", ["kernel", "stage_a", "stage_b", "t", "p", "significant"],
                            tests))

    ratios = [modality_ratio(row) for row in eff_bar]
    files.append(_write_csv(out_dir / "modality_ratios.csv", ["epoch", "stage", "ratio", "defined"],
                            [(n, STAGES[labels[n]].short, "" if r is None else _num(r), int(r is not None))
                             for n, r in enumerate(ratios)]))
    ratio_tests = []
    for a, b in combinations(range(N_STAGES), 2):
        ra = [ratios[n] for n in by_stage[a] if ratios[n] is not None]
        rb = [ratios[n] for n in by_stage[b] if ratios[n] is not None]
        if len(ra) >= 2 and len(rb) >= 2:
            t, p = stage_test(ra, rb)
            ratio_tests.append((STAGES[a].short, STAGES[b].short, _num(t), _num(p), int(p < SIGNIFICANCE)))
    files.append(_write_csv(out_dir / "modality_tests.csv", ["stage_a", "stage_b", "t", "p", "significant"],
                            ratio_tests))

    trace_rows = []
    for n in sorted(traces):
        eff = traces[n]
        times = _activation_times(len(eff))
        trace_rows += [(n, i, _num(times[t]), _num(eff[t, i])) for i in range(k) for t in range(len(eff))]
    files.append(_write_csv(out_dir / "eff_traces.csv", ["epoch", "kernel", "t", "value"], trace_rows))

    if agreement is not None:
        path = out_dir / "agreement.csv"
        write_agreement_csv(path, agreement)
        files.append(path)

    manifest = out_dir / "interpretation.json"
    manifest.write_text(json.dumps({
        "n_epochs": int(len(labels)),
        "n_stage": summary.n_stage.tolist(),
        "skipped_stages": [STAGES[j].short for j in summary.skipped],
        "target": "predicted" if predicted is not None else "true",
        "output": "softmax" if softmax else "logit",
        "files": [p.name for p in files],
    }, indent=2))
    files.append(manifest)
    return files
