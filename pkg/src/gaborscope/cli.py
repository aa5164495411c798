"""Command-line pipeline: ingest, split, train, score, evaluate, interpret, export.

Exit codes: 0 success, 2 bad or missing flags/config, 3 data errors, 4 training
divergence.  Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .edf import EdfError
from .gabor import write_bank_export
from .ingest import DatasetSplit, IngestError, build_split, epoch_census, load_recording
from .metrics import agreement_matrix, confusion, fold_summary, report, write_agreement_csv, write_confusion_csv
from .network import score_recording
from .stages import STAGES, StageLabel
from .store import EpochStore, StoreError
from .trainer import (ConfigError, DivergenceError, EpochArrays, TrainConfig, single_outputs, train_multi,
                      train_single)

log = logging.getLogger("gaborscope")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
HYPNOGRAM_HEADER = ["epoch_index", "single_pred", "multi_pred", "true_label"]


class UsageError(Exception):
    pass


# -- run manifest ----------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, seed: int | None, files: list[Path], config: dict | None = None,
                   dataset: str | None = None, checkpoints: list[str] | None = None) -> Path:
    """Record what a command produced; no timestamps, so reruns give the same bytes."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
        "config": config,
        "dataset_fingerprint": dataset,
        "checkpoints": checkpoints or [],
        "files": {p.relative_to(out_dir).as_posix() if p.is_relative_to(out_dir) else str(p): file_digest(p)
                  for p in sorted(files)},
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# -- helpers -------------------------------------------------------------------------

def _recording_meta(rec_id: str) -> tuple[str, int]:
    """Subject and night from Sleep-EDF style ids (``SC4ssN...``); otherwise the id is the subject."""
    if len(rec_id) >= 6 and rec_id[:3] == "SC4" and rec_id[3:6].isdigit():
        return rec_id[3:5], int(rec_id[5])
    return rec_id, 1


def _find_pairs(data_dir: Path) -> list[tuple[str, Path, Path | None]]:
    pairs = []
    hyps = {p.name.split("-Hypnogram")[0]: p for p in data_dir.iterdir() if "-Hypnogram" in p.name}
    for psg in sorted(data_dir.glob("*-PSG.edf")):
        rec_id = psg.name.split("-PSG")[0]
        hyp = hyps.get(rec_id) or next((h for k, h in sorted(hyps.items()) if k[:7] == rec_id[:7]), None)
        pairs.append((rec_id, psg, hyp))
    return pairs


def _load_config(args) -> TrainConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = TrainConfig.from_file(args.config).to_dict()
    cfg["seed"] = args.seed
    if getattr(args, "ablation", None) == "plain-conv":
        cfg["ablation"] = "plain_conv_200"
    return TrainConfig.from_dict(cfg)


def _load_split(args) -> DatasetSplit:
    if not args.split:
        raise UsageError("--split is required")
    return DatasetSplit.from_json(Path(args.split).read_text())


def _by_recording(store: EpochStore, refs) -> list[list]:
    """Epochs grouped per recording, in recording order and epoch order."""
    groups: dict[str, list] = {}
    for ref in refs:
        groups.setdefault(ref.recording, []).append(ref)
    return [sorted(store.resolve(rs), key=lambda e: e.index) for _, rs in sorted(groups.items())]


def _store_fingerprint(store: EpochStore) -> str:
    return file_digest(store.root / "index.json")


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> list[Path]:
    from .synthetic import markov_cohort, write_edf_cohort
    cohort = markov_cohort(n_subjects=args.subjects, nights=args.nights, n_epochs=args.epochs, seed=args.seed)
    pairs = write_edf_cohort(cohort, args.out_dir)
    return [p for pair in pairs for p in pair]


def cmd_ingest(args) -> list[Path]:
    _require(args, "data_dir")
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        raise IngestError(f"{data_dir} is not a directory")
    recordings = {}
    for rec_id, psg, hyp in _find_pairs(data_dir):
        subject, night = _recording_meta(rec_id)
        epochs = load_recording(psg, hyp, rec_id=rec_id, subject=subject, night=night)
        log.info("%s: %d labeled epochs", rec_id, len(epochs))
        recordings[rec_id] = (epochs, {"subject": subject, "night": night})
    if not recordings:
        raise IngestError(f"no *-PSG.edf files in {data_dir}")
    out = Path(args.out_dir)
    store = EpochStore.create(out, recordings)
    census = {r.id: {s.short: sum(1 for lb in r.labels if lb == s) for s in STAGES} for r in store.info()}
    census["total"] = {s.short: sum(c[s.short] for c in census.values()) for s in STAGES}
    census_path = out / "census.json"
    census_path.write_text(json.dumps(census, indent=2))
    return [out / "index.json", census_path] + sorted(out.glob("*.epochs"))


def cmd_split(args) -> list[Path]:
    _require(args, "data_dir")
    store = EpochStore(args.data_dir)
    split = build_split(store.info(), args.strategy, args.fold, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_path = out / "split.json"
    split_path.write_text(split.to_json())
    census_path = out / "split_census.json"
    census_path.write_text(json.dumps(epoch_census(split), indent=2))
    return [split_path, census_path]


def cmd_train_single(args) -> list[Path]:
    config = _load_config(args)
    _require(args, "data_dir")
    split = _load_split(args)
    store = EpochStore(args.data_dir)
    train = EpochArrays.from_epochs(store.resolve(split.train))
    if not split.validation:
        raise ConfigError("split has an empty validation set")
    val = EpochArrays.from_epochs(store.resolve(split.validation))
    result = train_single(config, train, val)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "single.ckpt"
    checkpoint.save(ckpt, result.model, {"best_iteration": result.best_iteration, "val_kappa": result.best_kappa,
                                         "config": config.to_dict()})
    log_path = out / "train_log_single.csv"
    result.log.write_csv(log_path)
    args._config = config.to_dict()
    args._dataset = _store_fingerprint(store)
    return [ckpt, log_path]


def cmd_train_multi(args) -> list[Path]:
    config = _load_config(args)
    _require(args, "data_dir", "checkpoint")
    split = _load_split(args)
    store = EpochStore(args.data_dir)
    single, _ = checkpoint.load(args.checkpoint)
    if not split.validation:
        raise ConfigError("split has an empty validation set")
    train = single_outputs(single, _by_recording(store, split.train))
    val = single_outputs(single, _by_recording(store, split.validation))
    result = train_multi(config, train, val)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "multi.ckpt"
    checkpoint.save(ckpt, result.model, {"best_iteration": result.best_iteration, "val_kappa": result.best_kappa,
                                         "config": config.to_dict()})
    log_path = out / "train_log_multi.csv"
    result.log.write_csv(log_path)
    args._config = config.to_dict()
    args._dataset = _store_fingerprint(store)
    return [ckpt, log_path]


def cmd_score(args) -> list[Path]:
    _require(args, "data_dir", "checkpoint", "multi_checkpoint")
    store = EpochStore(args.data_dir)
    single, _ = checkpoint.load(args.checkpoint)
    multi, _ = checkpoint.load(args.multi_checkpoint)
    if args.recording:
        groups = [store.epochs(r) for r in args.recording]
    else:
        groups = _by_recording(store, _load_split(args).test)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for epochs in groups:
        if not epochs:
            continue
        path = out / f"{epochs[0].recording}_hypnogram.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HYPNOGRAM_HEADER)
            for s in score_recording(single, multi, epochs):
                w.writerow([s.index, StageLabel(s.single_pred).short, StageLabel(s.multi_pred).short,
                            StageLabel(s.label).short])
        files.append(path)
    args._dataset = _store_fingerprint(store)
    return files


def _read_hypnogram(path) -> tuple[list[int], list[int], list[int]]:
    single, multi, truth = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != HYPNOGRAM_HEADER:
            raise IngestError(f"{path}: expected columns {HYPNOGRAM_HEADER}, got {reader.fieldnames}")
        for row in reader:
            single.append(int(StageLabel.parse(row["single_pred"])))
            multi.append(int(StageLabel.parse(row["multi_pred"])))
            truth.append(int(StageLabel.parse(row["true_label"])))
    return single, multi, truth


def cmd_eval(args) -> list[Path]:
    if not args.predictions:
        raise UsageError("--predictions is required")
    per_file = [_read_hypnogram(p) for p in args.predictions]
    single = [v for s, _, _ in per_file for v in s]
    multi = [v for _, m, _ in per_file for v in m]
    truth = [v for _, _, t in per_file for v in t]
    if not truth:
        raise IngestError("no scored epochs")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    result = {}
    for name, pred, idx in (("single", single, 0), ("multi", multi, 1)):
        cm = confusion(truth, pred)
        path = out / f"confusion_{name}.csv"
        write_confusion_csv(path, cm)
        files.append(path)
        fold_cms = [confusion(f[2], f[idx]) for f in per_file if f[2]]
        result[name] = fold_summary(fold_cms)
        result[name]["overall"] = report(cm).to_dict()
        print(f"[{name}]\n{report(cm).table()}")
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    agree_path = out / "agreement.csv"
    write_agreement_csv(agree_path, agreement_matrix(single, multi, truth))
    return files + [metrics_path, agree_path]


def cmd_interpret(args) -> list[Path]:
    from .interpret import interpretation_report
    _require(args, "data_dir", "checkpoint")
    store = EpochStore(args.data_dir)
    single, _ = checkpoint.load(args.checkpoint)
    split = _load_split(args)
    groups = _by_recording(store, split.test)
    epochs = [e for g in groups for e in g]
    if not epochs:
        raise IngestError("split has an empty test set")
    arr = EpochArrays.from_epochs(epochs)
    predicted = single.predict_logits(arr.eeg, arr.eog).argmax(axis=1) if args.target == "predicted" else None
    agreement = None
    if args.multi_checkpoint:
        multi, _ = checkpoint.load(args.multi_checkpoint)
        scored = [s for g in groups for s in score_recording(single, multi, g)]
        agreement = agreement_matrix([s.single_pred for s in scored], [s.multi_pred for s in scored],
                                     [s.label for s in scored])
    files = interpretation_report(single, arr.eeg, arr.eog, arr.labels, args.out_dir, predicted=predicted,
                                  epoch_ids=[(e.recording, e.index) for e in epochs],
                                  trace_epochs=range(min(args.traces, len(epochs))), agreement=agreement,
                                  softmax=args.softmax)
    args._dataset = _store_fingerprint(store)
    return files


def cmd_export_kernels(args) -> list[Path]:
    _require(args, "checkpoint")
    model, _ = checkpoint.load(args.checkpoint)
    if model.__class__.__name__ != "SingleEpochNet" or model.first_layer_kind != "gabor":
        raise IngestError("export-kernels needs a single-epoch checkpoint with a Gabor first layer")
    return write_bank_export([model.eeg_bank, model.eog_bank], Path(args.out_dir))


def cmd_init(args) -> list[Path]:
    """Write an untrained single-epoch checkpoint (useful for inspection and export)."""
    from .network import SingleEpochNet
    model = SingleEpochNet(seed=args.seed, first_layer="plain_conv_200" if args.ablation == "plain-conv" else "gabor")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "init.ckpt"
    checkpoint.save(path, model)
    return [path]


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split, "train-single": cmd_train_single,
    "train-multi": cmd_train_multi, "score": cmd_score, "eval": cmd_eval, "interpret": cmd_interpret,
    "export-kernels": cmd_export_kernels, "init": cmd_init,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaborscope", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)
        for flag in flags:
            flag(p)
        return p

    data = lambda p: p.add_argument("--data-dir")  # noqa: E731
    config = lambda p: p.add_argument("--config")  # noqa: E731
    split = lambda p: p.add_argument("--split", help="split.json written by the split command")  # noqa: E731
    ckpt = lambda p: p.add_argument("--checkpoint")  # noqa: E731
    multi = lambda p: p.add_argument("--multi-checkpoint")  # noqa: E731
    ablation = lambda p: p.add_argument("--ablation", choices=["plain-conv"])  # noqa: E731

    def synth_flags(p):
        p.add_argument("--subjects", type=int, default=3)
        p.add_argument("--nights", type=int, default=2)
        p.add_argument("--epochs", type=int, default=60)

    def split_flags(p):
        p.add_argument("--strategy", choices=["night", "subject", "record", "loo"], default="loo")
        p.add_argument("--fold", type=int, default=0)

    add("synth", "write a synthetic EDF cohort", synth_flags)
    add("ingest", "EDF directory to epoch store plus census", data)
    add("split", "build a train/validation/test split", data, split_flags)
    add("train-single", "train the single-epoch network", data, config, split, ablation)
    add("train-multi", "train the multi-epoch network on frozen single-epoch outputs", data, config, split, ckpt)
    add("score", "per-epoch predictions for test recordings", data, split, ckpt, multi,
        lambda p: p.add_argument("--recording", action="append"))
    add("eval", "metrics and agreement matrix from hypnogram CSVs",
        lambda p: p.add_argument("--predictions", nargs="+"))

    def interp_flags(p):
        p.add_argument("--traces", type=int, default=2, help="number of test epochs with Eff(t) traces")
        p.add_argument("--target", choices=["true", "predicted"], default="true")
        p.add_argument("--softmax", action="store_true", help="differentiate softmax output instead of the logit")

    add("interpret", "kernel attribution report", data, split, ckpt, multi, interp_flags)
    add("export-kernels", "kernel waveforms and spectra from a checkpoint", ckpt)
    add("init", "write an untrained single-epoch checkpoint", ablation)
    return parser


def _error(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GABORSCOPE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        files = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(parser.format_usage(), file=sys.stderr, end="")
        return _error("usage", exc, EXIT_USAGE)
    except DivergenceError as exc:
        return _error("divergence", exc, EXIT_DIVERGED)
    except (EdfError, IngestError, StoreError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as exc:
        return _error("data", exc, EXIT_DATA)
    ckpts = [Path(c).name for c in (getattr(args, "checkpoint", None), getattr(args, "multi_checkpoint", None)) if c]
    write_manifest(Path(args.out_dir), args.command, args.seed, [Path(f) for f in files],
                   getattr(args, "_config", None), getattr(args, "_dataset", None), ckpts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
