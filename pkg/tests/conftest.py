from pathlib import Path

from gaborscope.cli import main

TINY_CONFIG = "max_iterations=4\nvalidate_every=2\nminibatch_size=4\n"


def run_pipeline(root: Path, seed: int = 0) -> dict[str, int]:
    """synth -> ingest -> split -> train-single -> train-multi -> score -> eval -> interpret; returns exit codes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.txt"
    cfg.write_text(TINY_CONFIG)
    d = {k: str(root / k) for k in ("raw", "store", "split", "single", "multi", "scored", "eval", "interp")}
    s = ["--seed", str(seed)]
    split = ["--split", str(root / "split" / "split.json")]
    single = ["--checkpoint", str(root / "single" / "single.ckpt")]
    multi = ["--multi-checkpoint", str(root / "multi" / "multi.ckpt")]
    steps = {
        "synth": ["synth", "--subjects", "3", "--nights", "2", "--epochs", "40", "--out-dir", d["raw"]],
        "ingest": ["ingest", "--data-dir", d["raw"], "--out-dir", d["store"]],
        "split": ["split", "--data-dir", d["store"], "--strategy", "loo", "--fold", "0", "--out-dir", d["split"]],
        "train-single": ["train-single", "--data-dir", d["store"], *split, "--config", str(cfg),
                         "--out-dir", d["single"]],
        "train-multi": ["train-multi", "--data-dir", d["store"], *split, "--config", str(cfg), *single,
                        "--out-dir", d["multi"]],
        "score": ["score", "--data-dir", d["store"], *split, *single, *multi, "--out-dir", d["scored"]],
        "eval": None,
        "interpret": ["interpret", "--data-dir", d["store"], *split, *single, *multi, "--traces", "1",
                      "--out-dir", d["interp"]],
    }
    codes = {}
    for name, argv in steps.items():
        if name == "eval":
            argv = ["eval", "--predictions", *map(str, sorted(Path(d["scored"]).glob("*_hypnogram.csv"))),
                    "--out-dir", d["eval"]]
        codes[name] = main(argv + s)
        if codes[name] != 0:
            break
    return codes


# one line per acceptance criterion, printed after the run so it lands in the captured log
ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
