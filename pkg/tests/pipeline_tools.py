"""Run the whole CLI pipeline on the bundled fixture and digest its outputs."""

import hashlib
from pathlib import Path

from catdiv.cli import COMMANDS, main

ROOT = Path(__file__).resolve().parent.parent
FIXTURE_CONF = ROOT / "configs" / "fixture.conf"
FIXTURE_LOG = ROOT / "tests" / "data" / "fixture_1k.csv"
GOLDEN = ROOT / "tests" / "golden" / "fixture"
# small text reports are kept verbatim next to the digest list
VERBATIM = ("reports/eval.jsonl", "reports/eval.txt", "reports/epochs.jsonl",
            "reports/diversity.jsonl", "reports/diversity.txt", "ingest/stats.json")


def run_pipeline(work_dir, *extra) -> list[int]:
    args = ["--config", str(FIXTURE_CONF), "--set", f"paths.work_dir={work_dir}",
            "--set", f"paths.log={FIXTURE_LOG}", *extra]
    return [main(args + [c]) for c in COMMANDS]


def digest(work_dir) -> dict[str, str]:
    """sha256 of every output except the config echoes (they name the work dir)."""
    work_dir = Path(work_dir)
    out = {}
    for p in sorted(work_dir.rglob("*")):
        if p.is_file() and p.suffix != ".config":
            out[p.relative_to(work_dir).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def read_sums(path) -> dict[str, str]:
    sums = {}
    for line in Path(path).read_text().splitlines():
        h, name = line.split("  ", 1)
        sums[name] = h
    return sums
