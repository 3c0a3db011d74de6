"""Regenerate the frozen CLI outputs in ``tests/golden`` from the fixture pipeline.

Run only after an intentional change to numerical results:

    python tests/make_golden.py
"""

import shutil
from pathlib import Path

from ssdecomp.cli import main

HERE = Path(__file__).parent
CONFIG = HERE / "fixtures" / "pipeline.yaml"
GOLDEN = HERE / "golden"
STAGES = ("ingest", "decompose", "common", "spectrum")


def run_pipeline(out: Path, workers: int = 1) -> list[int]:
    return [main([stage, "--config", str(CONFIG), "--out", str(out), "--offline",
                  "--workers", str(workers)]) for stage in STAGES]


if __name__ == "__main__":
    shutil.rmtree(GOLDEN, ignore_errors=True)
    codes = run_pipeline(GOLDEN)
    if any(codes):
        raise SystemExit(f"pipeline failed with exit codes {codes}")
    print(f"wrote {GOLDEN}")
