import json
import os
import time
from pathlib import Path

import pytest

from homoglyph import cli
from homoglyph.render import default_font_path

DATA = default_font_path().parent

# criterion number -> (passed, detail); printed once at the end of the run
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def _reference(root: Path, mode: str) -> dict:
    """Run gen + train for one corpus with the CLI defaults; reuse finished runs."""
    ds, model = root / f"{mode}-data", root / f"{mode}-model"
    wall = None
    if not (ds / "manifest.json").is_file():
        assert cli.main(["gen", str(DATA / f"{mode}_names.txt"), "--mode", mode, "--out", str(ds)]) == 0
    if not (model / "model.json").is_file():
        start = time.perf_counter()
        assert cli.main(["train", str(ds), "--out", str(model)]) == 0
        wall = time.perf_counter() - start
    timing = (model / "timing.csv").read_text().splitlines()[1:]
    return {
        "dataset": ds,
        "model": model / "model.bin",
        "manifest": json.loads((model / "model.json").read_text()),
        "train_seconds": wall if wall is not None else sum(float(r.split(",")[1]) for r in timing),
    }


@pytest.fixture(scope="session")
def reference_root(tmp_path_factory):
    # HOMOGLYPH_REFERENCE_DIR keeps trained reference models between runs
    cached = os.environ.get("HOMOGLYPH_REFERENCE_DIR")
    if cached:
        Path(cached).mkdir(parents=True, exist_ok=True)
        return Path(cached)
    return tmp_path_factory.mktemp("reference")


@pytest.fixture(scope="session")
def process_reference(reference_root):
    return _reference(reference_root, "process")


@pytest.fixture(scope="session")
def domain_reference(reference_root):
    return _reference(reference_root, "domain")
