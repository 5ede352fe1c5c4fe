"""Shared session fixtures: one default pipeline run reused by the slow suites."""
import time

import pytest

from cpg.cli import main as cli

ACCEPTANCE_LINES = []


def run_pipeline(root):
    """Default pipeline through the CLI; returns (report path, seconds per stage)."""
    env_dirs = {c: root / c for c in ("synth", "annotate", "train", "eval")}
    steps = [
        ("synth", ["synth", "--out", str(env_dirs["synth"])]),
        ("annotate", ["annotate", "--noiseless", "--catalog", str(env_dirs["synth"] / "catalog.jsonl"),
                      "--out", str(env_dirs["annotate"])]),
        ("train", ["train", "--catalog", str(env_dirs["synth"] / "catalog.jsonl"),
                   "--annotations", str(env_dirs["annotate"] / "annotations.jsonl"),
                   "--out", str(env_dirs["train"])]),
        ("eval", ["eval", "--checkpoint", str(env_dirs["train"] / "best.ckpt"), "--out", str(env_dirs["eval"])]),
    ]
    secs = {}
    for name, argv in steps:
        t = time.perf_counter()
        assert cli(argv) == 0, argv
        secs[name] = time.perf_counter() - t
    return env_dirs["eval"] / "report.json", secs


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipeline_a"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
