from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from gradepipe import pipeline, synth
from gradepipe.geometry import SimilarityTransform
from gradepipe.sheets import AlignedSheet, load_template


@pytest.fixture()
def template_doc():
    return copy.deepcopy(synth.DEFAULT_TEMPLATE_DOC)


@pytest.fixture()
def template(template_doc):
    return load_template(template_doc)


@pytest.fixture()
def identity_sheet(template):
    def make(page: np.ndarray) -> AlignedSheet:
        return AlignedSheet(
            page=page,
            template=template,
            transform=SimilarityTransform.identity(),
            residual=0.0,
        )

    return make


@pytest.fixture(scope="session")
def graded_job(tmp_path_factory) -> pipeline.JobConfig:
    """One synthetic batch run through ingest, grade, and aggregate."""
    root = tmp_path_factory.mktemp("fixture")
    synth.build_fixture(root, students=6, seed=7)
    config = pipeline.load_job_config(root / "job.json")
    pipeline.stage_ingest(config)
    pipeline.stage_grade(config)
    pipeline.stage_aggregate(config)
    return config


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text("utf-8").splitlines() if line.strip()]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of the run."""
    reports = []
    for key in ("passed", "failed"):
        reports.extend(terminalreporter.stats.get(key, []))
    acceptance = [
        r for r in reports if r.when == "call" and "test_acceptance" in r.nodeid
    ]
    if not acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for report in sorted(acceptance, key=lambda r: r.nodeid):
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        terminalreporter.write_line(f"{status}  {name}")
