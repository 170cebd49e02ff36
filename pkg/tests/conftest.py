"""Session fixtures running the default desk-scale experiments once, shared by the study tests."""

import time

import numpy as np
import pytest

from mscon.experiments import ExperimentManifest, read_rows, run_manifest

SWEEP_BUDGET_S = 30 * 60


def seed_mean(rows, **where):
    """Mean top-1 over seeds, its standard error (from per-seed bootstrap spreads), and the per-seed values."""
    match = [r for r in rows if all(r[k] == v for k, v in where.items())]
    acc = [r["value"] for r in match if r["metric"] == "top1"]
    std = [r["value"] for r in match if r["metric"] == "top1_std"]
    assert acc and len(acc) == len(std), where
    return float(np.mean(acc)), float(np.sqrt(np.mean(np.square(std)) / len(acc))), acc


def _run(tmp_path_factory, manifest):
    out = tmp_path_factory.mktemp(manifest.kind)
    t0 = time.perf_counter()
    run_manifest(manifest, out)
    elapsed = time.perf_counter() - t0
    return out, read_rows(out / f"{manifest.kind}.csv"), elapsed


@pytest.fixture(scope="session")
def corruption(tmp_path_factory):
    return _run(tmp_path_factory, ExperimentManifest(kind="corruption"))


@pytest.fixture(scope="session")
def indomain(tmp_path_factory):
    return _run(tmp_path_factory, ExperimentManifest(kind="indomain"))[:2]


@pytest.fixture(scope="session")
def ood(tmp_path_factory):
    return _run(tmp_path_factory, ExperimentManifest(kind="ood"))[:2]


@pytest.fixture(scope="session")
def hparam(tmp_path_factory):
    return _run(tmp_path_factory, ExperimentManifest(kind="hparam"))[:2]
