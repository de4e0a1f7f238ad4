"""Shared trained models for the acceptance suite and the per-criterion summary."""

import re
import time
from dataclasses import dataclass, field
from functools import lru_cache

import pytest

from bladapt import data as D
from bladapt import phases as P

ACCEPTANCE_SEEDS = (0, 1, 2)
BL_LEARN_EPOCHS = 32
RBL_LEARN_EPOCHS = 12
ADAPT_EPOCHS = 16


@dataclass
class Trained:
    seed: int
    datasets: dict
    bl: P.LearnResult
    rbl: P.LearnResult
    seconds: dict = field(default_factory=dict)

    def cfg(self, **kw) -> P.BilevelConfig:
        return P.BilevelConfig(seed=self.seed, adapt_epochs=ADAPT_EPOCHS, **kw)


@lru_cache(maxsize=None)
def trained_for(seed: int) -> Trained:
    datasets = {d.scene_id: d for d in D.build_benchmark(seed, "tiny")}
    seconds = {}
    t0 = time.perf_counter()
    bl = P.learn_phase(list(datasets.values()), "BL", P.BilevelConfig(seed=seed, learn_epochs=BL_LEARN_EPOCHS))
    seconds["learn_BL"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rbl = P.learn_phase(list(datasets.values()), "RBL", P.BilevelConfig(seed=seed, learn_epochs=RBL_LEARN_EPOCHS))
    seconds["learn_RBL"] = time.perf_counter() - t0
    return Trained(seed, datasets, bl, rbl, seconds)


@pytest.fixture(scope="session")
def trained():
    return trained_for


@lru_cache(maxsize=None)
def adapted_for(seed: int, scene: str, mode: str, decoder_init: str = "random", epochs: int = ADAPT_EPOCHS) -> P.AdaptResult:
    t = trained_for(seed)
    learned = {"BL": t.bl.partition, "RBL": t.rbl.partition, "naive": None}[mode]
    return P.adapt_phase(learned, t.datasets[scene], t.cfg(), decoder_init=decoder_init, mode=mode, epochs=epochs)


@pytest.fixture(scope="session")
def adapted():
    return adapted_for


# ---------------------------------------------------------------- summary

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    key = (int(m.group(1)), m.group(2))
    entry = _outcomes.setdefault(key, {"ok": True, "details": []})
    if report.failed or report.skipped:
        entry["ok"] = False
    entry["details"] += [str(v) for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), entry in sorted(_outcomes.items()):
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"CRITERION {num:>2} {name}: {status}")
        for d in entry["details"]:
            terminalreporter.write_line(f"    {d}")
