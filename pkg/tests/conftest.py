import warnings

import numpy as np
import pytest
import torch

from tasked.data import SyntheticConfig, make_synthetic

ACCEPTANCE = {
    1: "loss gradients match central finite differences",
    2: "vectorized MMD matches brute force and closed form",
    3: "architecture shapes and attention row sums",
    4: "distillation degenerate cases",
    5: "training protocol: ownership, frozen teacher, L_D sign",
    6: "subject probe drops and TASKED >= ablation on held-out subject",
    7: "metrics match brute force and worked example",
    8: "LOSO fold count and partitions",
    9: "identical seeds give identical aggregate tables",
}
_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")
    config.addinivalue_line("markers", "slow: trains models for more than a few seconds")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n in getattr(report, "acceptance", ()):
        _outcomes.setdefault(n, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.acceptance = [m.args[0] for m in item.iter_markers("acceptance")]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_synthetic():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return make_synthetic(SyntheticConfig(n_subjects=4, n_activities=3, sensors=[3, 3],
                                              window_size=64, windows_per_subject_per_activity=6,
                                              subject_effect=0.5, noise_std=0.1, seed=0))
