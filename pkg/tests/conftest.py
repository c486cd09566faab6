import numpy as np
import pytest
from hypothesis import settings

from safer.synthgen import CohortConfig, generate_cohort
from safer.teacher import FusionParams, TrainConfig, train_teacher
from safer.uncertainty import StudentConfig, train_student_on_cohort

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(CohortConfig(n_survivors=40, n_deceased=20, d_struct=6, d_note=4,
                                        d_static=3, seq_len=4, latent_shift=2.0, seed=5))


@pytest.fixture(scope="session")
def small_pair(small_cohort):
    """A briefly trained teacher/student pair on the small cohort (d_k = 8)."""
    p0 = FusionParams.for_cohort(small_cohort, d_k=8, seed=1)
    teacher = train_teacher(small_cohort, p0, TrainConfig(epochs=5, lr=5e-3, batch_size=16))
    student = train_student_on_cohort(teacher, small_cohort, StudentConfig(epochs=10, seed=1))
    return teacher, student


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary --

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "tests": []})
    if report.when == "call" or report.failed:
        entry["tests"].append(item.name)
        entry["ok"] = entry["ok"] and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}")
