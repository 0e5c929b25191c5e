import numpy as np
import pytest

from phytnet import data


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Synthetic 4-class dataset, 60 images per class."""
    root = tmp_path_factory.mktemp("synth") / "data"
    data.synthesize_dataset(60, 42, root)
    return root


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    data.synthesize_dataset(8, 7, root, size=48)
    return root


@pytest.fixture(scope="session")
def tiny_fold(tiny_root):
    """Fold 0 of a 4-fold plan over the tiny set, resized to 200 px."""
    from phytnet.train import FoldData

    m = data.load_dataset(tiny_root)
    plan = data.kfold_split(m, 4, 42)
    images = data.load_images(m, 200)
    va = np.array([plan.assignment[s] == 0 for s in m.source_ids])
    stats = data.channel_stats(images[~va])
    ids = np.array(m.source_ids)
    return FoldData(images[~va], m.labels[~va], images[va], m.labels[va], stats["mean"], stats["std"],
                    m.num_classes, list(ids[~va]), list(ids[va]))


# -- acceptance criteria report -----------------------------------------------------------

CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion, reported as PASS/FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    CRITERIA[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  #{number:<2} {title}: {detail}")
