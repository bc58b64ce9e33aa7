import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from grumo import cli, synth  # noqa: E402
from grumo import model as M  # noqa: E402

TRAIN_SEED, TEST_SEED, N_SCENES = 1, 2, 64
FIXTURE_EPOCHS = 60
PRED_EPOCHS = 20

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    prev = _criteria.get(n)
    ok = rep.passed and (prev is None or prev[0])
    _criteria[n] = (ok, title, "; ".join(x for x in (prev[2] if prev else "", detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, title, detail = _criteria[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("fixture")


@pytest.fixture(scope="session")
def data_dirs(workdir, timings):
    t = time.perf_counter()
    train, test = workdir / "train", workdir / "test"
    assert cli.main(["gen-data", "--seed", str(TRAIN_SEED), "--count", str(N_SCENES), "--out", str(train)]) == 0
    assert cli.main(["gen-data", "--seed", str(TEST_SEED), "--count", str(N_SCENES), "--out", str(test),
                     "--split", "test"]) == 0
    timings["gen-data"] = time.perf_counter() - t
    return train, test


@pytest.fixture(scope="session")
def train_set(data_dirs):
    return synth.read_sceneset(data_dirs[0])


@pytest.fixture(scope="session")
def test_set(data_dirs):
    return synth.read_sceneset(data_dirs[1])


@pytest.fixture(scope="session")
def reg_model_dir(workdir, data_dirs, timings):
    t = time.perf_counter()
    out = workdir / "reg"
    assert cli.main(["train", "--data", str(data_dirs[0]), "--test", str(data_dirs[1]), "--out", str(out),
                     "--epochs", str(FIXTURE_EPOCHS), "--seed", "0"]) == 0
    timings["train"] = time.perf_counter() - t
    return out


@pytest.fixture(scope="session")
def reg_model(reg_model_dir):
    return M.load_model(reg_model_dir)


@pytest.fixture(scope="session")
def pred_model(train_set, test_set):
    cfg = M.ModelConfig(predictive=True)
    return M.train_fixture(cfg, train_set, PRED_EPOCHS, 0, test=test_set)


@pytest.fixture(scope="session")
def random_model():
    cfg = M.ModelConfig()
    return M.Model(cfg, M.init_weights(cfg, 11), seed=11)
