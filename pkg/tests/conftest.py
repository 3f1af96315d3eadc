import time

import numpy as np
import pytest

from rtcnn import data


@pytest.fixture(scope="session")
def fer64(tmp_path_factory):
    """64-row FER-format CSV with separable synthetic faces."""
    path = tmp_path_factory.mktemp("fer") / "fer64.csv"
    data.write_synthetic_fer(path, 64, seed=0)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


OVERFIT_CFG = dict(batch_size=8, epochs=300, lr=1e-3, seed=0, stop_at_train_acc=0.95)


@pytest.fixture(scope="session")
def overfit64(fer64):
    """(dataset, model, history, seconds) for mini-Xception trained on the 64-sample set until 95% training accuracy (shared, ~75 s)."""
    from rtcnn import graph, training

    t0 = time.perf_counter()
    ds = data.load_fer2013(fer64)
    model = graph.build_mini_xception(7, seed=0)
    history = training.train(model, ds, training.TrainConfig(**OVERFIT_CFG), val=ds)
    return ds, model, history, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(acceptance_log.RESULTS, key=lambda r: r["n"]):
        status = "PASS" if rec["ok"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {rec['n']:>2}: {status}  {rec['title']}  ({rec['seconds']:.1f} s) {rec['detail']}")
