import types

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def note(request):
    """Attach a one-line detail to the acceptance summary of this test."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    details = "; ".join(v for k, v in item.user_properties if k == "detail")
    _CRITERIA[marker.args[0]] = (rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# planted-outlier task shared by the acceptance and CLI tests

PLANT_DIMS = (7, 40, 81)
PLANT_MAGNITUDE = 300.0


@pytest.fixture(scope="session")
def planted_task():
    from tqsim.encoder import EncoderConfig, inject_outlier_model, make_cooccurrence_task, train_task_model

    cfg = EncoderConfig(num_layers=2, d=96, heads=4, d_ff=384, max_len=16, vocab=200)
    model, losses = train_task_model(cfg, n_train=2048, steps=400, batch_size=32, lr=2e-3, seed=0)
    calib, _ = make_cooccurrence_task(256, cfg.max_len, cfg.vocab, seed=5)
    planted = inject_outlier_model(model, PLANT_DIMS, PLANT_MAGNITUDE, calib, layer=0)
    test_tokens, test_labels = make_cooccurrence_task(1000, cfg.max_len, cfg.vocab, seed=99)
    train_tokens, train_labels = make_cooccurrence_task(2048, cfg.max_len, cfg.vocab, seed=0)
    return types.SimpleNamespace(config=cfg, fp32=model, model=planted, train_loss=float(np.mean(losses[-20:])),
                                 calib_batches=[calib[:128], calib[128:]],
                                 test_tokens=test_tokens, test_labels=test_labels,
                                 train_tokens=train_tokens, train_labels=train_labels)
