import numpy as np
import pytest
from hypothesis import settings

from just_asr.config import build_config
from just_asr.data import SynthConfig, synth_corpus

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


# toy preset shrunk further so a training step takes a few milliseconds
SMALL = [
    ("model.d", "16"), ("model.heads", "2"), ("quantizer.V", "8"), ("loss.K", "3"),
    ("decoder.pred_dim", "16"), ("decoder.joint_dim", "16"), ("train.batch_size", "4"),
    ("data.synth.train_utterances", "40"), ("data.synth.eval_utterances", "10"),
    ("data.synth.feature_dim", "16"), ("model.feature_dim", "16"),
    ("mask.rate", "0.2"), ("mask.span", "3"),
]


def small_config(*pairs, **kw):
    return build_config(SMALL + list(pairs), preset="toy", **kw)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def corpus(cfg):
    return synth_corpus(cfg.data.synth, "train")


@pytest.fixture
def eval_corpus(cfg):
    return synth_corpus(cfg.data.synth, "eval")


@pytest.fixture
def synth_cfg():
    return SynthConfig(train_utterances=50, eval_utterances=10, feature_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------ acceptance criterion report

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    verdict = "PASS" if report.passed else "FAIL"
    if _CRITERIA.get(number, ("", "PASS"))[1] == "FAIL":
        verdict = "FAIL"  # parametrized criteria fail if any case fails
    _CRITERIA[number] = (title, verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[number]
        line = f"criterion {number:2d}  {verdict}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
