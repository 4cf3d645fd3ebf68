import itertools

import numpy as np
import pytest

from nsti import corpus
from nsti import model as mdl


def brute_force_ctc(logp: np.ndarray, labels) -> float:
    """Probability of ``labels`` by summing every length-T path."""
    T, C = logp.shape
    blank = C - 1
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        out, prev = [], None
        for k in path:
            if k != prev and k != blank:
                out.append(k)
            prev = k
        if out == list(labels):
            total += float(np.exp(sum(logp[t, k] for t, k in enumerate(path))))
    return total


def central_diff(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture(scope="session")
def templates():
    return corpus.gen_templates(17)


@pytest.fixture(scope="session")
def tiny_config():
    return mdl.ModelConfig(hidden=8, n_blocks=1, seed=3)


@pytest.fixture
def tiny_ckpt(tiny_config):
    ckpt = mdl.init(tiny_config)
    rng = np.random.default_rng(5)
    # nontrivial running statistics and affine terms
    for k in ckpt.stats:
        ckpt.stats[k] = rng.uniform(0.5, 1.5, ckpt.stats[k].shape) if k.endswith("var") else rng.normal(0, 0.3, ckpt.stats[k].shape)
    for k in ckpt.params:
        if k.endswith(".b") or k.endswith("beta") or k.endswith("gamma"):
            ckpt.params[k] = ckpt.params[k] + rng.normal(0, 0.2, ckpt.params[k].shape)
    return ckpt


@pytest.fixture(scope="session")
def target_recording(templates):
    domain = corpus.DomainConfig(0.015, 0.35, 0.1, 1.0, seed=200, domain_id="target")
    return corpus.make_split(templates, domain, 1, seed=3, frames=400)[0]


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed")):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed and not hasattr(rep, "wasxfail") else "FAIL"
    if hasattr(rep, "wasxfail"):
        detail = f"{detail} (known failure, see decisions ledger)".strip()
    _CRITERIA[marker.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
