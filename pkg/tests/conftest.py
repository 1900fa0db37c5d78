import contextlib

import pytest

from polypcascade.synth import SynthConfig, synth_generate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two slides per class (one train, one test), one parent each."""
    out = tmp_path_factory.mktemp("small_corpus")
    cfg = SynthConfig(n_slides_per_class=2, train_fraction=0.5, seed=3)
    manifest = synth_generate(cfg, out)
    return cfg, out, manifest


ACCEPTANCE = pytest.StashKey[list]()


class _Check:
    detail = ""


@pytest.fixture
def criterion(request):
    """Context manager recording PASS/FAIL for one acceptance criterion."""
    log = request.config.stash.setdefault(ACCEPTANCE, [])

    @contextlib.contextmanager
    def check(number, title):
        c = _Check()
        try:
            yield c
        except BaseException as exc:
            msg = c.detail or f"{type(exc).__name__}: {exc}"
            log.append((number, False, title, msg))
            raise
        log.append((number, True, title, c.detail))

    return check


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, title, detail in sorted(log):
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
