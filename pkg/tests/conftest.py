import numpy as np
import pytest

from iis.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def small_corpus():
    """Cheap synthetic corpus shared by tests that only need plumbing."""
    return generate(SynthSpec(dim=12, n_classes=3, n_concepts=5, samples_per_class=40, rho=0.8, noise=0.2,
                              seed=3, bayes_samples=2000))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)




@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the summary."""
    lines = request.config.stash.setdefault(_STASH, [])

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


_STASH = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_STASH, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
