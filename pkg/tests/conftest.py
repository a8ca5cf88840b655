import numpy as np
import pytest

from peerassign.cohort import Cohort, SynthConfig, synth_cohort

ACCEPTANCE_LINES = []


def record(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_cohort(rng, sizes=(5, 6), D=4, school=1):
    """Small hand-rolled cohort (no generator) for loss and gradient checks."""
    n = sum(sizes)
    gender = np.array([i % 2 for i in range(n)])
    z = rng.uniform(0.0, 1.0, n)
    X = np.column_stack([gender, z, rng.normal(size=(n, D - 2))])
    class_id = np.concatenate([[k + 1] * s for k, s in enumerate(sizes)])
    return Cohort(
        ids=np.arange(1, n + 1), school_id=np.full(n, school), class_id=class_id, gender=gender, z=z,
        B=rng.integers(1, 6, n).clip(max=min(sizes) - 1), y=rng.normal(size=n),
        controls=rng.normal(size=(n, 4)), X=X,
        A_s=rng.integers(0, 2, (n, 10)), A_f=rng.integers(1, 4, (n, 10)),
    )


@pytest.fixture(scope="session")
def small_synth():
    return synth_cohort(SynthConfig(num_schools=6, seed=3))


@pytest.fixture(scope="session")
def default_trained():
    """Default synthetic cohort and PeerNN parameters trained with default settings."""
    from peerassign.peernn import train

    cohort, truth = synth_cohort(SynthConfig())
    params, history = train(cohort)
    return cohort, truth, params, history
