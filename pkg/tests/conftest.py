import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cirtrain.store import EmbeddingMatrix

# (number, title, passed, detail) rows registered by the acceptance tests and
# printed one per criterion in the terminal summary.
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@contextmanager
def criterion(number: int, title: str):
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        ACCEPTANCE_RESULTS.append((number, title, False, info["detail"]))
        raise
    else:
        ACCEPTANCE_RESULTS.append((number, title, True, info["detail"]))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def tiny_matrix():
    return EmbeddingMatrix.create(
        ["a", "b", "c"],
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.0]], dtype=np.float32),
    )


def random_matrix(rng, prefix, count, dim):
    values = rng.standard_normal((count, dim)).astype(np.float32)
    ids = [f"{prefix}{i:04d}" for i in range(count)]
    return EmbeddingMatrix.create(ids, values)
