import numpy as np
import pytest

from capfuse.classification import ProbMatrix
from capfuse.dataset import SampleRecord, SplitManifest, TaskDefinition
from capfuse.synthetic import make_corpus


def make_task(C: int) -> TaskDefinition:
    return TaskDefinition(f"toy{C}", tuple(f"class{k}" for k in range(C)))


def random_simplex(rng: np.random.Generator, C: int, n: int | None = None) -> np.ndarray:
    shape = (C,) if n is None else (n, C)
    x = rng.exponential(size=shape)
    # occasional exact ties and zeros stress the argmax rule
    if rng.random() < 0.2:
        x = np.round(x, 1)
    x = x + 1e-12
    return x / x.sum(axis=-1, keepdims=True)


def random_pair(rng: np.random.Generator, n: int, C: int):
    task = make_task(C)
    ids = tuple(f"s{i}" for i in range(n))
    labels = rng.integers(0, C, size=n).tolist()
    manifest = SplitManifest(
        task, "test", tuple(SampleRecord(i, f"{i}.png", y) for i, y in zip(ids, labels))
    )
    mi = ProbMatrix(task, "test", ids, random_simplex(rng, C, n), "img", 0)
    mt = ProbMatrix(task, "test", ids, random_simplex(rng, C, n), "txt", 0)
    return mi, mt, manifest


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifests = make_corpus(root, n_images=200, seed=0)
    return root, manifests


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
