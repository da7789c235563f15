import pytest

from kbrann.data import generate_dataset

TRAIN_SEED = 1000
EVAL_SEED = 2000

_criteria: list[str] = []


@pytest.fixture(scope="session")
def standard_data(tmp_path_factory):
    """The 200-scene training split and the 50-scene evaluation split."""
    root = tmp_path_factory.mktemp("standard")
    generate_dataset(200, TRAIN_SEED, root / "train")
    generate_dataset(50, EVAL_SEED, root / "eval")
    return {"train": root / "train", "eval": root / "eval"}


@pytest.fixture
def criterion():
    """Print and keep one pass/fail line; returns the verdict for asserting."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        _criteria.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_criteria):
            terminalreporter.write_line(line)
