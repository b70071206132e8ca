import pytest

from wsinr.cli import main
from wsinr.config import resolve
from wsinr.experiments.protocols import load_slides
from wsinr.pipeline import TrainState, train


@pytest.fixture(scope="session")
def smoke_cfg():
    return resolve("smoke")


@pytest.fixture(scope="session")
def smoke_state(smoke_cfg):
    slides = load_slides(smoke_cfg, "train")
    return train(slides, TrainState.create(smoke_cfg, [s.slide_id for s in slides]))


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """A smoke-preset run directory after ``train`` and ``eval``."""
    run = tmp_path_factory.mktemp("run") / "smoke"
    assert main(["train", "--preset", "smoke", "--run", str(run)]) == 0
    assert main(["eval", "--run", str(run)]) == 0
    return run


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
