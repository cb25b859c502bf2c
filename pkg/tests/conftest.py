import pytest

from attrib.evaluation.datasets import default_config, gen_synthetic_dataset
from attrib.evaluation.training import train_toy

TOY_ITEMS, TOY_NEUTRAL = 60, 30


@pytest.fixture(scope="session")
def trained_toy_result():
    """Default-recipe training run on the image toy task (seed 0) and its training set."""
    ds = gen_synthetic_dataset("image", TOY_ITEMS, 0, neutral_items=TOY_NEUTRAL)
    return train_toy(default_config(), ds, seed=0), ds


@pytest.fixture(scope="session")
def trained_toy(trained_toy_result):
    result, ds = trained_toy_result
    return result.model, ds


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
