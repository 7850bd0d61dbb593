import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed_torch():
    # tests draw ad-hoc inputs from torch's global generator; pin it per test
    torch.manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
