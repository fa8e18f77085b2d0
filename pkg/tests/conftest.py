import pytest
import torch

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    torch.set_num_threads(1)  # keeps timings and float reductions stable across machines


@pytest.fixture
def record_criterion(request):
    """Store one acceptance verdict; all verdicts are printed in the terminal summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(number: str, passed: bool, detail: str) -> None:
        results[number] = (passed, detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results, key=lambda n: (int(n.rstrip("ab")), n)):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>3} {'PASS' if passed else 'FAIL'}: {detail}")
