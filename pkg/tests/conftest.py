import os
import sys

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(int(os.environ.get("PATCHCAST_THREADS", "1")))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def small_panel():
    from patchcast.dataset import SyntheticConfig, generate_panel

    return generate_panel(SyntheticConfig(n_series=6, n_periods=40), seed=3)


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    prev = ACCEPTANCE.get(criterion)
    details = ([prev[1]] if prev and prev[1] else []) + ([detail] if detail else [])
    ACCEPTANCE[criterion] = ((prev[0] if prev else True) and bool(ok), "; ".join(details))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
