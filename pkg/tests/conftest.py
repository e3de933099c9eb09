import time

import pytest

SESSION_START = time.perf_counter()


@pytest.fixture(scope="session")
def session_start():
    return SESSION_START
