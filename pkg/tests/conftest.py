import os

import pytest

from mocae import runtime

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(autouse=True)
def single_thread():
    runtime.configure(1)
    yield
    runtime.configure(1)


@pytest.fixture
def fixture_path():
    def _path(name):
        return os.path.join(FIXTURES, name)

    return _path
