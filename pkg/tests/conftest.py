import pytest

from support import Chan


@pytest.fixture
def chan():
    return Chan()
