import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clickseg import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()
