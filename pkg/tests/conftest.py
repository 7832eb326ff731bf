import numpy as np
import pytest

from zeroguide.dataset import ingest_dataset
from zeroguide.encoders import ReplayBackend
from zeroguide.fixtures import make_synthetic_fixture


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    return make_synthetic_fixture(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def replay(fixture_paths):
    return ReplayBackend.open(fixture_paths["replay"])


@pytest.fixture(scope="session")
def index(fixture_paths):
    return ingest_dataset(fixture_paths["dataset"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


@pytest.fixture
def golden():
    """Load a frozen golden file; ZEROGUIDE_REGEN_GOLDEN=1 rewrites it from the given value."""
    import json
    import os

    def load(name, value=None):
        path = GOLDEN / name
        if os.environ.get("ZEROGUIDE_REGEN_GOLDEN") == "1" and value is not None:
            GOLDEN.mkdir(exist_ok=True)
            path.write_text(json.dumps(value, indent=1, sort_keys=True) + "\n")
        return json.loads(path.read_text())
    return load


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
