import json
import warnings
from pathlib import Path

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*balance properties.*")

FIXTURES = Path(__file__).resolve().parent.parent / "scenarios"


def load_csv(path):
    """Parse an emitted CSV: returns (header list, float ndarray)."""
    header, rows = None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append([float(v) for v in line.split(",")])
    return header, np.asarray(rows)


@pytest.fixture(scope="session")
def constant_ou_scenario():
    from genmarket.scenario import load_scenario

    return load_scenario(FIXTURES / "constant_ou_2d.json")


@pytest.fixture(scope="session")
def gbm_scenario():
    from genmarket.scenario import load_scenario

    return load_scenario(FIXTURES / "gbm_limit_1d.json")


@pytest.fixture(scope="session")
def constant_ou_scenario_path():
    return str(FIXTURES / "constant_ou_2d.json")


@pytest.fixture(scope="session")
def gbm_scenario_path():
    return str(FIXTURES / "gbm_limit_1d.json")


def make_scenario_dict(**overrides):
    """A small valid scenario dict for tests to mutate."""
    base = {
        "dimension": 2,
        "clip_threshold": 2.0,
        "domain": [[-1.0, 1.0], [-1.0, 1.0]],
        "delta": 0.1,
        "horizon": 1.0,
        "coefficients": {
            "mu": {"constant": [0.1, -0.1]},
            "m": {"constant": [[-0.5, 0.1], [0.0, -0.4]]},
            "sigma": {"constant": [[0.35, 0.05], [0.05, 0.25]]},
        },
        "seed": 2024,
    }
    base.update(overrides)
    return base


@pytest.fixture
def scenario_factory(tmp_path):
    """Write a scenario dict to a temp file and return its path."""

    def write(name="scenario.json", **overrides):
        data = make_scenario_dict(**overrides)
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)

    return write
