import json

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cetn import synthetic
from cetn.data import DatasetSchema, SplitSpec, prepare_rows

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return synthetic.SyntheticSpec(
        n_rows=3000,
        fields=("user", "item", "ctx", "city"),
        cardinalities=(60, 120, 5, 20),
        seed=3,
    )


@pytest.fixture(scope="session")
def small_prepared(small_spec):
    header, rows = synthetic.generate(small_spec)
    schema = DatasetSchema.from_dict(synthetic.schema_dict(small_spec))
    return prepare_rows(synthetic.as_dicts(header, rows), schema, SplitSpec((0.7, 0.2, 0.1), seed=1))


@pytest.fixture
def small_prepared_dir(tmp_path, small_prepared):
    out = tmp_path / "prep"
    small_prepared.save(out)
    return out


@pytest.fixture
def small_csv(tmp_path, small_spec):
    path = synthetic.write_csv(tmp_path / "raw.csv", small_spec)
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(synthetic.schema_dict(small_spec)))
    return path, schema


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/FLAG line per acceptance criterion."""

    def record(number: int, status: str, text: str) -> str:
        line = f"criterion {number}: {status:4s} {text}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
