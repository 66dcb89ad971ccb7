import json
import logging

import numpy as np
import pandas as pd
import pytest

from dgp_mcem.utility import Utility


@pytest.fixture
def utility():
    return Utility(logger=logging.getLogger("test_utility"))


def test_env_getter(utility, monkeypatch):
    monkeypatch.setenv("DGP_TEST_VALUE", "abc")
    monkeypatch.delenv("DGP_TEST_MISSING", raising=False)
    assert utility._get_env_variables("DGP_TEST_VALUE") == "abc"
    assert utility._get_env_variables("DGP_TEST_MISSING", "fallback") == "fallback"


@pytest.mark.parametrize("value, expected", [("3", 3), ("0", 1), ("many", 1)])
def test_worker_count_from_env(utility, monkeypatch, value, expected):
    monkeypatch.setenv("DGP_WORKERS", value)
    assert utility.worker_count() == expected


def test_sanitize_run_key(utility):
    assert utility.sanitize_run_key("s01:older voiced") == "s01_older_voiced"
    assert utility.sanitize_run_key("young=1-a") == "young=1-a"


def test_json_is_deterministic(utility, tmp_path):
    payload = {"b": np.float64(0.1) + 0.2, "a": [np.nan, np.inf, 1], "c": np.arange(2), "d": (1.0, None)}
    first = utility.write_json(tmp_path / "a.json", payload)
    second = utility.write_json(tmp_path / "b.json", dict(reversed(list(payload.items()))))
    assert first.read_bytes() == second.read_bytes()
    loaded = utility.read_json(first)
    assert list(loaded) == ["a", "b", "c", "d"]
    assert loaded["a"] == [None, None, 1]
    assert loaded["b"] == 0.3
    assert loaded["c"] == [0, 1]
    assert first.read_text().endswith("}\n")


def test_csv_float_format(utility, tmp_path):
    path = utility.write_csv(tmp_path / "t.csv", pd.DataFrame({"t1": [1 / 3, 2.0], "sigma_sq": [0.25, 1e-12]}))
    assert path.read_text() == "t1,sigma_sq\n0.3333333333,0.25\n2,1e-12\n"


def test_library_versions(utility):
    versions = utility.library_versions()
    assert versions["numpy"] == np.__version__
    assert set(versions) >= {"scipy", "pandas", "scikit-learn"}
    json.dumps(versions)
