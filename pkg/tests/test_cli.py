import json

import numpy as np
import pytest

from dgp_mcem.cli import EXIT_FAILED, build_parser, ingest_csv, main, parse_config
from dgp_mcem.config import RunConfig
from dgp_mcem.errors import ConfigError, CsvFormatError


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def two_subject_csv(tmp_path):
    x = np.linspace(0, 2, 101)
    lines = ["x,s1:older:voiced,s2:young"] + [f"{v:.4f},{np.sin(v):.6f},{np.cos(v):.6f}" for v in x]
    return write_lines(tmp_path / "two.csv", lines)


def test_ingest_grid_and_subjects(two_subject_csv):
    table = ingest_csv(two_subject_csv)
    assert table.x.size == 101
    assert table.subjects == ["s1", "s2"]
    assert table.groups == {"s1": "older", "s2": "young"}
    assert table.conditions == {"s1": "voiced", "s2": None}
    data = table.dataset("s2")
    assert data.label == "s2"
    assert data.y.mean() == pytest.approx(0.0, abs=1e-12)


def test_units_follow_header_fields(tmp_path):
    path = write_lines(tmp_path / "u.csv", ["x,a:g1:c,b:g2:c,c:g1:c", "0,1,2,3", "1,2,3,4", "2,1,1,1"])
    table = ingest_csv(path)
    assert list(table.units(("group", "condition")).items()) == [(("g1", "c"), ["a", "c"]), (("g2", "c"), ["b"])]
    assert list(table.units(("condition",)).values()) == [["a", "b", "c"]]


@pytest.mark.parametrize(
    "lines, line",
    [
        (["x,s1", "0,1", "1,2", "1,3"], 4),
        (["x,s1", "0,1", "2,2", "1,3"], 4),
        (["x,s1", "0,1", "1,abc", "2,3"], 3),
        (["x,s1", "0,1", "1,", "2,3"], 3),
        (["x,s1", "0,1", "1,nan", "2,3"], 3),
        (["x,s1,s2", "0,1,2", "1,2"], 3),
        (["x,s1", "0,1", "1,2,3"], 3),
        (["x,s1,s1", "0,1,2"], 1),
        (["t,s1", "0,1"], 1),
        (["x,s1:a:b:c", "0,1"], 1),
    ],
)
def test_malformed_csv_reports_line(tmp_path, lines, line):
    with pytest.raises(CsvFormatError) as info:
        ingest_csv(write_lines(tmp_path / "bad.csv", lines))
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(ConfigError):
        ingest_csv(tmp_path / "nope.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(CsvFormatError):
        ingest_csv(tmp_path / "empty.csv")


def test_flags_override_config_file(tmp_path, two_subject_csv):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"data": str(two_subject_csv), "seed": 4, "D": 500, "prior": "beta:3,3"}))
    config = parse_config(["fit", "--config", str(config_path), "--seed", "9", "--no-gmm"])
    assert config.task == "fit"
    assert config.seed == 9
    assert config.D == 500
    assert config.emit_gmm is False and config.emit_hpd is True
    assert config.mcem_config((0.0, 2.0)).t_prior.kind == "beta"


def test_unknown_config_keys_rejected(tmp_path, two_subject_csv):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"data": str(two_subject_csv), "temperature": 1}))
    with pytest.raises(ConfigError):
        parse_config(["fit", "--config", str(config_path)])


def test_modes_translate_to_mcem_configs(two_subject_csv):
    def config(mode):
        return RunConfig(data=str(two_subject_csv), mode=mode).mcem_config((0.0, 2.0))

    assert config("single").mode == "single"
    gpr = config("gpr")
    assert gpr.mode == "oracle" and tuple(gpr.oracle_t) == ()
    assert tuple(config("oracle:0.436,1.459").oracle_t) == (0.436, 1.459)
    multiple = config("multiple:0.5,1.0")
    assert tuple(map(tuple, multiple.intervals)) == ((0.0, 0.5), (0.5, 1.0), (1.0, 2.0))
    with pytest.raises(ConfigError):
        config("multiple:2.5")


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="sideways"),
        dict(mode="multiple:1,0.5"),
        dict(prior="cauchy"),
        dict(interval="1,0"),
        dict(alpha=1.0),
        dict(task="plot"),
        dict(methods="gpr,nks"),
        dict(pool_by="electrode"),
    ],
)
def test_invalid_run_configs(two_subject_csv, kwargs):
    with pytest.raises(ConfigError):
        RunConfig(data=str(two_subject_csv), **kwargs)


def test_data_path_must_exist(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(task="fit", data=str(tmp_path / "missing.csv"))
    RunConfig(task="simstudy")


def test_interval_must_lie_in_data_range(two_subject_csv):
    config = RunConfig(data=str(two_subject_csv), interval="0.5,1.5")
    x = ingest_csv(two_subject_csv).x
    assert config.resolved_interval(x) == (0.5, 1.5)
    with pytest.raises(ConfigError):
        RunConfig(data=str(two_subject_csv), interval="0,3").resolved_interval(x)
    assert RunConfig(data=str(two_subject_csv)).resolved_interval(x) == (0.0, 2.0)


def test_parser_subcommands():
    parser = build_parser()
    args = parser.parse_args(["simstudy", "--replicates", "3", "--methods", "gpr,oracle"])
    assert args.task == "simstudy" and args.replicates == 3
    args = parser.parse_args(["multisubject", "--data", "d.csv", "--group-col", "group"])
    assert args.pool_by == "group"
    with pytest.raises(SystemExit):
        parser.parse_args(["plot"])


def test_main_returns_failure_on_bad_config(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "missing.csv")]) == EXIT_FAILED
