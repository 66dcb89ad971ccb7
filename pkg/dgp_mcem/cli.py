"""Command-line front end: ``python -m dgp_mcem.cli {fit,simstudy,multisubject,summarize}``."""

import argparse
import re
import sys
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dgp_mcem.config import RunConfig
from dgp_mcem.errors import ConfigError, CsvFormatError, DgpError
from dgp_mcem.mcem import Dataset

EXIT_CLEAN, EXIT_FLAGGED, EXIT_FAILED = 0, 1, 2


@dataclass
class SubjectTable:
    x: np.ndarray
    values: pd.DataFrame
    groups: Dict[str, Optional[str]]
    conditions: Dict[str, Optional[str]]

    @property
    def subjects(self) -> List[str]:
        return list(self.values.columns)

    def dataset(self, subject: str) -> Dataset:
        return Dataset.from_arrays(self.x, self.values[subject].to_numpy(), label=subject)

    def units(self, keys: Sequence[str] = ("group", "condition")) -> "OrderedDict[Tuple, List[str]]":
        """Subjects grouped by the requested header fields, in column order."""
        lookup = {"group": self.groups, "condition": self.conditions}
        out: "OrderedDict[Tuple, List[str]]" = OrderedDict()
        for subject in self.subjects:
            key = tuple(lookup[k][subject] for k in keys)
            out.setdefault(key, []).append(subject)
        return out


def _parse_header(columns: Sequence[str]) -> Tuple[List[str], Dict, Dict]:
    if not columns or columns[0].strip() != "x":
        raise CsvFormatError("first header field must be 'x'", line=1)
    ids, groups, conditions = [], {}, {}
    for raw in columns[1:]:
        parts = [p.strip() for p in str(raw).split(":")]
        if len(parts) > 3 or not parts[0]:
            raise CsvFormatError(f"bad subject header '{raw}', expected <id>[:<group>][:<condition>]", line=1)
        subject = parts[0]
        if subject in groups:
            raise CsvFormatError(f"duplicated subject id '{subject}'", line=1)
        ids.append(subject)
        groups[subject] = (parts[1] or None) if len(parts) > 1 else None
        conditions[subject] = (parts[2] or None) if len(parts) > 2 else None
    if not ids:
        raise CsvFormatError("no subject columns after 'x'", line=1)
    return ids, groups, conditions


def ingest_csv(path) -> SubjectTable:
    """Read ``x,<id>[:<group>][:<condition>],...`` with a numeric body and strictly increasing x.

    Args:
        path: CSV file with a header row.

    Returns:
        The shared x grid with one series per subject, in column order.

    Raises:
        ConfigError: the file does not exist.
        CsvFormatError: an empty file or a malformed header or body, with its line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"data file '{path}' does not exist")
    try:
        # header read as a plain row so duplicated ids are not renamed
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise CsvFormatError("file is empty", line=1)
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise CsvFormatError(f"ragged row: {e}", line=int(found.group(1)) if found else None)

    ids, groups, conditions = _parse_header([str(v) for v in raw.iloc[0].tolist()])
    frame = raw.iloc[1:].reset_index(drop=True)
    if frame.empty:
        raise CsvFormatError("no data rows", line=2)
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        raise CsvFormatError("row has too few fields", line=int(np.argmax(short)) + 2)

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(numeric.to_numpy(dtype=float))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        column = (["x"] + ids)[col]
        raise CsvFormatError(f"non-numeric cell '{frame.iat[row, col]}' in column '{column}'", line=int(row) + 2)

    x = numeric.iloc[:, 0].to_numpy(dtype=float)
    steps = np.diff(x)
    if np.any(steps <= 0):
        row = int(np.argmax(steps <= 0)) + 1
        raise CsvFormatError(f"x must be strictly increasing ({x[row - 1]:g} then {x[row]:g})", line=row + 2)

    values = numeric.iloc[:, 1:].copy()
    values.columns = ids
    return SubjectTable(x=x, values=values, groups=groups, conditions=conditions)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file mirroring these flags; flags win")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--D", type=int, dest="D", help="E-step chain length")
    parser.add_argument("--J", type=int, dest="J", help="M-step subsample size")
    parser.add_argument("--tol", type=float)
    parser.add_argument("--max-iter", type=int, dest="max_iter")
    parser.add_argument("--final-draws", type=int, dest="final_draws")
    parser.add_argument("--burn-in", type=int, dest="burn_in")
    parser.add_argument("--thin", type=int)
    parser.add_argument("--a-sigma", type=float, dest="a_sigma")
    parser.add_argument("--b-sigma", type=float, dest="b_sigma")
    parser.add_argument("--max-paths", type=int, dest="max_paths")


def _analysis(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="CSV with header x,<id>[:<group>][:<condition>],...")
    parser.add_argument("--interval", help="analysis interval 'a,b' (default: data range)")
    parser.add_argument("--prior", help="'uniform' or 'beta:3,3'")
    parser.add_argument("--mode", help="single | gpr | multiple:<breaks> | oracle:<points>")
    parser.add_argument("--alpha", type=float, help="HPD level is 1 - alpha")
    parser.add_argument("--curve-points", type=int, dest="curve_points")
    parser.add_argument("--gmm-runs", type=int, dest="gmm_runs")
    for name in ("draws", "hpd", "curves", "gmm"):
        parser.add_argument(
            f"--no-{name}", dest=f"emit_{name}", action="store_const", const=False,
            help=f"do not write {name} output",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgp_mcem", description="Stationary-point inference with derivative-constrained GPs"
    )
    sub = parser.add_subparsers(dest="task", required=True)

    fit = sub.add_parser("fit", help="fit every subject column independently")
    _common(fit)
    _analysis(fit)

    multi = sub.add_parser("multisubject", help="pool subjects sharing a group/condition")
    _common(multi)
    _analysis(multi)
    multi.add_argument("--group-col", dest="pool_by", help="header fields defining a unit, e.g. 'group,condition'")

    sim = sub.add_parser("simstudy", help="synthetic benchmark with replicated data sets")
    _common(sim)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--sigma", type=float)
    sim.add_argument("--methods", help="comma-separated subset of gpr,single,multiple,oracle")

    summ = sub.add_parser("summarize", help="recompute hpd.json from a draws.csv")
    summ.add_argument("--config", help="JSON file mirroring these flags; flags win")
    summ.add_argument("--data", help="draws.csv written by fit or multisubject")
    summ.add_argument("--interval", help="analysis interval 'a,b' (default: from meta.json)")
    summ.add_argument("--alpha", type=float)
    summ.add_argument("--out", help="output directory (default: next to draws.csv)")
    return parser


def parse_config(argv: Optional[Sequence[str]] = None) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    config_path = args.pop("config", None)
    return RunConfig.from_sources(config_path, args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    from dgp_mcem.main import RunDgpPipeline

    try:
        config = parse_config(argv)
    except DgpError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    pipeline = RunDgpPipeline()
    return pipeline.run(config)


if __name__ == "__main__":
    sys.exit(main())
