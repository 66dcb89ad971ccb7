import json
import os
import re
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

FLOAT_FORMAT = "%.10g"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "tabulate", "python-dotenv")


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        if not np.isfinite(value):
            return None
        return float(FLOAT_FORMAT % value)
    return value


class Utility:
    def __init__(self, logger):
        load_dotenv(override=False)
        self.logger = logger

    def _get_env_variables(self, env_variable: str, default_value=None):
        env_value = os.getenv(env_variable)
        if env_value is None:
            self.logger.info("Environment variable '{}' is not set, using '{}'".format(env_variable, default_value))
            return default_value
        self.logger.info("Environment variable '{}' is set".format(env_variable))
        return env_value

    def worker_count(self) -> int:
        value = self._get_env_variables("DGP_WORKERS", None)
        try:
            return max(1, int(value)) if value is not None else (os.cpu_count() or 1)
        except ValueError:
            self.logger.warning(f"DGP_WORKERS='{value}' is not an integer, falling back to 1")
            return 1

    def sanitize_run_key(self, key: str) -> str:
        # Replace any sequence of non-allowed chars with a single underscore
        return re.sub(r"[^A-Za-z0-9_=-]+", "_", key)

    def ensure_dir(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_json(self, path, payload: Dict) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_to_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.logger.info(f"Wrote {path}")
        return path

    def read_json(self, path) -> Dict:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def write_csv(self, path, frame: pd.DataFrame) -> Path:
        path = Path(path)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.logger.info(f"Wrote {path}")
        return path

    def library_versions(self) -> Dict[str, Optional[str]]:
        versions = {}
        for name in TRACKED_PACKAGES:
            try:
                versions[name] = metadata.version(name)
            except metadata.PackageNotFoundError:
                versions[name] = None
        return versions
