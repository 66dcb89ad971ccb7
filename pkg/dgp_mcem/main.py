from dotenv import load_dotenv

load_dotenv()

import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tabulate import tabulate

from dgp_mcem.cli import EXIT_CLEAN, EXIT_FAILED, EXIT_FLAGGED, SubjectTable, ingest_csv
from dgp_mcem.config import RunConfig
from dgp_mcem.errors import ConfigError
from dgp_mcem.mcem import Dataset, McemConfig, McemState, PosteriorDraws, run_mcem, run_mcem_pooled
from dgp_mcem.simstudy import run_replicates
from dgp_mcem.summarize import GmmFit, average_gmm_fits, curve_bands, fit_gmm2, hpd, kde
from dgp_mcem.utility import FLOAT_FORMAT, Utility


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _fit_job(job: Tuple[McemConfig, Dataset]) -> Tuple[PosteriorDraws, McemState]:
    config, data = job
    return run_mcem(config, data)


def _pooled_job(job: Tuple[McemConfig, List[Dataset]]) -> Tuple[List[PosteriorDraws], McemState]:
    config, datasets = job
    return run_mcem_pooled(config, datasets, match_ig_moments=True)


class RunDgpPipeline(Utility):
    def __init__(
        self,
        log_filename: Optional[str] = None,
        log_format: str = "%(asctime)s,%(msecs)d %(name)s %(levelname)s %(message)s",
        log_datefmt: str = "%H:%M:%S",
        log_level: Optional[int] = None,
    ):
        log_filename = log_filename or os.getenv("DGP_LOG_FILE", "dgp_mcem.log")
        if log_level is None:
            log_level = getattr(logging, os.getenv("DGP_LOG_LEVEL", "INFO").upper(), logging.INFO)
        logging.basicConfig(
            filename=log_filename,
            filemode="a",
            format=log_format,
            datefmt=log_datefmt,
            level=log_level,
        )
        self.logger = logging.getLogger(__name__)
        self.logger.info("Logger Initialised..")
        super().__init__(logger=self.logger)

    def run(self, config: RunConfig) -> int:
        """Run one task; returns the exit status (0 clean, 1 flagged, 2 failed)."""
        handlers: Dict[str, Callable[[RunConfig], Tuple[bool, Dict[str, Any]]]] = {
            "fit": self.run_fit,
            "multisubject": self.run_multisubject,
            "simstudy": self.run_simstudy,
            "summarize": self.run_summarize,
        }
        meta: Dict[str, Any] = {
            "task": config.task,
            "config": config.to_dict(),
            "versions": self.library_versions(),
        }
        exit_code = EXIT_FAILED
        try:
            self.logger.info(f"Running task '{config.task}'")
            flagged, details = handlers[config.task](config)
            meta.update(details)
            exit_code = EXIT_FLAGGED if flagged else EXIT_CLEAN
            self.logger.info(f"Task '{config.task}' finished with exit status {exit_code}")
        except Exception as e:
            self.logger.error(f"Error running task '{config.task}': {e}")
            self.logger.error(traceback.format_exc())
            meta["error"] = f"{type(e).__name__}: {e}"
        meta["status"] = {EXIT_CLEAN: "clean", EXIT_FLAGGED: "flagged", EXIT_FAILED: "failed"}[exit_code]
        meta["exit_code"] = exit_code
        if config.task != "summarize":
            self.write_json(self.ensure_dir(config.out_dir) / "meta.json", meta)
        return exit_code

    def _map(self, fn, jobs: Sequence, workers: Optional[int]) -> List:
        workers = workers or self.worker_count()
        if workers <= 1 or len(jobs) <= 1:
            return [fn(job) for job in jobs]
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))

    def hpd_payload(self, frame: pd.DataFrame, interval: Tuple[float, float], alpha: float) -> Dict[str, Any]:
        """HPD summary of every t column of a draws table pooled together."""
        t_columns = [c for c in frame.columns if c.startswith("t")]
        if not t_columns:
            raise ConfigError("draws table has no t columns")
        t = frame[t_columns].to_numpy(dtype=float).ravel()
        # same precision as the interval stored in meta.json
        interval = tuple(float(FLOAT_FORMAT % v) for v in interval)
        region = hpd(kde(t, interval), t, alpha)
        payload = region.to_dict()
        payload["interval"] = list(interval)
        return payload

    def write_run(
        self,
        run_dir: Path,
        config: RunConfig,
        mcem_config: McemConfig,
        data: Dataset,
        draws: PosteriorDraws,
        state: McemState,
        interval: Tuple[float, float],
    ) -> Tuple[Optional[GmmFit], Optional[List[Dict[str, float]]]]:
        """Write draws.csv, hpd.json, curve.csv, gmm.json and meta.json for one fitted series.

        Returns:
            The mixture fit (None when not emitted) and the curve amplitude at
            each component mean (None without a curve).
        """
        run_dir = self.ensure_dir(run_dir)
        has_t = draws.t.shape[1] > 0
        draws_path = run_dir / "draws.csv"
        if config.emit_draws or (config.emit_hpd and has_t):
            self.write_csv(draws_path, draws.to_frame())
        payload = None
        if config.emit_hpd and has_t:
            # summarised from the file itself so that `summarize` reproduces it
            payload = self.hpd_payload(pd.read_csv(draws_path), interval, config.alpha)
            self.write_json(run_dir / "hpd.json", payload)

        curve = None
        if config.emit_curves:
            grid = np.linspace(interval[0], interval[1], config.curve_points)
            curve = curve_bands(
                draws, data, grid,
                rng=np.random.default_rng(np.random.SeedSequence([mcem_config.seed, 5])),
                max_paths=config.max_paths, logger=self.logger,
            )
            frame = pd.DataFrame({"x": grid, "mean": curve.mean, "lower": curve.lower, "upper": curve.upper})
            self.write_csv(run_dir / "curve.csv", frame)

        gmm, amplitudes = None, None
        if config.emit_gmm and has_t:
            gmm = fit_gmm2(draws.t_pooled, seed=mcem_config.seed, n_runs=config.gmm_runs)
            record = {"subject": data.label, **gmm.to_dict()}
            if curve is not None:
                amplitudes = curve.at(gmm.means)
                record["component_amplitudes"] = amplitudes
                if payload is not None:
                    record["mode_amplitudes"] = curve.at(payload["modes"])
            self.write_json(run_dir / "gmm.json", record)

        meta = {
            "label": data.label,
            "seed": mcem_config.seed,
            "mode": config.mode,
            "interval": list(interval),
            "theta_star": list(draws.theta_star),
            "theta_trace": draws.metadata["theta_trace"],
            "acceptance_rate": draws.metadata["acceptance_rate"],
            "failed_proposals": draws.metadata["failed_proposals"],
            "jitter": max(draws.metadata["jitter"], curve.jitter if curve is not None else 0.0),
            "curve_skipped": curve.skipped if curve is not None else None,
            "converged": state.converged,
            "iterations": state.iteration,
            "optimizer_flags": state.optimizer_flags,
            "offset": data.offset,
            "versions": self.library_versions(),
        }
        self.write_json(run_dir / "meta.json", meta)
        if not state.converged:
            self.logger.warning(f"'{data.label}' did not converge; outputs written with the flag set")
        return gmm, amplitudes

    def run_fit(self, config: RunConfig) -> Tuple[bool, Dict[str, Any]]:
        table = ingest_csv(config.data)
        interval = config.resolved_interval(table.x)
        base = config.mcem_config(interval)
        jobs = [
            (replace(base, seed=_derived_seed(config.seed, s)), table.dataset(subject))
            for s, subject in enumerate(table.subjects)
        ]
        self.logger.info(f"Fitting {len(jobs)} series on interval {interval}")
        results = self._map(_fit_job, jobs, config.workers)

        runs, flagged = [], False
        for (mcem_config, data), (draws, state) in zip(jobs, results):
            run_key = self.sanitize_run_key(data.label)
            self.write_run(config.out_dir / run_key, config, mcem_config, data, draws, state, interval)
            flagged |= not state.converged or state.optimizer_flags > 0
            runs.append({"run": run_key, "converged": state.converged, "theta_star": list(draws.theta_star)})
        return flagged, {"interval": list(interval), "runs": runs}

    def _unit_name(self, key: Tuple) -> str:
        parts = [str(k) for k in key if k]
        return self.sanitize_run_key(":".join(parts)) if parts else "all"

    def group_summary(
        self,
        table: SubjectTable,
        units,
        fits: Dict[str, GmmFit],
        amplitudes: Optional[Dict[str, List[Dict[str, float]]]] = None,
    ) -> Tuple[Dict[str, Any], str]:
        """Across-subject averages of the per-subject GMM means and sds, one row per unit.

        Each unit also gets the latency interval of every component and, when
        curves were drawn, the average curve amplitude at the component means.
        """
        amplitudes = amplitudes or {}
        subjects = []
        for subject in table.subjects:
            if subject not in fits:
                continue
            entry = {
                "subject": subject,
                "group": table.groups[subject],
                "condition": table.conditions[subject],
                **fits[subject].to_dict(),
            }
            if subject in amplitudes:
                entry["component_amplitudes"] = amplitudes[subject]
            subjects.append(entry)

        groups, rows = {}, []
        for key, members in units.items():
            name = self._unit_name(key)
            summary = average_gmm_fits([fits[s] for s in members if s in fits])
            measured = [[a["mean"] for a in amplitudes[s]] for s in members if s in amplitudes]
            summary["amplitudes"] = np.mean(measured, axis=0).tolist() if measured else []
            groups[name] = summary
            if summary["subjects"]:
                cells = [f"{m:.2f} ({s:.2f})" for m, s in zip(summary["means"], summary["sds"])]
                cells += [f"[{lo:.2f}, {hi:.2f}]" for lo, hi in summary["intervals"]]
                cells += [f"{a:.3g}" for a in summary["amplitudes"]] or ["-", "-"]
                rows.append([name, summary["subjects"]] + cells + [summary["non_converged"]])
        text = tabulate(
            rows,
            headers=[
                "unit", "subjects", "component 1", "component 2", "95% interval 1",
                "95% interval 2", "amplitude 1", "amplitude 2", "not converged",
            ],
            tablefmt="github",
        )
        return {"subjects": subjects, "groups": groups}, text

    def run_multisubject(self, config: RunConfig) -> Tuple[bool, Dict[str, Any]]:
        table = ingest_csv(config.data)
        interval = config.resolved_interval(table.x)
        base = config.mcem_config(interval)
        units = table.units(config.pool_keys)
        jobs = [
            (replace(base, seed=_derived_seed(config.seed, u)), [table.dataset(s) for s in members])
            for u, members in enumerate(units.values())
        ]
        self.logger.info(f"Pooled fits for {len(jobs)} units, {len(table.subjects)} subjects")
        results = self._map(_pooled_job, jobs, config.workers)

        fits: Dict[str, GmmFit] = {}
        amplitudes: Dict[str, List[Dict[str, float]]] = {}
        runs, flagged = [], False
        for key, (mcem_config, datasets), (draws_list, state) in zip(units, jobs, results):
            unit_dir = config.out_dir / self._unit_name(key)
            flagged |= not state.converged or state.optimizer_flags > 0
            for data, draws in zip(datasets, draws_list):
                gmm, subject_amplitudes = self.write_run(
                    unit_dir / self.sanitize_run_key(data.label),
                    config, mcem_config, data, draws, state, interval,
                )
                if gmm is not None:
                    fits[data.label] = gmm
                    flagged |= not gmm.converged
                if subject_amplitudes is not None:
                    amplitudes[data.label] = subject_amplitudes
            runs.append(
                {"unit": self._unit_name(key), "subjects": len(datasets), "converged": state.converged,
                 "theta_star": list(state.theta_hat)}
            )

        if config.emit_gmm and fits:
            payload, text = self.group_summary(table, units, fits, amplitudes)
            self.write_json(config.out_dir / "gmm.json", payload)
            self.logger.info("Group summary\n" + text)
            print(text)
        return flagged, {"interval": list(interval), "runs": runs}

    def run_simstudy(self, config: RunConfig) -> Tuple[bool, Dict[str, Any]]:
        spec = config.synthetic_spec()
        base = McemConfig(mode="single", **config.mcem_common(spec.domain))
        report = run_replicates(
            spec, config.method_list, base,
            workers=config.workers or self.worker_count(),
            max_paths=config.max_paths, logger=self.logger,
        )
        out = self.ensure_dir(config.out_dir)
        self.write_json(out / "rmse_report.json", report.to_dict())
        self.write_csv(out / "rmse_curves.csv", report.curve_frame())
        self.write_csv(out / "rmse_summary.csv", report.summary_frame())
        print(report.summary_table())
        return report.flagged, {"methods": list(config.method_list)}

    def run_summarize(self, config: RunConfig) -> Tuple[bool, Dict[str, Any]]:
        draws_path = Path(config.data)
        interval = config.interval
        meta_path = draws_path.parent / "meta.json"
        if interval is None and meta_path.exists():
            interval = tuple(self.read_json(meta_path)["interval"])
        if interval is None:
            raise ConfigError("no interval given and no meta.json next to the draws")
        out = self.ensure_dir(config.out) if config.out else draws_path.parent
        payload = self.hpd_payload(pd.read_csv(draws_path), interval, config.alpha)
        self.write_json(out / "hpd.json", payload)
        return False, {"interval": list(interval)}
