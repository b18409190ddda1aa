"""
Experiment harness behind the CLI subcommands: continuous benchmark, multi-start
discrete campaigns, Lloyd quantization, the GRAPE-vs-Lloyd comparison and the oracle
check. Every emitted Phi is recomputed from the serialized pulse before it is written.

Result files land in the experiment's output directory:

    continuous_pulse.txt / continuous_trace.csv / continuous_summary.txt
    discrete_M<m>_<init>_{realizations,histogram}.csv, _summary.txt,
        _best_pulse.txt, _best_codebook.csv, _best_trace.csv
    lloyd_M<m>_pulse.txt / _codebook.csv / _distortion.csv / _summary.txt
    compare.csv
    oracle_report.csv

CSV and summary files hold no wall-clock data so reruns are byte-identical.
"""
import asyncio
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.discrete_grape import DiscreteGrapeEngine, DiscreteGrapeOptions, initial_discrete_pulse, optimize_discrete
from core.errors import ConsistencyError, InvalidInputError, OutputError, PulseFileError
from core.experiment_config import INIT_STRATEGIES, ExperimentConfig
from core.grape_engine import GrapeEngine
from core.lloyd_quantizer import LloydQuantizer
from core.oracles import run_oracle_suite
from core.pulse_files import (
    format_discrete_pulse,
    format_float,
    parse_discrete_pulse,
    read_discrete_pulse,
    read_phase_pulse,
    write_discrete_pulse,
    write_phase_pulse,
)
from core.pulses import DiscretePulse, PhasePulse, materialize
from core.spin_dynamics import EnsembleSpec, figure_of_merit
from utils.logger import active_level, configure_worker, logger

FLOAT_FORMAT = "%.17g"
CONSISTENCY_TOLERANCE = 1e-12

HISTOGRAM_LOW = 0.9
HISTOGRAM_WIDTH = 0.001
HISTOGRAM_BINS = 100

COMPARE_COLUMNS = [
    "M",
    "phi_discrete_grape",
    "phi_lloyd",
    "phi_continuous",
    "phi_discrete_mean",
    "phi_uniform_forward",
]


def derive_seed(master_seed: int, realization: int) -> int:
    """
    Seed of realization r: the first 64-bit word generated by SeedSequence([master_seed, r]).
    Counter-based, so each realization gets its own stream whatever the worker count.
    """
    state = np.random.SeedSequence([int(master_seed), int(realization)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def phi_histogram(phis: Sequence[float]) -> pd.DataFrame:
    """
    Underflow bin (-inf, 0.9) followed by 100 bins of width 0.001 over [0.9, 1.0].
    Values above 1.0 are counted in the last bin.
    """
    edges = HISTOGRAM_LOW + HISTOGRAM_WIDTH * np.arange(HISTOGRAM_BINS + 1)
    values = np.minimum(np.asarray(phis, dtype=float), 1.0)
    index = np.minimum(np.searchsorted(edges, values, side="right") - 1, HISTOGRAM_BINS - 1)
    counts = np.bincount(index + 1, minlength=HISTOGRAM_BINS + 1)
    return pd.DataFrame({
        "bin_low": np.concatenate(([-np.inf], edges[:-1])),
        "bin_high": edges,
        "count": counts,
    })


def campaign_statistics(phis: Sequence[float]) -> Dict[str, float]:
    values = np.asarray(phis, dtype=float)
    if values.size == 0:
        raise InvalidInputError("campaign produced no realizations")
    q25, median, q75 = np.percentile(values, [25.0, 50.0, 75.0])
    return {
        "n_realizations": int(values.size),
        "phi_mean": float(np.mean(values)),
        "phi_max": float(np.max(values)),
        "phi_min": float(np.min(values)),
        "phi_median": float(median),
        "phi_q25": float(q25),
        "phi_q75": float(q75),
        "phi_iqr": float(q75 - q25),
    }


def trace_frame(phi_history: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({"iteration": np.arange(len(phi_history)), "phi": np.asarray(phi_history, dtype=float)})


def codebook_frame(dp: DiscretePulse) -> pd.DataFrame:
    """Codebook on the unit circle (1-based index) and how many slices use each entry."""
    return pd.DataFrame({
        "index": np.arange(1, dp.m + 1),
        "radians": dp.values,
        "cos": np.cos(dp.values),
        "sin": np.sin(dp.values),
        "slices": dp.usage(),
    })


@dataclass(frozen=True, eq=False)
class RealizationTask:
    realization: int
    seed: int
    m: int
    init: str
    spec: EnsembleSpec
    options: DiscreteGrapeOptions
    initial: Optional[DiscretePulse] = None


@dataclass(eq=False)
class RealizationResult:
    realization: int
    seed: int
    phi: float
    initial_phi: float
    iterations: int
    reason: str
    remapped_slices: int
    wall_time_s: float
    pulse: DiscretePulse
    phi_history: List[float]


def run_realization(task: RealizationTask) -> RealizationResult:
    """One discrete-GRAPE run; module-level so worker processes can unpickle it."""
    start = time.perf_counter()
    initial = task.initial
    if initial is None:
        initial = initial_discrete_pulse(task.spec, task.m, task.init, task.seed, task.options.forward_reference)
    trace = optimize_discrete(task.spec, initial, task.options)
    return RealizationResult(
        realization=task.realization,
        seed=task.seed,
        phi=trace.final_phi,
        initial_phi=trace.initial_phi,
        iterations=trace.iterations,
        reason=trace.reason,
        remapped_slices=int(trace.extra.get("remapped_slices", 0)),
        wall_time_s=time.perf_counter() - start,
        pulse=trace.discrete_pulse,
        phi_history=list(trace.phi_history),
    )


async def run_realizations(tasks: Sequence[RealizationTask], workers: int = 1) -> List[RealizationResult]:
    """Runs inline for a single worker, otherwise on a process pool; results keep task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [run_realization(task) for task in tasks]
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), initializer=configure_worker,
                             initargs=(active_level(),)) as pool:
        futures = [loop.run_in_executor(pool, run_realization, task) for task in tasks]
        return list(await asyncio.gather(*futures))


@dataclass(eq=False)
class CampaignResult:
    m: int
    init: str
    master_seed: int
    realizations: List[RealizationResult]
    histogram: pd.DataFrame
    summary: Dict[str, Any]
    paths: Dict[str, str] = field(default_factory=dict)
    wall_time_s: float = 0.0

    @property
    def phis(self) -> np.ndarray:
        return np.array([r.phi for r in self.realizations])

    @property
    def best(self) -> RealizationResult:
        # first realization wins a tie
        return self.realizations[int(np.argmax(self.phis))]


def _summary_value(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_summary_value(v) for v in value)
    return str(value)


class ExperimentRunner:
    """
    Owns the engines for one ExperimentConfig and writes every result file. Engine
    options come from the `grape`, `discrete_grape` and `lloyd` sections of config.yaml;
    max_iters, tol_delta_phi and lloyd_epsilon from the experiment override them.
    """
    def __init__(self, app_config: Dict[str, Any], experiment: ExperimentConfig):
        self.app_config = app_config
        self.experiment = experiment
        self.spec = experiment.ensemble_spec()
        self.output_dir = experiment.output_dir

        overrides = {"max_iters": experiment.max_iters, "tol_delta_phi": experiment.tol_delta_phi}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        self.grape_engine = GrapeEngine({**(app_config.get("grape") or {}), **overrides})
        self.discrete_engine = DiscreteGrapeEngine({**(app_config.get("discrete_grape") or {}), **overrides})
        lloyd_config = dict(app_config.get("lloyd") or {})
        if experiment.lloyd_epsilon is not None:
            lloyd_config["epsilon"] = experiment.lloyd_epsilon
        self.quantizer = LloydQuantizer(lloyd_config)
        self.oracle_config = app_config.get("oracles") or {}

        self.run_stats = {
            "commands_run": 0,
            "files_written": 0,
            "reevaluations": 0,
        }
        logger.info(f"Experiment runner initialized: {self.spec.describe()}, output_dir={self.output_dir}, "
                    f"workers={experiment.workers}")

    def _path(self, name: str) -> str:
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            logger.error(f"Cannot create output directory {self.output_dir}: {e}")
            raise OutputError(f"cannot create output directory: {e.strerror or e}", self.output_dir) from e
        return os.path.join(self.output_dir, name)

    def _write_csv(self, frame: pd.DataFrame, name: str) -> str:
        path = self._path(name)
        try:
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        except OSError as e:
            logger.error(f"Failed to write {path}: {e}")
            raise OutputError(f"cannot write CSV: {e.strerror or e}", path) from e
        self.run_stats["files_written"] += 1
        return path

    def _write_summary(self, summary: Dict[str, Any], name: str) -> str:
        path = self._path(name)
        text = "".join(f"{key}={_summary_value(value)}\n" for key, value in summary.items())
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
        except OSError as e:
            logger.error(f"Failed to write {path}: {e}")
            raise OutputError(f"cannot write summary: {e.strerror or e}", path) from e
        self.run_stats["files_written"] += 1
        return path

    def _write_pulse(self, dp: DiscretePulse, name: str) -> str:
        path = self._path(name)
        write_discrete_pulse(path, dp)
        self.run_stats["files_written"] += 1
        return path

    def _check(self, reevaluated: float, phi: float, where: str) -> float:
        deviation = abs(reevaluated - phi)
        if not deviation <= CONSISTENCY_TOLERANCE:
            logger.error(f"Re-evaluated Phi from {where} deviates by {deviation:.3e}")
            raise ConsistencyError(f"{where}: re-evaluated Phi {reevaluated!r} differs from {phi!r} by {deviation:.3e}")
        self.run_stats["reevaluations"] += 1
        return reevaluated

    def reevaluate_phase_file(self, path: str, phi: float) -> float:
        pulse, _ = read_phase_pulse(path)
        return self._check(figure_of_merit(self.spec, pulse), phi, path)

    def reevaluate_discrete_file(self, path: str, phi: float) -> float:
        dp = read_discrete_pulse(path)
        return self._check(figure_of_merit(self.spec, materialize(dp)), phi, path)

    def reevaluate_discrete(self, dp: DiscretePulse, phi: float, label: str) -> float:
        """Same check for a pulse that is not exported: serialize, parse back, propagate."""
        restored = parse_discrete_pulse(format_discrete_pulse(dp), label)
        return self._check(figure_of_merit(self.spec, materialize(restored)), phi, label)

    async def continuous_reference(self, pulse_file: Optional[str] = None,
                                   run_if_missing: bool = False) -> Tuple[PhasePulse, float, str]:
        """
        The continuous pulse the Lloyd path quantizes: `pulse_file` when given, otherwise the
        continuous output of this config, computed first when absent and run_if_missing is set.
        """
        path = pulse_file or os.path.join(self.output_dir, "continuous_pulse.txt")
        if pulse_file is None and not os.path.exists(path):
            if not run_if_missing:
                logger.error(f"No continuous pulse at {path}; run the continuous command first or pass --pulse")
                raise PulseFileError("continuous reference pulse not found", path)
            logger.info("No continuous reference found; running continuous GRAPE first")
            await self.cmd_continuous()
        pulse, _ = read_phase_pulse(path)
        if len(pulse) != self.spec.n_steps:
            logger.error(f"Pulse in {path} has N={len(pulse)}, the experiment needs N={self.spec.n_steps}")
            raise PulseFileError(f"pulse has N={len(pulse)}, expected N={self.spec.n_steps}", path)
        return pulse, figure_of_merit(self.spec, pulse), path

    async def cmd_continuous(self) -> Dict[str, Any]:
        """
        Continuous GRAPE from the parabolic phase; writes the pulse, its trace and a summary.

        Returns:
            Dict with the re-evaluated Phi, the OptimizeTrace, the written paths and the wall time
        """
        self.run_stats["commands_run"] += 1
        start = time.perf_counter()
        trace = self.grape_engine.optimize(self.spec)
        wall_time = time.perf_counter() - start

        pulse_path = self._path("continuous_pulse.txt")
        write_phase_pulse(pulse_path, trace.final_pulse, self.experiment.dt_s)
        self.run_stats["files_written"] += 1
        phi = self.reevaluate_phase_file(pulse_path, trace.final_phi)

        paths = {
            "pulse": pulse_path,
            "trace": self._write_csv(trace_frame(trace.phi_history), "continuous_trace.csv"),
        }
        summary = {
            "command": "continuous",
            "n_steps": self.spec.n_steps,
            "n_off": self.spec.n_off,
            "phi": phi,
            "phi_initial": trace.initial_phi,
            "iterations": trace.iterations,
            "reason": trace.reason,
        }
        paths["summary"] = self._write_summary(summary, "continuous_summary.txt")
        logger.info(f"Continuous benchmark: Phi={phi:.10f} in {wall_time:.2f} s, results in {self.output_dir}")
        return {"phi": phi, "trace": trace, "paths": paths, "wall_time_s": wall_time}

    async def cmd_discrete_campaign(self, m: Optional[int] = None, init: Optional[str] = None,
                                    n_realizations: Optional[int] = None,
                                    pulse_file: Optional[str] = None) -> CampaignResult:
        """
        Independent discrete-GRAPE runs, realization r seeded with derive_seed(seed, r).
        uniform_forward and from_lloyd are deterministic starts and run once.

        Args:
            m: Codebook size; the experiment's M when omitted
            init: "random", "uniform_forward" or "from_lloyd"
            n_realizations: Number of random starts, at least 1
            pulse_file: Continuous pulse to quantize for init="from_lloyd"

        Returns:
            CampaignResult with every realization, the histogram, the summary and the file paths
        """
        self.run_stats["commands_run"] += 1
        m = self.experiment.m if m is None else m
        init = init or self.experiment.init
        n_realizations = self.experiment.n_realizations if n_realizations is None else n_realizations
        if m < 1:
            logger.error(f"Discrete campaign requested with M={m}")
            raise InvalidInputError(f"M must be >= 1, got {m}")
        if n_realizations < 1:
            logger.error(f"Discrete campaign requested with {n_realizations} realizations")
            raise InvalidInputError(f"n_realizations must be >= 1, got {n_realizations}")
        if init not in INIT_STRATEGIES:
            logger.error(f"Unknown init strategy '{init}'")
            raise InvalidInputError(f"init must be one of {INIT_STRATEGIES}, got '{init}'")

        initial = None
        if init == "from_lloyd":
            pulse, _, _ = await self.continuous_reference(pulse_file, run_if_missing=True)
            initial = self.quantizer.quantize(pulse.theta, m).to_discrete_pulse()
        if init != "random" and n_realizations > 1:
            logger.info(f"init={init} is deterministic; running one realization instead of {n_realizations}")
            n_realizations = 1

        seed = self.experiment.seed
        tasks = [
            RealizationTask(r, derive_seed(seed, r), m, init, self.spec, self.discrete_engine.options, initial)
            for r in range(n_realizations)
        ]
        logger.info(f"Discrete campaign: M={m}, init={init}, {n_realizations} realization(s), "
                    f"workers={self.experiment.workers}")
        start = time.perf_counter()
        results = await run_realizations(tasks, self.experiment.workers)
        wall_time = time.perf_counter() - start

        for result in results:
            self.reevaluate_discrete(result.pulse, result.phi, f"realization {result.realization} (M={m})")
            self.discrete_engine.record(result.iterations, result.phi)

        histogram = phi_histogram([r.phi for r in results])
        summary = {"command": "discrete", "m": m, "init": init, "master_seed": seed}
        summary.update(campaign_statistics([r.phi for r in results]))
        campaign = CampaignResult(m, init, seed, results, histogram, summary, wall_time_s=wall_time)
        best = campaign.best
        summary.update({"best_realization": best.realization, "best_seed": best.seed, "phi_best": best.phi})

        stem = f"discrete_M{m}_{init}"
        realizations = pd.DataFrame({
            "realization": [r.realization for r in results],
            "seed": pd.Series([r.seed for r in results], dtype="uint64"),
            "phi": [r.phi for r in results],
            "initial_phi": [r.initial_phi for r in results],
            "iterations": [r.iterations for r in results],
            "reason": [r.reason for r in results],
            "remapped_slices": [r.remapped_slices for r in results],
        })
        campaign.paths["realizations"] = self._write_csv(realizations, f"{stem}_realizations.csv")
        campaign.paths["histogram"] = self._write_csv(histogram, f"{stem}_histogram.csv")
        campaign.paths["best_pulse"] = self._write_pulse(best.pulse, f"{stem}_best_pulse.txt")
        self.reevaluate_discrete_file(campaign.paths["best_pulse"], best.phi)
        campaign.paths["best_codebook"] = self._write_csv(codebook_frame(best.pulse), f"{stem}_best_codebook.csv")
        campaign.paths["best_trace"] = self._write_csv(trace_frame(best.phi_history), f"{stem}_best_trace.csv")
        campaign.paths["summary"] = self._write_summary(summary, f"{stem}_summary.txt")

        logger.info(f"Discrete campaign M={m} ({init}): best Phi={best.phi:.10f}, mean={summary['phi_mean']:.6f}, "
                    f"IQR={summary['phi_iqr']:.3e}, {wall_time:.1f} s")
        return campaign

    async def cmd_lloyd(self, m: Optional[int] = None, pulse_file: Optional[str] = None) -> Dict[str, Any]:
        """
        Quantizes the continuous pulse with M levels and evaluates the quantized pulse.

        Args:
            m: Number of levels; the experiment's M when omitted
            pulse_file: Continuous pulse to quantize instead of this config's continuous output

        Returns:
            Dict with the quantized Phi, the continuous Phi, the LloydResult, the pulse and the paths
        """
        self.run_stats["commands_run"] += 1
        m = self.experiment.m if m is None else m
        pulse, phi_continuous, source = await self.continuous_reference(pulse_file)

        result = self.quantizer.quantize(pulse.theta, m)
        dp = result.to_discrete_pulse()
        phi = figure_of_merit(self.spec, materialize(dp))

        stem = f"lloyd_M{m}"
        paths = {"pulse": self._write_pulse(dp, f"{stem}_pulse.txt")}
        phi = self.reevaluate_discrete_file(paths["pulse"], phi)
        paths["codebook"] = self._write_csv(codebook_frame(dp), f"{stem}_codebook.csv")
        distortion = pd.DataFrame({
            "iteration": np.arange(1, len(result.distortion_history) + 1),
            "distortion": result.distortion_history,
            "squared_distortion": result.squared_distortion_history,
        })
        paths["distortion"] = self._write_csv(distortion, f"{stem}_distortion.csv")
        summary = {
            "command": "lloyd",
            "m": m,
            "source": source,
            "phi": phi,
            "phi_continuous": phi_continuous,
            "distortion": result.codebook.distortion,
            "iterations": result.codebook.iteration,
            "converged": result.converged,
            "empty_bins": len(result.codebook.empty_bins),
        }
        paths["summary"] = self._write_summary(summary, f"{stem}_summary.txt")
        logger.info(f"Lloyd M={m}: Phi={phi:.10f} (continuous {phi_continuous:.10f})")
        return {"phi": phi, "phi_continuous": phi_continuous, "result": result, "pulse": dp, "paths": paths}

    async def cmd_compare(self, m_list: Optional[Sequence[int]] = None) -> Dict[str, Any]:
        """
        Best-of-campaign discrete GRAPE against Lloyd for every M, with the continuous reference.

        Args:
            m_list: Codebook sizes to compare; the experiment's m_list when omitted

        Returns:
            Dict with the comparison table (COMPARE_COLUMNS) and the path of compare.csv
        """
        self.run_stats["commands_run"] += 1
        m_list = tuple(m_list) if m_list is not None else self.experiment.m_list
        if not m_list:
            logger.error("compare called with an empty M list")
            raise InvalidInputError("M list must not be empty")

        _, phi_continuous, _ = await self.continuous_reference(run_if_missing=True)
        rows = []
        for m in m_list:
            campaign = await self.cmd_discrete_campaign(m=m, init="random")
            uniform = await self.cmd_discrete_campaign(m=m, init="uniform_forward")
            lloyd = await self.cmd_lloyd(m=m)
            rows.append({
                "M": m,
                "phi_discrete_grape": campaign.best.phi,
                "phi_lloyd": lloyd["phi"],
                "phi_continuous": phi_continuous,
                "phi_discrete_mean": campaign.summary["phi_mean"],
                "phi_uniform_forward": uniform.best.phi,
            })
        table = pd.DataFrame(rows, columns=COMPARE_COLUMNS)
        path = self._write_csv(table, "compare.csv")
        logger.info(f"Comparison over M={list(m_list)} written to {path}")
        return {"table": table, "paths": {"compare": path}}

    async def cmd_oracle_check(self) -> Dict[str, Any]:
        """Runs every oracle on small random instances and writes oracle_report.csv."""
        self.run_stats["commands_run"] += 1
        reports = run_oracle_suite(
            n_instances=self.oracle_config.get("n_instances", 20),
            seed=self.oracle_config.get("seed", 1234),
            fd_step=self.oracle_config.get("fd_step", 1e-6),
        )
        table = pd.DataFrame([{**asdict(report), "passed": report.passed} for report in reports])
        path = self._write_csv(table, "oracle_report.csv")
        failed = [report for report in reports if not report.passed]
        for report in failed:
            logger.error(f"Oracle {report.oracle} failed on {report.instance}: deviation {report.deviation:.3e}")
        logger.info(f"Oracle check: {len(reports) - len(failed)}/{len(reports)} passed")
        return {"reports": reports, "passed": not failed, "paths": {"report": path}}

    def get_status(self) -> Dict[str, Any]:
        return {
            "output_dir": self.output_dir,
            "n_steps": self.spec.n_steps,
            "grape": self.grape_engine.get_status(),
            "discrete_grape": self.discrete_engine.get_status(),
            **self.run_stats,
        }
