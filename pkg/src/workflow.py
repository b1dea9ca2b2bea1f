"""Run pipeline of the lab as a LangGraph state graph.

validate -> limits -> flow -> refine -> probe -> oracles -> summarize, with
every stage able to divert to record_failure. Stage transitions are
appended to the run manifest; partial outputs stay on disk.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from langgraph.graph import END, StateGraph

import acceptance
from chart_geometry import Density, build_reference, class_data, delta_sweep, fs_density
from config import ModelConfig, load_model_config
from curvature_estimates import DiagnosticsSeries, fit_decay, scalar_curvature
from error_handling import ErrorHandler, LabError, NewtonDivergence
from limit_ma import (
    load_limit,
    save_limit,
    solve_limit_ladder,
    uniqueness_probe,
    verify_gke,
)
from ma_flow import SLACK_TOL, LadderResult, epsilon_ladder, jacobian_fd_error, richardson_order
from metric_space import (
    fiber_circumference,
    gh_upper_bound,
    metrication_gap,
    pole_to_pole,
)
from persistence import (
    RunManifest,
    limit_path,
    read_json,
    read_series,
    rung_dir,
    write_json,
    write_series,
    write_table,
)
from plots import plot_limit, plot_rates, report_figures
from state import RunState, create_initial_state, handle_state_error, record_stage, validate_state

logger = logging.getLogger(__name__)

# Constants for pipeline routing
NEXT = "next"
FAILED = "failed"

CALIBRATION_ORDER = 6
CALIBRATION_WINDOW = 5.0
JACOBIAN_CHECK_TIME = 1.0


class LabPipeline:
    """Executes one run directory end to end."""

    def __init__(self, config: ModelConfig, run_dir, workers: int = 1, resume: bool = False):
        """Initialize the pipeline.

        Args:
            config: Validated configuration.
            run_dir: Output directory; created if needed.
            workers: Worker processes for independent rungs.
            resume: Continue unfinished rungs from their checkpoints.
        """
        self.config = config
        self.run_dir = Path(run_dir)
        self.workers = workers
        self.resume = resume
        self.error_handler = ErrorHandler()
        self.manifest: Optional[RunManifest] = None

        self.workflow = self._create_workflow()
        self.app = self.workflow.compile()

    def _create_workflow(self) -> StateGraph:
        """Create the LangGraph workflow.

        Returns:
            StateGraph: The uncompiled pipeline graph.
        """
        workflow = StateGraph(RunState)

        stages = [
            ("validate", self._validate),
            ("limits", self._limits),
            ("flow", self._flow),
            ("refine", self._refine),
            ("probe", self._probe),
            ("oracles", self._oracles),
            ("summarize", self._summarize),
        ]
        for name, node in stages:
            workflow.add_node(name, self._guarded(name, node))
        workflow.add_node("record_failure", self._record_failure)

        workflow.set_entry_point("validate")
        for (name, _), (following, _) in zip(stages, stages[1:]):
            workflow.add_conditional_edges(
                name, self._route, {NEXT: following, FAILED: "record_failure"}
            )
        workflow.add_conditional_edges(
            "summarize", self._route, {NEXT: END, FAILED: "record_failure"}
        )
        workflow.add_edge("record_failure", END)
        return workflow

    def _route(self, state: RunState) -> str:
        return FAILED if state.get("last_error") else NEXT

    def _guarded(self, name: str, node):
        """Wrap a stage so that any error is classified and routed to record_failure."""

        def run(state: RunState) -> Dict[str, Any]:
            logger.info(f"Stage {name} started")
            try:
                update = node(state)
            except Exception as e:
                error_type = self.error_handler.classify_error(e)
                self.error_handler.log_error(e, 0, name)
                failed = handle_state_error(dict(state), f"{name}: {type(e).__name__}: {e}", error_type.value)
                return {
                    "last_error": failed["last_error"],
                    "error_type": failed["error_type"],
                    "retry_count": failed["retry_count"],
                    "stages": self._mark(state, name, "failed", str(e)),
                }
            logger.info(f"Stage {name} finished")
            return update

        return run

    def _mark(self, state: RunState, stage: str, status: str, message: Optional[str] = None):
        """Append a stage transition to the state and to the manifest."""
        if self.manifest is not None:
            self.manifest.record_stage(stage, status, message)
            self.manifest.save(self.run_dir)
        return record_stage(dict(state), stage, status, message)["stages"]

    def _record(self, path, kind: str):
        self.manifest.record_file(self.run_dir, Path(path), kind)

    # Stages

    def _validate(self, state: RunState) -> Dict[str, Any]:
        config = self.config
        class_data(config)
        build_reference(config, max(config.epsilon_ladder))
        for delta, lo, hi, ok in delta_sweep(config, [config.delta]):
            if not ok:
                logger.warning(f"chi* / chi ranges over [{lo:.3g}, {hi:.3g}] for delta={delta:g}")

        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.open(self.run_dir, config.config_hash())
        config_path = self.run_dir / "config.json"
        config_path.write_text(config.model_dump_json(indent=2))
        self._record(config_path, "config")
        return {"stages": self._mark(state, "validate", "completed")}

    def _limits(self, state: RunState) -> Dict[str, Any]:
        config = self.config
        if config.mode != "twisted":
            return {"stages": self._mark(state, "limits", "skipped", "normalized mode")}

        ladder = sorted(config.epsilon_ladder, reverse=True)
        stored = [limit_path(self.run_dir, eps) for eps in ladder]
        if self.resume and all(p.exists() for p in stored):
            limits = {eps: load_limit(p, config) for eps, p in zip(ladder, stored)}
            cauchy = [
                float(np.max(np.abs(limits[a].psi - limits[b].psi))) for a, b in zip(ladder, ladder[1:])
            ]
            logger.info("Loaded stored limit solutions")
        else:
            result = solve_limit_ladder(config, ladder)
            limits, cauchy = result.solutions, result.cauchy
            for eps, path in zip(ladder, stored):
                save_limit(path, limits[eps], config)
                self._record(path, "limit")

        rows = []
        for eps in ladder:
            report = verify_gke(limits[eps], build_reference(config, eps), config)
            rows.append([eps, limits[eps].residual_norm, report.sup, report.trace_sup, report.s_lo, report.s_hi])
        gke_path = self.run_dir / "limit" / "gke.csv"
        write_table(gke_path, ["eps", "newton_residual", "gke_sup", "gke_trace_sup", "s_lo", "s_hi"], rows)
        self._record(gke_path, "table")

        summary = dict(state["summary"])
        summary["limit"] = {
            "cauchy": cauchy,
            "monotone": all(b < a for a, b in zip(cauchy, cauchy[1:])),
            "gke": {f"{row[0]:g}": {"sup": row[2], "trace_sup": row[3], "window": row[4:6]} for row in rows},
        }
        return {"limits": limits, "summary": summary, "stages": self._mark(state, "limits", "completed")}

    def _run_ladder(self, config: ModelConfig, stage: str, limits=None, ladder=None) -> LadderResult:
        result = epsilon_ladder(
            config,
            limits=limits,
            workers=self.workers,
            checkpoint_dir=self.run_dir / stage,
            resume=self.resume,
            ladder=ladder,
        )
        for eps, run in sorted(result.runs.items(), reverse=True):
            directory = rung_dir(self.run_dir, eps, stage)
            csv_path = directory / "diagnostics.csv"
            write_series(csv_path, run.series)
            self._record(csv_path, "diagnostics")
            checkpoint = directory / "checkpoint.npz"
            if checkpoint.exists():
                self._record(checkpoint, "checkpoint")
        return result

    def _flow(self, state: RunState) -> Dict[str, Any]:
        result = self._run_ladder(self.config, "flow", limits=state.get("limits") or None)
        if result.finest is None:
            errors = "; ".join(f"eps={r.eps:g}: {r.error}" for r in result.runs.values())
            raise NewtonDivergence(f"no rung of the ladder completed: {errors}")
        status = "partial" if result.partial else "completed"
        message = None
        if result.partial:
            message = ", ".join(f"eps={r.eps:g} ({r.error_type})" for r in result.runs.values() if not r.completed)
        return {"rungs": result.runs, "stages": self._mark(state, "flow", status, message), "summary": {
            **state["summary"],
            "cauchy": result.cauchy,
            "non_cauchy": result.non_cauchy,
            "partial": result.partial,
        }}

    def _refine(self, state: RunState) -> Dict[str, Any]:
        if not self.config.refine:
            return {"stages": self._mark(state, "refine", "skipped")}
        finest = sorted(self.config.epsilon_ladder)[:2]
        result = self._run_ladder(self.config.refined(), "refined", ladder=sorted(finest, reverse=True))
        status = "partial" if result.partial else "completed"
        return {"refined": result.runs, "stages": self._mark(state, "refine", status)}

    def _probe(self, state: RunState) -> Dict[str, Any]:
        probe_config = self.config.probe_config()
        if probe_config is None:
            return {"stages": self._mark(state, "probe", "skipped")}
        result = self._run_ladder(probe_config, "probe")
        status = "partial" if result.partial else "completed"
        return {"probe": result.runs, "stages": self._mark(state, "probe", status)}

    def _oracles(self, state: RunState) -> Dict[str, Any]:
        config = self.config
        oracles = compute_oracles(config, state["rungs"], state.get("limits") or {})
        path = self.run_dir / "oracles.json"
        write_json(path, oracles)
        self._record(path, "report")
        return {"oracles": oracles, "stages": self._mark(state, "oracles", "completed")}

    def _summarize(self, state: RunState) -> Dict[str, Any]:
        config = self.config
        summary = dict(state["summary"])
        summary.update(
            {
                "config_hash": config.config_hash(),
                "mode": config.mode,
                "rungs": {f"{eps:g}": rung_summary(run) for eps, run in sorted(state["rungs"].items(), reverse=True)},
                "limit_columns_zero": config.mode != "twisted",
            }
        )

        series_by_stage = {
            stage: {eps: run.series for eps, run in (state.get(key) or {}).items()}
            for stage, key in (("flow", "rungs"), ("refined", "refined"), ("probe", "probe"))
        }
        for path in report_figures(self.run_dir, series_by_stage, config.config_hash()):
            self._record(path, "plot")
        limits = state.get("limits") or {}
        if limits:
            s = build_reference(config, max(limits)).grid.nodes
            path = plot_limit(s, {eps: sol.psi for eps, sol in limits.items()}, self.run_dir / "plots" / "limit.svg", config.config_hash())
            self._record(path, "plot")

        stages = self._mark(state, "summarize", "completed")
        results = acceptance.evaluate(self.run_dir)
        summary["verdicts"] = {f"{r.number}": {"title": r.title, "status": r.status, "detail": r.detail} for r in results}
        summary["all_passed"] = acceptance.all_passed(results)
        path = self.run_dir / "summary.json"
        write_json(path, summary)
        self._record(path, "report")
        self.manifest.save(self.run_dir)
        return {"summary": summary, "stages": stages, "should_end": True}

    def _record_failure(self, state: RunState) -> Dict[str, Any]:
        """Persist the failure; whatever was written so far stays in place."""
        logger.error(f"Run failed: {state.get('last_error')}")
        if self.manifest is not None:
            self.manifest.save(self.run_dir)
        return {"should_end": True}

    def run(self) -> RunState:
        """Execute the pipeline.

        Returns:
            RunState: Final state; last_error and error_type are set on failure.
        """
        initial = create_initial_state(self.config, str(self.run_dir), self.workers, self.resume)
        if not validate_state(initial):
            raise ValueError("invalid pipeline state")
        return self.app.invoke(initial, {"recursion_limit": 50})


def _fitted_rate(series: DiagnosticsSeries, column: str) -> Dict[str, Any]:
    try:
        fit = fit_decay(series.times, series.column(column), acceptance.FIT_WINDOW)
        return {"rate": fit.rate, "rms": fit.rms, "samples": fit.samples}
    except LabError as e:
        return {"rate": None, "reason": str(e)}


def rung_summary(run) -> Dict[str, Any]:
    """Final sup-norms, fitted rates and diameters of one rung."""
    series = run.series
    final = series.row(len(series) - 1) if len(series) else {}
    return {
        "completed": run.completed,
        "error": run.error,
        "error_type": run.error_type,
        "rejected_steps": run.rejected_steps,
        "worst_slack": run.worst_slack if math.isfinite(run.worst_slack) else None,
        "max_principle_ok": not run.worst_slack > SLACK_TOL,
        "final": {k: (v if math.isfinite(v) else None) for k, v in final.items()},
        "rates": {
            column: _fitted_rate(series, column)
            for column in ("sup_v", "sup_phi_dot", "trace_defect_abs", "fiber_diameter")
        },
    }


def _sample_near(run, t: float):
    times = np.array([s.t for s in run.trajectory])
    k = int(np.argmin(np.abs(times - t)))
    return run.trajectory[k] if abs(times[k] - t) < 1e-9 else None


def compute_oracles(config: ModelConfig, rungs: Dict[float, Any], limits: Dict[float, Any]) -> Dict[str, Any]:
    """Independent checks of the solvers and of the distance machinery."""
    completed = {eps: run for eps, run in rungs.items() if run.completed}
    finest_eps = min(completed)
    coarsest_eps = max(config.epsilon_ladder)
    refs = build_reference(config, finest_eps)
    run = completed[finest_eps]

    s = refs.grid.nodes
    window = np.abs(s) <= CALIBRATION_WINDOW
    fs_error = float(np.nanmax(np.abs(scalar_curvature(refs.fs, CALIBRATION_ORDER)[window] - 2.0)))

    state = _sample_near(run, JACOBIAN_CHECK_TIME) or run.final
    omega = Density(refs.grid, run.final.omega, refs.left_lambda, 1.0, refs.chi_star.cone_angle, "omega")
    oracles: Dict[str, Any] = {
        "calibration": {"fs_curvature_error": fs_error, "order": CALIBRATION_ORDER, "window": CALIBRATION_WINDOW},
        "jacobian_fd_error": jacobian_fd_error(state, refs, config.dt),
        "metrication": {
            "fs": metrication_gap(Density(refs.grid, fs_density(s), 1.0, 1.0, 1.0, "fs"), config),
            "final": metrication_gap(omega, config),
        },
        "richardson_order": richardson_order(config, coarsest_eps),
    }

    classes = class_data(config)
    base = fiber_circumference(0.0, config, refs)
    rows = []
    for t in config.metric.oracle_times:
        if t > config.t_end:
            continue
        circumference = fiber_circumference(t, config, refs)
        expected = base * math.sqrt(classes.fiber_coefficient(t) / classes.fiber_coefficient(0.0))
        rows.append({"t": t, "circumference": circumference, "scaling_error": circumference / expected - 1.0})
    oracles["fiber_circumference"] = rows

    if limits:
        limit = limits[finest_eps] if finest_eps in limits else limits[min(limits)]
        oracles["limit_diameter"] = pole_to_pole(limit.chibar_density)
        coarse_refs = build_reference(config, coarsest_eps)
        oracles["uniqueness_spread"] = uniqueness_probe(
            coarse_refs, config, reference=limits.get(coarsest_eps)
        )
        gh_rows = []
        for t in config.metric.oracle_times:
            sample = _sample_near(run, t)
            if sample is None:
                continue
            density = Density(refs.grid, sample.omega, refs.left_lambda, 1.0, refs.chi_star.cone_angle, "omega")
            gh_rows.append(
                {
                    "t": t,
                    "meridian": gh_upper_bound(density, t, limit.chibar_density, config),
                    "oracle": gh_upper_bound(density, t, limit.chibar_density, config, oracle=True),
                }
            )
        oracles["gh_oracle"] = gh_rows
    return oracles


def run_pipeline(config: ModelConfig, run_dir, workers: int = 1, resume: bool = False) -> RunState:
    """Build and execute the pipeline for one configuration."""
    return LabPipeline(config, run_dir, workers, resume).run()


def run_limit(config: ModelConfig, out_dir) -> Dict[str, Any]:
    """Limit ladder plus Kahler-Einstein report, without the flow."""
    out_dir = Path(out_dir)
    result = solve_limit_ladder(config)
    rows = []
    for eps, sol in sorted(result.solutions.items(), reverse=True):
        refs = build_reference(config, eps)
        save_limit(limit_path(out_dir, eps), sol, config)
        report = verify_gke(sol, refs, config)
        rows.append([eps, sol.residual_norm, report.sup, report.trace_sup, report.s_lo, report.s_hi])
    write_table(out_dir / "limit" / "gke.csv", ["eps", "newton_residual", "gke_sup", "gke_trace_sup", "s_lo", "s_hi"], rows)
    s = build_reference(config, max(result.solutions)).grid.nodes
    plot_limit(s, {eps: sol.psi for eps, sol in result.solutions.items()}, out_dir / "plots" / "limit.svg", config.config_hash())
    report = {
        "config_hash": config.config_hash(),
        "cauchy": result.cauchy,
        "monotone": result.monotone,
        "gke": [dict(zip(["eps", "newton_residual", "gke_sup", "gke_trace_sup", "s_lo", "s_hi"], row)) for row in rows],
    }
    write_json(out_dir / "limit" / "report.json", report)
    return report


def regenerate_report(run_dir) -> Dict[str, Any]:
    """Rebuild the SVG figures of a run directory from its CSV tables."""
    run_dir = Path(run_dir)
    config = load_model_config(run_dir / "config.json")
    series_by_stage = {}
    for stage in ("flow", "refined", "probe"):
        base = run_dir / stage
        if not base.is_dir():
            continue
        series_by_stage[stage] = {
            float(child.name[4:]): read_series(child / "diagnostics.csv")
            for child in sorted(base.iterdir())
            if child.name.startswith("eps_") and (child / "diagnostics.csv").exists()
        }
    report_figures(run_dir, series_by_stage, config.config_hash())
    return read_json(run_dir / "summary.json")


def _sweep_member(args) -> Dict[str, Any]:
    """Run one sweep configuration in isolation; failures become table rows."""
    index, data, out_dir = args
    run_dir = Path(out_dir) / f"run_{index:03d}"
    row: Dict[str, Any] = {"index": index, "run_dir": str(run_dir)}
    try:
        config = ModelConfig.model_validate(data)
        row.update({"beta": config.beta, "delta": config.delta, "a": config.a, "b": config.b})
        state = run_pipeline(config, run_dir, workers=1)
        if state.get("last_error"):
            row.update({"status": "failed", "error_type": state.get("error_type"), "error": state.get("last_error")})
            return row
        rungs = state["summary"]["rungs"]
        finest = rungs[min(rungs, key=float)]
        row["status"] = "completed"
        for column in ("sup_v", "sup_phi_dot", "trace_defect_abs"):
            row[f"rate_{column}"] = finest["rates"][column]["rate"]
        row["all_passed"] = state["summary"].get("all_passed")
    except Exception as e:
        error_type = ErrorHandler().classify_error(e).value
        logger.error(f"Sweep member {index} failed: {e}")
        row.update({"status": "failed", "error_type": error_type, "error": str(e)})
    return row


SWEEP_COLUMNS = [
    "index", "status", "beta", "delta", "a", "b",
    "rate_sup_v", "rate_sup_phi_dot", "rate_trace_defect_abs",
    "all_passed", "error_type", "error", "run_dir",
]


def run_sweep(sweep_path, out_dir, workers: int = 1) -> List[Dict[str, Any]]:
    """Run every configuration of a sweep document and merge the summaries.

    The document holds a "base" configuration and a list of "variations",
    each a dict of top-level overrides. Members run in separate processes;
    the merge is done here, in order.
    """
    document = read_json(sweep_path)
    base = document["base"]
    if isinstance(base, str):
        base = read_json(Path(sweep_path).parent / base)
    members = [(k, {**base, **overrides}, str(out_dir)) for k, overrides in enumerate(document["variations"])]

    if workers > 1 and len(members) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(members))) as pool:
            rows = list(pool.map(_sweep_member, members))
    else:
        rows = [_sweep_member(m) for m in members]

    out_dir = Path(out_dir)
    write_table(out_dir / "comparison.csv", SWEEP_COLUMNS, [[row.get(c, "") for c in SWEEP_COLUMNS] for row in rows])
    sweep_hash = hashlib.sha256(json.dumps(document, sort_keys=True).encode("utf-8")).hexdigest()
    completed = [r for r in rows if r.get("status") == "completed"]
    plot_rates(completed, out_dir / "plots" / "rate_vs_beta.svg", sweep_hash)
    logger.info(f"Sweep finished: {len(completed)}/{len(rows)} configurations completed")
    return rows
