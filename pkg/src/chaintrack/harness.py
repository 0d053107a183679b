"""Experiment pipeline: build a trial, track it, score it, and aggregate batteries.

Reports are split in two: ``report.json`` holds everything that is a pure
function of (config, seed) and is bit-identical across re-runs, while
``timing.json`` holds wall-clock measurements.
"""

from __future__ import annotations

import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, so3
from .chain import ChainGeometry, ChainTopology, ImuPoses, TopologyError, validate_topology
from .config import ConfigError, ExperimentConfig
from .filter import FilterError, FilterResult, FilterState, init_state, run_filter
from .metrics import (
    AggregateRow,
    BatchReport,
    ErrorSeries,
    aggregate_trials,
    batch_mae,
    convergence_time,
)
from .simulator import (
    SimulatedTrial,
    SimulationError,
    default_manipulator,
    resimulate_from_poses,
    simulate_manipulator,
)

WORKERS_ENV = "CHAINTRACK_WORKERS"
REPORT_SCHEMA = "chaintrack.report/1"
SUMMARY_SCHEMA = "chaintrack.summary/1"


class SchemaMismatch(io.DataError):
    """Result directories that cannot be compared side by side."""


# ---------------------------------------------------------------- trial construction


def build_trial(cfg: ExperimentConfig, seed: int) -> SimulatedTrial:
    """Simulate the configured source with measurement noise drawn from ``seed``."""
    noise = cfg.simulation_noise.build(seed)
    src = cfg.source
    try:
        if src.kind == "manipulator":
            m = src.manipulator
            spec = default_manipulator(m.amplitudes_deg, m.frequencies_hz, m.segment_length)
            return simulate_manipulator(spec, cfg.duration, cfg.rate, noise)
        poses = io.read_poses(src.poses_path)
        topo = cfg.chain_topology()
        if poses.imu_count != topo.imu_count:
            raise io.DataError(
                f"pose file holds {poses.imu_count} IMUs, topology declares {topo.imu_count}",
                src.poses_path,
            )
        geometry = None
        if src.geometry_path:
            geometry = io.read_geometry(src.geometry_path, topo.joint_count)
        return resimulate_from_poses(poses, noise, topo, geometry)
    except SimulationError as exc:
        raise io.DataError(str(exc)) from None


def trial_from_data(data: io.TrialData) -> SimulatedTrial:
    """Wrap trial files read from disk in the in-memory trial type."""
    return SimulatedTrial(
        t=data.t,
        rate=data.rate,
        topology=data.topology,
        accel=data.accel,
        gyro=data.gyro,
        orientation_meas=data.orientation,
        poses=data.poses,
        geometry=data.geometry,
    )


def _random_rotation(rng: np.random.Generator, angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    return so3.quat_from_axis_angle(axis, angle)


def initial_state(cfg: ExperimentConfig, trial: SimulatedTrial, seed: int) -> FilterState:
    """Filter prior per the ``init`` section; the joint draw depends on ``seed``."""
    topo = trial.topology
    n = topo.imu_count
    mode = cfg.init.orientation
    if mode == "identity":
        chi0 = np.zeros((n, 3))
    else:
        if trial.poses is None:
            raise io.DataError(f"orientation init '{mode}' needs ground-truth poses")
        q0 = trial.poses.orientations[0]
        if mode == "perturbed":
            base = seed if cfg.init.perturb_orientation_per_seed else 0
            rng = np.random.default_rng(base + cfg.init.joint_seed_offset + 7919)
            angle = np.deg2rad(cfg.init.orientation_perturbation_deg)
            q0 = np.array([so3.quat_multiply(q, _random_rotation(rng, angle)) for q in q0])
        chi0 = np.array([so3.mrp_from_quat(q) for q in q0])
    return init_state(
        topo,
        cfg.filter_noise.build(),
        chi0,
        joint_init=seed + cfg.init.joint_seed_offset,
        joint_range=cfg.init.joint_range,
    )


# ---------------------------------------------------------------- scoring


def _matrices(quat: np.ndarray) -> np.ndarray:
    return so3.quat_to_matrix_batch(quat.reshape(-1, 4)).reshape(quat.shape[:-1] + (3, 3))


def error_series(
    result: FilterResult, poses: ImuPoses, topo: ChainTopology, geometry: ChainGeometry | None
) -> list[ErrorSeries]:
    """Absolute and relative orientation errors and joint-position errors."""
    t = result.t
    Rt = _matrices(poses.orientations)
    Re = _matrices(result.quat)
    out = []
    for i in range(topo.imu_count):
        delta = Rt[:, i] @ np.swapaxes(Re[:, i], 1, 2)
        out.append(ErrorSeries(t, so3.rotation_angle_batch(delta), f"imu{i}", "orientation"))
    for i, j in topo.joints:
        rel_t = np.swapaxes(Rt[:, i], 1, 2) @ Rt[:, j]
        rel_e = np.swapaxes(Re[:, i], 1, 2) @ Re[:, j]
        err = so3.rotation_angle_batch(rel_t @ np.swapaxes(rel_e, 1, 2))
        out.append(ErrorSeries(t, err, f"joint({i},{j})", "orientation"))
    if geometry is not None:
        g = geometry.as_array()
        for k, (i, j) in enumerate(topo.joints):
            for side, imu in enumerate((i, j)):
                err = np.linalg.norm(result.joints[:, k, side] - g[k, side], axis=1)
                out.append(ErrorSeries(t, err, f"J({i},{j})@imu{imu}", "position"))
    return out


@dataclass
class TrialReport:
    """Scores of one tracked trial.

    ``runtime`` is kept apart from the deterministic part, see :meth:`to_dict`.
    """

    seed: int | None
    steps: int
    batches: list[BatchReport]
    convergence: dict[str, float | None]
    not_converged: int
    runtime: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "seed": self.seed,
            "steps": self.steps,
            "batches": [b.to_dict() for b in self.batches],
            "convergence": self.convergence,
            "solver_not_converged": self.not_converged,
        }

    @classmethod
    def from_dict(cls, d: dict, runtime: dict | None = None) -> TrialReport:
        if d.get("schema") != REPORT_SCHEMA:
            raise SchemaMismatch(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            d["seed"],
            d["steps"],
            [BatchReport.from_dict(b) for b in d["batches"]],
            d["convergence"],
            d["solver_not_converged"],
            runtime or {},
        )


def runtime_stats(step_seconds: np.ndarray) -> dict[str, float]:
    ms = np.asarray(step_seconds) * 1e3
    return {
        "steps": int(len(ms)),
        "mean_ms": float(np.mean(ms)),
        "median_ms": float(np.median(ms)),
        "p95_ms": float(np.percentile(ms, 95)),
        "total_s": float(np.sum(ms) / 1e3),
    }


def score(
    cfg: ExperimentConfig, result: FilterResult, trial: SimulatedTrial, seed: int | None
) -> TrialReport:
    """Metrics against the trial's ground truth; empty when it carries none."""
    ev = cfg.evaluation
    batches: list[BatchReport] = []
    convergence: dict[str, float | None] = {}
    if trial.poses is not None:
        series = error_series(result, trial.poses, trial.topology, trial.geometry)
        dt = 1.0 / trial.rate
        length = len(result.t) * dt - ev.skip_initial
        batch_length = ev.batch_length if ev.batch_length is not None else length / 2.0
        for s in series:
            batches.append(batch_mae(s, batch_length, ev.skip_initial))
            if s.kind == "position":
                convergence[s.label] = convergence_time(
                    s, ev.convergence_threshold, ev.convergence_hold
                )
    return TrialReport(
        seed,
        len(result.t),
        batches,
        convergence,
        int(result.not_converged),
        runtime_stats(result.step_seconds),
    )


def track(cfg: ExperimentConfig, trial: SimulatedTrial, seed: int) -> tuple[FilterResult, TrialReport]:
    """Run the filter over ``trial`` and score it."""
    try:
        validate_topology(trial.topology)
    except TopologyError as exc:
        raise io.DataError(f"trial topology: {exc}") from None
    init = initial_state(cfg, trial, seed)
    result = run_filter(
        trial.accel,
        trial.gyro,
        trial.orientation_meas,
        1.0 / trial.rate,
        trial.topology,
        cfg.filter_noise.build(),
        cfg.solver.build(),
        init,
        t=trial.t,
    )
    return result, score(cfg, result, trial, seed)


# ---------------------------------------------------------------- output


def write_report_files(directory: Path, report: TrialReport) -> None:
    io.write_json(directory / "report.json", report.to_dict())
    io.write_json(directory / "timing.json", report.runtime)


def write_error_series(path: Path, series: list[ErrorSeries]) -> None:
    """Wide CSV of per-step errors, degrees for orientation and metres for position."""
    if not series:
        return
    header = ["t"] + [s.label for s in series]
    cols = [series[0].t] + [
        np.rad2deg(s.values) if s.kind == "orientation" else s.values for s in series
    ]
    io.write_table(path, header, cols)


def run_track(cfg: ExperimentConfig, trial_dir: Path, out: Path) -> TrialReport:
    """Track trial files from ``trial_dir`` and write estimates and reports to ``out``."""
    data = io.read_trial(trial_dir)
    trial = trial_from_data(data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.yaml").write_text(cfg.to_yaml())
    result, report = track(cfg, trial, cfg.seed)
    io.write_estimates(out, result.t, result.quat, result.omega, result.joints)
    if trial.poses is not None:
        series = error_series(result, trial.poses, trial.topology, trial.geometry)
        write_error_series(out / "errors.csv", series)
    write_report_files(out, report)
    rows = aggregate_trials(report.batches) if report.batches else {}
    write_tables(out, {"track": rows}, "table")
    return report


def run_simulate(cfg: ExperimentConfig, out: Path) -> SimulatedTrial:
    trial = build_trial(cfg, cfg.seed)
    io.write_trial(out, trial)
    (out / "config.effective.yaml").write_text(cfg.to_yaml())
    return trial


# ---------------------------------------------------------------- monte carlo


def _one_seed(payload: tuple[dict, int]) -> dict:
    cfg_data, seed = payload
    cfg = ExperimentConfig.model_validate(cfg_data)
    try:
        trial = build_trial(cfg, seed)
        _, report = track(cfg, trial, seed)
    except FilterError as exc:
        return {"seed": seed, "ok": False, "error": str(exc), "kind": "numerical", "step": exc.step}
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return {"seed": seed, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                "kind": "numerical" if isinstance(exc, ArithmeticError) else "data", "step": None}
    except Exception as exc:  # keep the battery alive, record the trace
        return {"seed": seed, "ok": False, "error": "".join(traceback.format_exception_only(exc)).strip(),
                "kind": "internal", "step": None}
    return {"seed": seed, "ok": True, "report": report.to_dict(), "runtime": report.runtime}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {value}")
    return value


@dataclass
class BatteryResult:
    reports: list[TrialReport]
    failures: list[dict]
    rows: dict[str, AggregateRow]

    def summary(self, cfg: ExperimentConfig) -> dict:
        conv = [v for r in self.reports for v in r.convergence.values()]
        return {
            "schema": SUMMARY_SCHEMA,
            "seeds": sorted([r.seed for r in self.reports] + [f["seed"] for f in self.failures]),
            "completed": len(self.reports),
            "failures": sorted(self.failures, key=lambda f: f["seed"]),
            "rows": [row.to_dict() for row in self.rows.values()],
            "convergence_max_s": (
                None if not conv or any(v is None for v in conv) else max(conv)
            ),
            "not_converged_joint_positions": sum(v is None for v in conv),
            "solver_not_converged": sum(r.not_converged for r in self.reports),
            "filter_noise": cfg.filter_noise.resolved().model_dump(),
        }


def run_battery(cfg: ExperimentConfig, workers: int = 1) -> BatteryResult:
    """Simulate and track ``cfg.seeds`` trials with seeds ``cfg.seed, cfg.seed + 1, ...``.

    Failed seeds are recorded and skipped; aggregation sorts by seed so the
    result does not depend on completion order.
    """
    data = cfg.model_dump(mode="json")
    payloads = [(data, cfg.seed + k) for k in range(cfg.seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_one_seed, payloads))
    else:
        outcomes = [_one_seed(p) for p in payloads]
    outcomes.sort(key=lambda o: o["seed"])
    reports = [TrialReport.from_dict(o["report"], o["runtime"]) for o in outcomes if o["ok"]]
    failures = [{k: v for k, v in o.items() if k != "ok"} for o in outcomes if not o["ok"]]
    batches = [b for r in reports for b in r.batches]
    rows = aggregate_trials(batches) if batches else {}
    return BatteryResult(reports, failures, rows)


def run_montecarlo(cfg: ExperimentConfig, out: Path, workers: int | None = None) -> BatteryResult:
    workers = worker_count() if workers is None else workers
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.yaml").write_text(cfg.to_yaml())
    battery = run_battery(cfg, workers)
    for rep in battery.reports:
        d = out / "trials" / f"seed_{rep.seed:04d}"
        d.mkdir(parents=True, exist_ok=True)
        write_report_files(d, rep)
    io.write_json(out / "summary.json", battery.summary(cfg))
    medians = [r.runtime["median_ms"] for r in battery.reports]
    io.write_json(out / "timing.json", {
        "workers": workers,
        "per_trial_median_ms": {str(r.seed): r.runtime["median_ms"] for r in battery.reports},
        "median_of_medians_ms": float(np.median(medians)) if medians else None,
        "max_p95_ms": max((r.runtime["p95_ms"] for r in battery.reports), default=None),
    })
    write_tables(out, {"montecarlo": battery.rows}, "table")
    return battery


# ---------------------------------------------------------------- tables and report merge


def unit(kind: str) -> str:
    return "deg" if kind == "orientation" else "cm"


def _table(columns: dict[str, dict[str, AggregateRow]]) -> tuple[list[str], list[list[str]]]:
    labels: list[str] = []
    for rows in columns.values():
        labels += [label for label in rows if label not in labels]
    header = ["label", "unit"]
    for n in columns:
        header += [f"{n}:median", f"{n}:std", f"{n}:drift", f"{n}:trials"]
    lines = []
    for label in labels:
        kind = next(rows[label].kind for rows in columns.values() if label in rows)
        scale = np.rad2deg(1.0) if kind == "orientation" else 100.0
        cells = [label, unit(kind)]
        for rows in columns.values():
            row = rows.get(label)
            if row is None:
                cells += ["", "", "", ""]
            else:
                cells += [f"{row.median * scale:.4f}", f"{row.std * scale:.4f}",
                          f"{row.drift * scale:.4f}", str(row.trials)]
        lines.append(cells)
    return header, lines


def format_table(columns: dict[str, dict[str, AggregateRow]]) -> str:
    """Aligned text table; orientation rows in degrees, position rows in centimetres."""
    header, lines = _table(columns)
    widths = [max([len(h)] + [len(c[k]) for c in lines]) for k, h in enumerate(header)]
    return "\n".join(
        "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() for cells in [header] + lines
    ) + "\n"


def write_tables(out: Path, columns: dict[str, dict[str, AggregateRow]], stem: str) -> str:
    """Write ``columns`` (name -> label -> row) as CSV, JSON and text; returns the text."""
    header, lines = _table(columns)
    with open(out / f"{stem}.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for cells in lines:
            fh.write(",".join(cells) + "\n")
    io.write_json(out / f"{stem}.json", {n: [r.to_dict() for r in rows.values()] for n, rows in columns.items()})
    text = format_table(columns)
    (out / f"{stem}.txt").write_text(text)
    return text


def load_result_rows(directory: Path) -> dict[str, AggregateRow]:
    """Aggregate rows of a ``montecarlo`` or ``track`` output directory."""
    directory = Path(directory)
    if (directory / "summary.json").exists():
        data = io.read_json(directory / "summary.json")
        if data.get("schema") != SUMMARY_SCHEMA:
            raise SchemaMismatch(f"unsupported summary schema {data.get('schema')!r}", directory)
        rows = {}
        for r in data["rows"]:
            rows[r["label"]] = AggregateRow(
                r["label"], r["kind"], r["median"], r["std"], r["trials"], r["batch_median"]
            )
        return rows
    if (directory / "report.json").exists():
        report = TrialReport.from_dict(io.read_json(directory / "report.json"))
        return aggregate_trials(report.batches) if report.batches else {}
    raise io.DataError("neither summary.json nor report.json found", directory)


def run_report(dirs: list[Path], out: Path | None = None) -> str:
    """Side-by-side comparison of result directories; labels and kinds must agree."""
    if not dirs:
        raise io.DataError("no result directories given")
    columns: dict[str, dict[str, AggregateRow]] = {}
    reference: dict[str, str] | None = None
    for d in dirs:
        rows = load_result_rows(d)
        kinds = {label: row.kind for label, row in rows.items()}
        if reference is None:
            reference = kinds
        elif kinds != reference:
            missing = sorted(set(reference) ^ set(kinds))
            raise SchemaMismatch(
                f"labels differ from {dirs[0]}: {', '.join(missing) or 'kinds differ'}", d
            )
        name = Path(d).name or str(d)
        while name in columns:
            name += "'"
        columns[name] = rows
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        return write_tables(out, columns, "comparison")
    return format_table(columns)
