"""Sample jobs, a content-addressed solve cache, persistent sample records and
a local worker pool with deterministic ordered reduction.
"""
from __future__ import annotations

import hashlib
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import io
from .grids import build_time_grid
from .inputs import DEFAULT_PARAMS, HenryParameters, RandomInput, draw_uniform, halton
from .mlmc import LevelStats, accumulate_level
from .qoi import QOI_NAMES, QoiRecorder
from .solver.flow import SolverConfig, SolverFailure, time_march

log = logging.getLogger(__name__)

CACHE_FORMAT = 2
INDEX_HEADER = ["run_id", "level", "index", "kind", "status", "xi1", "xi2", "xi3", "cost", "file"]
WORKERS_ENV = "HENRY_MLMC_WORKERS"


class Interrupted(RuntimeError):
    """Raised by :func:`run` when ``stop_after`` records have been persisted."""


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


# ---------------------------------------------------------------- single solves

@dataclass
class SolveOutput:
    """QoI time series of one solve, with its cost and optional terminal field."""

    level: int
    times: np.ndarray
    values: np.ndarray            # (r, len(QOI_NAMES))
    wall_time: float
    metrics: dict
    final_c: np.ndarray | None = None
    max_abs_subdomain: float = 0.0

    def series(self, name: str) -> np.ndarray:
        return self.values[:, QOI_NAMES.index(name)]

    def aligned(self, name: str, level: int = 0) -> np.ndarray:
        """Values of ``name`` at the output times of ``level`` (every 4^k-th value)."""
        ratio = 4 ** (self.level - level)
        return self.series(name)[ratio - 1::ratio]

    def to_dict(self):
        d = {"level": self.level, "times": self.times, "values": self.values,
             "wall_time": self.wall_time, "metrics": self.metrics,
             "max_abs_subdomain": self.max_abs_subdomain}
        if self.final_c is not None:
            d["final_c"] = self.final_c
        return d

    @classmethod
    def from_dict(cls, d):
        fc = d.get("final_c")
        return cls(int(d["level"]), np.array(d["times"], dtype=float),
                   np.array(d["values"], dtype=float).reshape(-1, len(QOI_NAMES)),
                   float(d["wall_time"]), d["metrics"],
                   None if fc is None else np.array(fc, dtype=float),
                   float(d.get("max_abs_subdomain", 0.0)))


def solve_key(level: int, xi: RandomInput, config: SolverConfig, params: HenryParameters) -> str:
    """Content address of one solve: level, bitwise xi, physics and solver settings."""
    cfg = config.to_dict()
    cfg.pop("mg_reuse_max_iter", None)
    payload = io.dumps({"format": CACHE_FORMAT, "level": level,
                        "xi": [float.hex(float(v)) for v in xi.xi],
                        "params": asdict(params), "solver": cfg})
    return hashlib.sha256(payload.encode()).hexdigest()


def solve_qois(level: int, xi: RandomInput, config: SolverConfig = SolverConfig(),
               params: HenryParameters = DEFAULT_PARAMS, cache_dir=None,
               keep_field: bool = False) -> SolveOutput:
    """Run one trajectory and record all QoIs, reusing a cached result if present."""
    path = None
    if cache_dir is not None:
        key = solve_key(level, xi, config, params)
        path = Path(cache_dir) / key[:2] / f"{key}.json"
        if path.exists():
            out = SolveOutput.from_dict(io.read_json(path))
            if out.final_c is not None or not keep_field:
                return out
    rec = QoiRecorder(level, params)
    tr = time_march(level, xi, config, params, observers=[rec], max_level=level,
                    record_steps=False)
    values = rec.values
    metrics = tr.metrics.summary()
    out = SolveOutput(level, np.array(rec.times), values, tr.metrics.wall_time, metrics,
                      tr.state.c.copy() if keep_field else None,
                      float(np.max(np.abs(values[:, 2:17]))) if values.size else 0.0)
    if path is not None:
        io.write_json(path, out.to_dict(), indent=None)
    return out


# ---------------------------------------------------------------- jobs and records

@dataclass(frozen=True)
class Job:
    run_id: str
    level: int
    index: int
    seed: int
    kind: str = "coupled"         # "single" on level 0 and for single-level studies
    source: str = "pseudo"        # "pseudo" | "halton"
    xi_level: int | None = None   # stream level for xi; shared-sample mode fixes it
    keep_field: bool = False

    def __post_init__(self):
        if self.kind not in ("single", "coupled"):
            raise ValueError(f"unknown job kind {self.kind!r}")
        if self.kind == "coupled" and self.level == 0:
            raise ValueError("level-0 jobs have no coarse partner")
        if self.source not in ("pseudo", "halton"):
            raise ValueError(f"unknown sampling source {self.source!r}")

    @property
    def key(self) -> tuple:
        return (self.run_id, self.level, self.index)

    @property
    def priority(self) -> int:
        return self.level

    def inputs(self) -> RandomInput:
        if self.source == "halton":
            return halton(self.index)
        lev = self.level if self.xi_level is None else self.xi_level
        return draw_uniform(self.seed, lev, self.index)

    def to_dict(self):
        return asdict(self)


@dataclass
class SampleRecord:
    job: Job
    xi: RandomInput
    status: str
    fine: SolveOutput | None = None
    coarse: SolveOutput | None = None
    error: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def cost(self) -> float:
        return sum(o.wall_time for o in (self.fine, self.coarse) if o is not None)

    def to_dict(self):
        return {"job": self.job.to_dict(), "xi": self.xi.to_dict(), "status": self.status,
                "fine": None if self.fine is None else self.fine.to_dict(),
                "coarse": None if self.coarse is None else self.coarse.to_dict(),
                "error": self.error, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d):
        return cls(Job(**d["job"]), RandomInput.from_dict(d["xi"]), d["status"],
                   None if d["fine"] is None else SolveOutput.from_dict(d["fine"]),
                   None if d["coarse"] is None else SolveOutput.from_dict(d["coarse"]),
                   d.get("error", ""), d.get("diagnostics", {}))


class SampleStore:
    """``samples/<run_id>/L<l>_<index>.json`` records plus an append-only index CSV."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, job: Job) -> Path:
        return self.root / "samples" / job.run_id / f"L{job.level}_{job.index:07d}.json"

    @property
    def index_path(self) -> Path:
        return self.root / "samples" / "index.csv"

    def has_ok(self, job: Job) -> bool:
        p = self.path(job)
        if not p.exists():
            return False
        try:
            d = io.read_json(p)
        except ValueError:
            return False
        return d["status"] == "ok" and Job(**d["job"]) == job

    def save(self, rec: SampleRecord):
        p = self.path(rec.job)
        io.write_json(p, rec.to_dict(), indent=None)
        io.append_csv_row(self.index_path, INDEX_HEADER,
                          [rec.job.run_id, rec.job.level, rec.job.index, rec.job.kind,
                           rec.status, *rec.xi.to_dict()["xi"], rec.cost,
                           str(p.relative_to(self.root))])

    def load(self, job: Job) -> SampleRecord:
        return SampleRecord.from_dict(io.read_json(self.path(job)))

    def load_run(self, run_id: str) -> list[SampleRecord]:
        d = self.root / "samples" / run_id
        recs = [SampleRecord.from_dict(io.read_json(p)) for p in sorted(d.glob("L*_*.json"))]
        return sorted(recs, key=lambda r: (r.job.level, r.job.index))


def plan_jobs(m, run_id: str, seed: int, store: SampleStore | None = None,
              source: str = "pseudo", shared_level: int | None = None,
              keep_field: bool = False, single_level: bool = False) -> list[Job]:
    """``m[l]`` jobs on each level, highest level first; persisted ok records are skipped.

    ``shared_level`` draws xi from one stream for every level (shared-sample
    diagnostic mode); ``single_level`` makes every job an uncoupled solve.
    """
    jobs = []
    for level in sorted(range(len(m)), reverse=True):
        kind = "single" if (level == 0 or single_level) else "coupled"
        for i in range(int(m[level])):
            job = Job(run_id, level, i, int(seed), kind, source, shared_level, keep_field)
            if store is not None and store.has_ok(job):
                continue
            jobs.append(job)
    return jobs


def execute(job: Job, config: SolverConfig, params: HenryParameters, cache_dir) -> SampleRecord:
    """Run one job in the current process; failures are captured, never raised."""
    xi = job.inputs()
    try:
        fine = solve_qois(job.level, xi, config, params, cache_dir, job.keep_field)
        coarse = None
        if job.kind == "coupled":
            coarse = solve_qois(job.level - 1, xi, config, params, cache_dir, False)
        return SampleRecord(job, xi, "ok", fine, coarse)
    except SolverFailure as exc:
        return SampleRecord(job, xi, "failed", error=str(exc),
                            diagnostics=io._jsonable(exc.diagnostics))
    except Exception as exc:  # noqa: BLE001 - isolate any worker error
        return SampleRecord(job, xi, "failed", error=f"{type(exc).__name__}: {exc}",
                            diagnostics={"traceback": traceback.format_exc()})


def _execute_packed(args):
    return execute(*args)


def run(jobs: list[Job], store: SampleStore, workers: int = 1,
        config: SolverConfig = SolverConfig(), params: HenryParameters = DEFAULT_PARAMS,
        cache_dir=None, stop_after: int | None = None) -> list[SampleRecord]:
    """Execute jobs, persisting each record before it is reported.

    Returns the new records sorted by ``(level, index)``.  ``stop_after``
    simulates an interruption after that many records were persisted.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    jobs = sorted(jobs, key=lambda j: (-j.priority, j.index))
    if len({j.key for j in jobs}) != len(jobs):
        raise ValueError("duplicate (run_id, level, index) jobs")
    done: list[SampleRecord] = []

    def finish(rec):
        store.save(rec)
        done.append(rec)
        if rec.status != "ok":
            log.warning("job %s failed: %s", rec.job.key, rec.error)
        if stop_after is not None and len(done) >= stop_after:
            raise Interrupted(f"stopped after {len(done)} records")

    if workers == 1 or len(jobs) <= 1:
        for job in jobs:
            finish(execute(job, config, params, cache_dir))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_execute_packed, (job, config, params, cache_dir)): job
                    for job in jobs}
            try:
                for fut in as_completed(futs):
                    job = futs[fut]
                    try:
                        rec = fut.result()
                    except Exception as exc:  # noqa: BLE001 - e.g. a crashed worker process
                        rec = SampleRecord(job, job.inputs(), "failed",
                                           error=f"worker crashed: {exc}")
                    finish(rec)
            except Interrupted:
                for f in futs:
                    f.cancel()
                raise
    return sorted(done, key=lambda r: (r.job.level, r.job.index))


# ---------------------------------------------------------------- reduction

def level_statistics(records: list[SampleRecord], qoi: str, level: int) -> LevelStats:
    """Ordered reduction of the ok records of one level onto the level-0 output times."""
    recs = sorted((r for r in records if r.job.level == level), key=lambda r: r.job.index)
    ok = [r for r in recs if r.ok]
    times = build_time_grid(0, 0).times

    def pairs():
        for r in ok:
            fine = r.fine.aligned(qoi, 0)
            coarse = r.coarse.aligned(qoi, 0) if r.coarse is not None else None
            if level > 0 and coarse is None:
                raise ValueError(f"record {r.job.key} is not coupled")
            yield fine, coarse

    st = accumulate_level(level, times, pairs(), [r.cost for r in ok])
    st.n_failed = len(recs) - len(ok)
    return st


def all_level_statistics(records, qoi: str) -> list[LevelStats]:
    levels = sorted({r.job.level for r in records if r.ok})
    return [level_statistics(records, qoi, lev) for lev in levels]


STATS_HEADER = ["level", "t", "mean_diff", "V", "m", "mean_fine", "var_fine"]
COST_HEADER = ["level", "m", "s", "n_failed"]


def write_level_stats(path, stats: list[LevelStats]):
    """Deterministic statistics table (no wall times, so it is reproducible bytewise)."""
    rows = []
    for st in stats:
        for k, t in enumerate(st.times):
            rows.append([st.level, float(t), float(st.mean_diff[k]), float(st.V[k]), st.m,
                         float(st.mean_fine[k]), float(st.var_fine[k])])
    io.write_csv(path, STATS_HEADER, rows)


def write_level_costs(path, stats: list[LevelStats]):
    io.write_csv(path, COST_HEADER, [[st.level, st.m, float(st.s), st.n_failed] for st in stats])


def read_level_stats(stats_path, costs_path=None) -> list[LevelStats]:
    header, rows = io.read_csv(stats_path)
    col = {h: i for i, h in enumerate(header)}
    by_level: dict[int, list] = {}
    for r in rows:
        by_level.setdefault(int(r[col["level"]]), []).append(r)
    costs = {}
    if costs_path is not None and Path(costs_path).exists():
        ch, crows = io.read_csv(costs_path)
        cc = {h: i for i, h in enumerate(ch)}
        costs = {int(r[cc["level"]]): (float(r[cc["s"]]), int(r[cc["n_failed"]])) for r in crows}
    out = []
    for lev in sorted(by_level):
        rs = by_level[lev]
        arr = lambda name: np.array([float(r[col[name]]) for r in rs])  # noqa: E731
        s, nf = costs.get(lev, (float("nan"), 0))
        out.append(LevelStats(lev, int(rs[0][col["m"]]), arr("t"), arr("mean_diff"), arr("V"),
                              arr("mean_fine"), arr("var_fine"), s, nf))
    return out
