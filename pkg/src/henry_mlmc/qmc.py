"""Single-level sampling study: mean/variance fields, point statistics and quantile fans."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .executor import Job, SampleStore, run
from .grids import build_grid
from .inputs import DEFAULT_PARAMS
from .mlmc import MlmcError, ShiftedAccumulator
from .qoi import QOI_NAMES
from .solver.flow import SolverConfig

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
POINT_NAMES = [f"P_{i}" for i in range(1, 16)]


@dataclass
class QmcStudy:
    level: int
    n: int
    n_failed: int
    times: np.ndarray
    mean_field: np.ndarray
    var_field: np.ndarray
    point_mean: np.ndarray        # (r, 15)
    point_var: np.ndarray
    quantiles: dict               # name -> (len(QUANTILES), r)
    qoi_mean: dict
    qoi_var: dict


def field_statistics(fields) -> tuple[np.ndarray, np.ndarray]:
    """Streaming pointwise mean and unbiased variance of equally shaped arrays."""
    acc = ShiftedAccumulator()
    for f in fields:
        acc.add(f)
    if acc.n < 2:
        raise MlmcError("variance unavailable with fewer than two samples")
    return acc.mean, acc.variance


def quantile_fan(samples, qs=QUANTILES) -> np.ndarray:
    """Empirical quantiles over axis 0 by linear interpolation of order statistics."""
    samples = np.asarray(samples, dtype=float)
    return np.quantile(samples, qs, axis=0, method="linear")


def qmc_study(n: int, level: int, store: SampleStore, qois=("Q_FW", "Q_S"),
              source: str = "halton", seed: int = 0, workers: int = 1,
              config: SolverConfig = SolverConfig(), params=DEFAULT_PARAMS, cache_dir=None,
              run_id: str | None = None) -> QmcStudy:
    """Run ``n`` single-level samples (Halton indices 1..n, or pseudo-random 0..n-1)."""
    if n < 2:
        raise MlmcError("a sampling study needs n >= 2 (variance unavailable otherwise)")
    run_id = run_id or f"qmc_{source}_L{level}"
    first = 1 if source == "halton" else 0
    jobs = [Job(run_id, level, i, int(seed), "single", source, keep_field=True)
            for i in range(first, first + n)]
    todo = [j for j in jobs if not store.has_ok(j)]
    run(todo, store, workers, config, params, cache_dir)
    recs = [store.load(j) for j in jobs]
    ok = [r for r in recs if r.ok]
    if len(ok) < 2:
        raise MlmcError("fewer than two successful samples")
    grid = build_grid(level, level)
    mean_f, var_f = field_statistics(r.fine.final_c for r in ok)
    assert mean_f.size == grid.n_vertices
    pcols = [QOI_NAMES.index(p) for p in POINT_NAMES]
    pm, pv = field_statistics(r.fine.values[:, pcols] for r in ok)
    quant, qmean, qvar = {}, {}, {}
    for name in qois:
        series = np.array([r.fine.series(name) for r in ok])
        quant[name] = quantile_fan(series)
        qmean[name], qvar[name] = field_statistics(series)
    return QmcStudy(level, len(ok), len(recs) - len(ok), ok[0].fine.times, mean_f, var_f,
                    pm, pv, quant, qmean, qvar)
