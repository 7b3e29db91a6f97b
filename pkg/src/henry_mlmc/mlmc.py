"""Multilevel Monte Carlo estimator: level statistics, rate fits, level count,
sample allocation, estimator assembly and MC/MLMC cost comparison.

Conventions used throughout:

* ``L`` returned by :func:`choose_num_levels` is the number of grid levels
  the estimator uses, so the finest level index is ``L - 1`` and
  ``L in {0, 1}`` is plain single-level Monte Carlo.
* Tolerances are relative: ``epsilon`` multiplies ``E0``, the time average of
  the absolute level-0 mean.
* Rates are fitted in log4 space on levels ``l >= 1`` of raw (unscaled)
  level-difference statistics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

log = logging.getLogger(__name__)

D_HAT = 3.0
DEFAULT_CALIBRATION_TIME = 640.0


class MlmcError(ValueError):
    pass


# ---------------------------------------------------------------- statistics

class ShiftedAccumulator:
    """Single-pass mean and unbiased variance per component, shifted by the first sample.

    Summing ``x - K`` and ``(x - K)**2`` with ``K`` the first sample avoids the
    cancellation of the naive formula when the spread is small compared to the
    mean; identical samples give a variance of exactly zero.
    """

    def __init__(self, shape=()):
        self.shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self.n = 0
        self.K = None
        self.S1 = None
        self.S2 = None

    def add(self, x):
        x = np.asarray(x, dtype=float)
        if self.K is None:
            self.K = x.copy()
            self.S1 = np.zeros_like(x)
            self.S2 = np.zeros_like(x)
        elif x.shape != self.K.shape:
            raise MlmcError(f"sample shape {x.shape} differs from {self.K.shape}")
        d = x - self.K
        self.S1 += d
        self.S2 += d * d
        self.n += 1

    @property
    def mean(self):
        if self.n == 0:
            raise MlmcError("no samples accumulated")
        return self.K + self.S1 / self.n

    @property
    def variance(self):
        """Unbiased variance; NaN (flagged unavailable) with fewer than two samples."""
        if self.n < 2:
            return np.full_like(self.K, np.nan) if self.K is not None else np.nan
        v = (self.S2 - self.S1 * self.S1 / self.n) / (self.n - 1)
        return np.maximum(v, 0.0)


@dataclass
class LevelStats:
    level: int
    m: int
    times: np.ndarray
    mean_diff: np.ndarray
    V: np.ndarray
    mean_fine: np.ndarray
    var_fine: np.ndarray
    s: float = float("nan")
    n_failed: int = 0

    @property
    def variance_available(self) -> bool:
        return self.m >= 2

    def at(self, t: float) -> tuple[float, float]:
        """(mean_diff, V) at output time ``t``."""
        k = np.flatnonzero(self.times == t)
        if k.size != 1:
            raise MlmcError(f"t = {t} is not an output time of level {self.level} statistics")
        return float(self.mean_diff[k[0]]), float(self.V[k[0]])


def accumulate_level(level: int, times, pairs, costs=()) -> LevelStats:
    """Statistics of ``g_l - g_{l-1}`` from an ordered stream of coupled pairs.

    ``pairs`` yields ``(fine, coarse)`` value arrays already aligned to
    ``times``; ``coarse`` is ``None`` on level 0 (``g_{-1} = 0``).
    """
    times = np.asarray(times, dtype=float)
    diff = ShiftedAccumulator()
    fine_acc = ShiftedAccumulator()
    for fine, coarse in pairs:
        fine = np.asarray(fine, dtype=float)
        if fine.shape != times.shape:
            raise MlmcError(f"fine series has shape {fine.shape}, expected {times.shape}")
        if (coarse is None) != (level == 0):
            raise MlmcError("level 0 takes no coarse partner; levels >= 1 require one")
        d = fine if coarse is None else fine - np.asarray(coarse, dtype=float)
        diff.add(d)
        fine_acc.add(fine)
    if diff.n == 0:
        raise MlmcError(f"no samples on level {level}")
    if diff.n < 2:
        log.warning("level %d has a single sample; variance unavailable", level)
    costs = np.asarray(list(costs), dtype=float)
    s = float(costs.mean()) if costs.size else float("nan")
    return LevelStats(level, diff.n, times, diff.mean, diff.variance, fine_acc.mean,
                      fine_acc.variance, s)


# ---------------------------------------------------------------- rates

@dataclass
class RateFit:
    alpha: float
    zeta1: float
    beta: float
    zeta2: float
    gamma: float
    cost_const: float
    d_hat: float = D_HAT
    residuals: dict = field(default_factory=dict)
    levels_used: dict = field(default_factory=dict)

    @property
    def c1(self) -> float:
        return 4.0 ** self.zeta1

    @property
    def c2(self) -> float:
        return 4.0 ** self.zeta2

    def to_dict(self):
        return asdict(self)


def _ols_log4(levels, values, what):
    levels = np.asarray(levels, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = (levels >= 1) & np.isfinite(values) & (values > 0)
    bad = (levels >= 1) & ~ok
    if np.any(bad):
        log.warning("%s: excluding levels %s with non-positive values", what,
                    levels[bad].astype(int).tolist())
    if ok.sum() < 2:
        raise MlmcError(f"{what}: need at least two levels >= 1 with positive values")
    x = levels[ok]
    y = np.log(values[ok]) / np.log(4.0)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return coef[0], coef[1], res, x.astype(int).tolist()


def fit_rates(levels, mean_diff, V, s=None, d_hat: float = D_HAT) -> RateFit:
    """Least-squares fits ``log4|E| = zeta1 - alpha l``, ``log4 V = zeta2 - beta l``
    and ``log4 s = const + d_hat gamma l`` over levels ``l >= 1``."""
    z1, a, r1, u1 = _ols_log4(levels, np.abs(np.asarray(mean_diff, dtype=float)), "weak fit")
    z2, b, r2, u2 = _ols_log4(levels, V, "strong fit")
    gamma, cconst, r3, u3 = float("nan"), float("nan"), np.array([]), []
    if s is not None:
        try:
            cconst, slope, r3, u3 = _ols_log4(levels, s, "cost fit")
            gamma = slope / d_hat
        except MlmcError as exc:
            log.warning("cost fit unavailable: %s", exc)
    return RateFit(float(-a), float(z1), float(-b), float(z2), float(gamma), float(cconst),
                   d_hat, {"weak": r1.tolist(), "strong": r2.tolist(), "cost": r3.tolist()},
                   {"weak": u1, "strong": u2, "cost": u3})


def fit_rates_from_stats(stats: list[LevelStats], t: float = DEFAULT_CALIBRATION_TIME,
                         d_hat: float = D_HAT) -> RateFit:
    stats = sorted(stats, key=lambda st: st.level)
    if len(stats) < 3:
        raise MlmcError("rate fitting needs pilot statistics on at least levels 0, 1, 2")
    levels = [st.level for st in stats]
    E = [st.at(t)[0] for st in stats]
    V = [st.at(t)[1] for st in stats]
    s = [st.s for st in stats]
    return fit_rates(levels, E, V, s, d_hat)


# ---------------------------------------------------------------- planning

@dataclass
class LevelChoice:
    L: int
    raw: float            # value before ceil and clamping
    bias_limited: bool    # requested accuracy needs more levels than available
    convention: str


def choose_num_levels(epsilon: float, alpha: float, zeta1: float, E0: float,
                      L_max: int = 3, tail_correction: bool = False) -> LevelChoice:
    """Number of levels from ``c1 4^{-alpha L} = epsilon E0 / sqrt(2)``.

    ``c1 = 4^zeta1`` treats the extrapolated next level difference as the bias
    proxy.  ``tail_correction`` divides ``c1`` by ``1 - 4^-alpha``, i.e. bounds
    the bias by the geometric sum of all differences from index ``L`` on.  The result is clamped to
    ``[0, L_max + 1]``.
    """
    if not (epsilon > 0 and E0 > 0 and alpha > 0):
        raise MlmcError("epsilon, E0 and alpha must be positive")
    c1 = 4.0 ** zeta1
    if tail_correction:
        c1 /= 1.0 - 4.0 ** -alpha
    raw = -math.log(epsilon * E0 / (math.sqrt(2.0) * c1), 4.0) / alpha
    L = max(0, math.ceil(raw))
    limited = L > L_max + 1
    if limited:
        log.warning("epsilon=%g needs %d levels but only %d are available; bias-limited",
                    epsilon, L, L_max + 1)
        L = L_max + 1
    conv = "next-difference bias proxy" + (" with geometric tail" if tail_correction else "")
    return LevelChoice(L, raw, limited, conv)


@dataclass
class Allocation:
    m: np.ndarray
    m_real: np.ndarray
    S: float             # predicted cost (2 eps^-2 / E0^2) (sum sqrt(V s))^2
    S_rounded: float     # sum m s
    variance: float      # sum V / m
    target: float        # eps^2 E0^2 / 2


def allocate_samples(epsilon: float, V, s, E0: float = 1.0) -> Allocation:
    """Variance-constrained cost-optimal sample counts.

    ``m_l = ceil((2 eps^-2 / E0^2) sqrt(V_l / s_l) sum_i sqrt(V_i s_i))``
    with at least one sample per level.
    """
    V = np.asarray(V, dtype=float)
    s = np.asarray(s, dtype=float)
    if V.shape != s.shape or V.ndim != 1 or V.size == 0:
        raise MlmcError("V and s must be 1-D arrays of equal, non-zero length")
    if np.any(V < 0) or np.any(s <= 0) or not (epsilon > 0 and E0 > 0):
        raise MlmcError("need V >= 0, s > 0, epsilon > 0 and E0 > 0")
    target = 0.5 * epsilon**2 * E0**2
    if np.all(V == 0):
        log.warning("all level variances are zero; allocating one sample per level")
        m = np.ones(V.size, dtype=np.int64)
        return Allocation(m, np.zeros(V.size), 0.0, float(m @ s), 0.0, target)
    k = 2.0 / (epsilon**2 * E0**2)
    root = np.sqrt(V * s)
    m_real = k * np.sqrt(V / s) * root.sum()
    S = k * root.sum() ** 2
    m = np.maximum(np.ceil(m_real), 1).astype(np.int64)
    # guard against the constraint being missed by a rounding ulp
    while np.sum(V / m) > target * (1.0 + 1e-12):
        m[np.argmax(V / m)] += 1
    return Allocation(m, m_real, float(S), float(m @ s), float(np.sum(V / m)), target)


def extrapolate_costs(s_measured, n_levels: int, d_hat: float = D_HAT, gamma: float = 1.0):
    """Costs for levels ``0..n_levels-1``: measured where given, else ``s_last 4^{d gamma (l - last)}``."""
    s_measured = [x for x in s_measured]
    out = []
    last = None
    for ell in range(n_levels):
        if ell < len(s_measured) and np.isfinite(s_measured[ell]) and s_measured[ell] > 0:
            out.append(float(s_measured[ell]))
            last = ell
        else:
            if last is None:
                raise MlmcError("no measured cost to extrapolate from")
            out.append(float(s_measured[last]) * 4.0 ** (d_hat * gamma * (ell - last)))
    return np.array(out)


def extrapolate_variances(V_measured, n_levels: int, rates: RateFit):
    """Variances for levels ``0..n_levels-1``: measured where available, else ``4^{zeta2 - beta l}``."""
    out = []
    for ell in range(n_levels):
        v = V_measured[ell] if ell < len(V_measured) else float("nan")
        out.append(float(v) if np.isfinite(v) else 4.0 ** (rates.zeta2 - rates.beta * ell))
    return np.array(out)


def time_average_E0(level0: LevelStats) -> float:
    """E0 = |time average of the level-0 sample mean|."""
    E0 = abs(float(np.mean(level0.mean_fine)))
    if not E0 > 0:
        raise MlmcError("E0 is zero; relative tolerances are undefined for this QoI")
    return E0


@dataclass
class MlmcPlan:
    epsilon: float
    E0: float
    L: int
    m: list
    m_real: list
    V: list
    s: list
    S: float
    S_MC: float
    regime: str
    bias_limited: bool
    qoi: str = ""
    calibration_time: float = DEFAULT_CALIBRATION_TIME
    rates: dict = field(default_factory=dict)
    level_convention: str = ""

    @property
    def n_levels(self) -> int:
        return max(self.L, 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_plan(epsilon: float, rates: RateFit, E0: float, V_measured, s_measured,
              V0: float | None = None, L_max: int = 3, qoi: str = "",
              calibration_time: float = DEFAULT_CALIBRATION_TIME,
              tail_correction: bool = False) -> MlmcPlan:
    """Level count, allocation and cost prediction from pilot data and fitted rates."""
    choice = choose_num_levels(epsilon, rates.alpha, rates.zeta1, E0, L_max, tail_correction)
    n = max(choice.L, 1)
    V = extrapolate_variances(V_measured, n, rates)
    gamma = rates.gamma if np.isfinite(rates.gamma) else 1.0
    s = extrapolate_costs(s_measured, n, rates.d_hat, gamma)
    alloc = allocate_samples(epsilon, V, s, E0)
    V0 = float(V_measured[0]) if V0 is None else float(V0)
    s_mc = extrapolate_costs(s_measured, choice.L + 1, rates.d_hat, gamma)[choice.L]
    S_MC = mc_cost(epsilon, s_mc, V0, E0)
    reg = regime(rates.alpha, rates.beta, gamma, rates.d_hat)
    return MlmcPlan(epsilon, E0, choice.L, alloc.m.tolist(), alloc.m_real.tolist(), V.tolist(),
                    s.tolist(), alloc.S, S_MC, reg["label"], choice.bias_limited, qoi,
                    calibration_time, rates.to_dict(), choice.convention)


# ---------------------------------------------------------------- estimator

@dataclass
class MlmcResult:
    times: np.ndarray
    Y: np.ndarray
    variance: np.ndarray
    cost: float
    levels: list          # per-level dicts: level, m, s, V summary
    regime: str = ""
    n_failed: int = 0

    def to_dict(self):
        return {"times": self.times.tolist(), "Y": self.Y.tolist(),
                "variance": self.variance.tolist(), "cost": self.cost,
                "levels": self.levels, "regime": self.regime, "n_failed": self.n_failed}


def estimate(stats: list[LevelStats], regime_label: str = "") -> MlmcResult:
    """Telescoping estimator ``Y(t) = sum_l mean_diff_l(t)`` on the level-0 time grid."""
    if not stats:
        raise MlmcError("no level statistics")
    stats = sorted(stats, key=lambda st: st.level)
    levels = [st.level for st in stats]
    if levels != list(range(len(stats))):
        raise MlmcError(f"levels must be 0..L without gaps, got {levels}")
    times = stats[0].times
    Y = np.zeros_like(times)
    var = np.zeros_like(times)
    cost = 0.0
    rows = []
    for st in stats:
        if not np.array_equal(st.times, times):
            raise MlmcError("level statistics are not aligned to a common time grid")
        Y = Y + st.mean_diff
        var = var + (st.V / st.m if st.m >= 2 else np.full_like(times, np.nan))
        if np.isfinite(st.s):
            cost += st.m * st.s
        rows.append({"level": st.level, "m": st.m, "s": st.s, "n_failed": st.n_failed})
    return MlmcResult(times, Y, var, cost, rows, regime_label,
                      sum(st.n_failed for st in stats))


# ---------------------------------------------------------------- complexity

def regime(alpha: float, beta: float, gamma: float = 1.0, d_hat: float = D_HAT) -> dict:
    """Cost-complexity regime of the MLMC theorem and the predicted exponents of 1/eps."""
    dg = d_hat * gamma
    if np.isclose(beta, dg):
        label, exp = "beta = d*gamma", 2.0
    elif beta > dg:
        label, exp = "beta > d*gamma", 2.0
    else:
        label, exp = "beta < d*gamma", 2.0 + (dg - beta) / alpha
    return {"label": label, "mlmc_exponent": exp, "mc_exponent": 2.0 + dg / alpha,
            "log_factor": label == "beta = d*gamma",
            "applicable": alpha >= 0.5 * min(beta, dg)}


def mc_cost(epsilon: float, s: float, V0: float, E0: float = 1.0) -> float:
    """Plain MC cost ``2 eps^-2 s Var[g_0] / E0^2`` at the cost ``s`` of one fine solve."""
    return 2.0 * s * V0 / (epsilon**2 * E0**2)


def compare_costs(epsilons, rates: RateFit, V, s, E0: float, V0: float | None = None,
                  L_max: int = 3, tail_correction: bool = False) -> list[dict]:
    """MC vs MLMC cost table over ``epsilons``; ``V``/``s`` may be shorter than needed."""
    V = list(V)
    s = list(s)
    rows = []
    for eps in epsilons:
        p = make_plan(eps, rates, E0, V, s, V0=V0, L_max=L_max, tail_correction=tail_correction)
        reg = regime(rates.alpha, rates.beta, rates.gamma if np.isfinite(rates.gamma) else 1.0,
                     rates.d_hat)
        m = p.m + [0] * (L_max + 1 - len(p.m))
        rows.append({"epsilon": eps, "L": p.L, "m": m, "S": p.S, "S_MC": p.S_MC,
                     "ratio": p.S_MC / p.S if p.S > 0 else float("inf"),
                     "regime": reg["label"], "mlmc_exponent": reg["mlmc_exponent"],
                     "mc_exponent": reg["mc_exponent"], "applicable": reg["applicable"],
                     "bias_limited": p.bias_limited})
    return rows
