import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henry_mlmc import io
from henry_mlmc.cli import main
from henry_mlmc.executor import SampleStore
from henry_mlmc.grids import build_grid
from henry_mlmc.mlmc import MlmcError
from henry_mlmc.qmc import QUANTILES, field_statistics, qmc_study, quantile_fan


def _order_statistic_quantile(x, q):
    """Linear interpolation between order statistics at position q (n - 1)."""
    s = sorted(x)
    pos = q * (len(s) - 1)
    k = int(np.floor(pos))
    if k + 1 >= len(s):
        return s[-1]
    return s[k] + (pos - k) * (s[k + 1] - s[k])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_quantile_fan_matches_order_statistics(xs):
    fan = quantile_fan(np.array(xs)[:, None])
    for j, q in enumerate(QUANTILES):
        assert fan[j, 0] == pytest.approx(_order_statistic_quantile(xs, q), rel=1e-12, abs=1e-9)
    assert np.all(np.diff(fan[:, 0]) >= 0.0)


def test_field_statistics():
    rng = np.random.default_rng(0)
    f = rng.random((10, 7))
    m, v = field_statistics(iter(f))
    assert np.allclose(m, f.mean(axis=0), rtol=1e-14)
    assert np.allclose(v, f.var(axis=0, ddof=1), rtol=1e-12)
    with pytest.raises(MlmcError):
        field_statistics([f[0]])


def test_study_needs_two_samples(tmp_path):
    with pytest.raises(MlmcError):
        qmc_study(1, 0, SampleStore(tmp_path))


def test_level0_halton_study_via_cli(tmp_path, capsys):
    code = main(["qmc", "--level", "0", "--n", "8", "--sampling", "halton",
                 "--out", str(tmp_path), "--workers", "1"])
    assert code == 0
    d = tmp_path / "qmc_L0"
    fields = io.read_vtk_scalars(d / "mean_var.vtk")
    assert fields["c_mean"].min() >= -1e-10 and fields["c_mean"].max() <= 1.0 + 1e-10
    assert fields["c_var"].min() >= 0.0
    header, rows = io.read_csv(d / "quantiles.csv")
    assert header[:2] == ["qoi", "t"] and len(rows) == 2 * 94
    for r in rows:
        q = [float(v) for v in r[2:]]
        assert q == sorted(q)
    fw = [float(v) for r in rows if r[0] == "Q_FW" for v in r[2:]]
    assert 0.0 <= min(fw) and max(fw) <= 2.0
    assert len(io.read_csv(d / "points.csv")[1]) == 15 * 94
    assert (d / "quantiles_Q_S.svg").exists()


@pytest.mark.slow
def test_level1_variance_peaks_in_the_mixing_zone(tmp_path, solve_cache):
    study = qmc_study(16, 1, SampleStore(tmp_path), cache_dir=solve_cache)
    g = build_grid(1)
    assert study.n == 16 and study.n_failed == 0
    v = int(np.argmax(study.var_field))
    # the largest spread sits where the mean is neither fresh nor brine
    assert 0.05 < study.mean_field[v] < 0.95
    for b in ("left", "right"):
        assert study.var_field[g.boundary[b]].max() <= 1e-20
