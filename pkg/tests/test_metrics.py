from __future__ import annotations

import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threatgap.errors import EmptyTotal
from threatgap.evaluation.metrics import (
    PRF,
    compression_ratio,
    compute_metrics,
    macro_precision_ci,
    mean_std,
    percentiles,
    precision_table,
    recovery_table,
    render_report,
    wilson_ci,
)

Z = NormalDist().inv_cdf(0.975)


def wilson_by_roots(s: int, n: int) -> tuple[float, float]:
    """Endpoints solve (phat - p)^2 = z^2 p (1 - p) / n for p."""
    phat = s / n
    a = 1 + Z * Z / n
    b = -(2 * phat + Z * Z / n)
    c = phat * phat
    lo, hi = sorted(np.roots([a, b, c]).real)
    return max(lo, 0.0), min(hi, 1.0)


def shown(ci):
    return tuple(round(100 * x, 1) for x in ci)


# ---------------------------------------------------------------------------
# Wilson


def test_wilson_micro_row():
    assert shown(wilson_ci(871, 1088)) == (77.6, 82.3)
    assert round(100 * 871 / 1088, 1) == 80.1


def test_wilson_post_compromise_row():
    assert shown(wilson_ci(626, 773)) == (78.1, 83.6)


def test_wilson_zero_successes():
    lo, hi = wilson_ci(0, 10)
    assert lo == 0.0 and 0.0 < hi < 0.35


def test_wilson_all_successes():
    lo, hi = wilson_ci(10, 10)
    assert hi == 1.0 and 0.65 < lo < 1.0


def test_wilson_errors():
    with pytest.raises(EmptyTotal):
        wilson_ci(0, 0)
    with pytest.raises(ValueError):
        wilson_ci(5, 4)


@settings(max_examples=300, deadline=None)
@given(n=st.integers(1, 5000), frac=st.floats(0, 1))
def test_wilson_matches_quadratic_roots(n, frac):
    s = round(frac * n)
    lo, hi = wilson_ci(s, n)
    want_lo, want_hi = wilson_by_roots(s, n)
    assert lo == pytest.approx(want_lo, abs=1e-9)
    assert hi == pytest.approx(want_hi, abs=1e-9)
    assert lo <= s / n <= hi


def test_macro_interval_from_phase_precisions():
    m, lo, hi = macro_precision_ci([(86, 118), (159, 197), (626, 773)])
    assert round(100 * m, 1) == 78.2
    assert shown((lo, hi)) == (74.8, 81.6)
    with pytest.raises(EmptyTotal):
        macro_precision_ci([])


# ---------------------------------------------------------------------------
# scalar helpers


def test_mean_std_of_three_repeats():
    out = mean_std([0.76, 0.78, 0.80])
    assert out["mean"] == pytest.approx(0.78)
    assert out["std"] == pytest.approx(0.02)


def test_mean_std_edge_cases():
    assert mean_std([0.5]) == {"mean": 0.5, "std": 0.0, "n": 1}
    assert mean_std([None, None]) == {"mean": None, "std": None, "n": 0}
    assert mean_std([None, 0.4, 0.6])["n"] == 2


def test_compression_ratio_example():
    assert round(compression_ratio(3456, 887), 1) == 3.9
    assert compression_ratio(0, 0) == 1.0
    assert compression_ratio(10, 0) == 10.0


def test_cost_percentiles():
    assert percentiles([1.0, 2.04, 7.82])["p50"] == 2.04
    assert percentiles([]) == {"p50": None, "p75": None, "p95": None}


def test_prf_conventions():
    assert PRF(0, 0, 3).precision is None
    assert PRF(0, 0, 3).recall == 0.0
    assert PRF(0, 0, 0).f1 is None
    assert PRF(3, 1, 2).f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)


# ---------------------------------------------------------------------------
# folding run reports

PHASE_NAMES = ["InitialAccess", "Execution", "PostCompromise"]


def report(phase, repeat, tp, fp, fn, variant="full", scenario="s1", status="ok", cost=0.1, raw=100, post=50):
    return {
        "scenario_id": scenario, "phase": phase, "repeat": repeat, "variant": variant, "status": status,
        "tp": tp, "fp": fp, "fn": fn, "removed_alerts": 2, "visible_alerts": 5,
        "build": {"raw_row_count": raw, "post_aggregation_row_count": post, "tables_selected": 6},
        "usage": {"attempts": 10, "invalid_attempts": 1, "total_cost_usd": cost},
    }


def f1(tp, fp, fn):
    return 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None


def oracle_scores(reports):
    """Per-repeat macro and micro F1 recomputed from raw counts."""
    macro, micro = [], []
    for rep in sorted({r["repeat"] for r in reports}):
        rows = [r for r in reports if r["repeat"] == rep]
        per_phase = []
        for ph in PHASE_NAMES:
            sel = [r for r in rows if r["phase"] == ph]
            if sel:
                per_phase.append(f1(sum(r["tp"] for r in sel), sum(r["fp"] for r in sel), sum(r["fn"] for r in sel)))
        defined = [v for v in per_phase if v is not None]
        macro.append(sum(defined) / len(defined) if defined else None)
        micro.append(f1(sum(r["tp"] for r in rows), sum(r["fp"] for r in rows), sum(r["fn"] for r in rows)))
    return macro, micro


def sample_std(xs):
    xs = [x for x in xs if x is not None]
    if len(xs) < 2:
        return 0.0 if xs else None
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


counts = st.integers(0, 6)


@st.composite
def report_sets(draw):
    reps = draw(st.integers(1, 3))
    scenarios = draw(st.integers(1, 3))
    out = []
    for rep in range(1, reps + 1):
        for s in range(scenarios):
            for ph in PHASE_NAMES:
                out.append(report(ph, rep, draw(counts), draw(counts), draw(counts), scenario=f"s{s}"))
    return out


@settings(max_examples=150, deadline=None)
@given(reports=report_sets())
def test_macro_micro_match_independent_oracle(reports):
    rows = recovery_table(reports, "full")["rows"]
    macro, micro = oracle_scores(reports)
    for name, values in (("macro", macro), ("micro", micro)):
        cell = rows[name]["f1"]
        defined = [v for v in values if v is not None]
        if not defined:
            assert cell["mean"] is None
            continue
        assert cell["mean"] == pytest.approx(sum(defined) / len(defined))
        assert cell["std"] == pytest.approx(sample_std(values))


def test_macro_is_unweighted_phase_mean():
    reports = [report("InitialAccess", 1, 1, 0, 0), report("Execution", 1, 0, 0, 1),
               report("PostCompromise", 1, 9, 1, 0)]
    rows = recovery_table(reports, "full")["rows"]
    assert rows["macro"]["f1"]["mean"] == pytest.approx((1.0 + 0.0 + 18 / 19) / 3)
    assert rows["micro"]["f1"]["mean"] == pytest.approx(20 / 22)


def test_undefined_precision_is_excluded_from_macro():
    reports = [report("InitialAccess", 1, 0, 0, 2), report("Execution", 1, 1, 1, 0)]
    rows = recovery_table(reports, "full")["rows"]
    assert rows["InitialAccess"]["precision"]["mean"] is None
    assert rows["macro"]["precision"]["mean"] == 0.5
    assert rows["macro"]["recall"]["mean"] == 0.5


def test_failed_runs_are_excluded_from_scores_but_counted_as_failures():
    reports = [report("Execution", 1, 1, 0, 0), report("Execution", 1, 0, 0, 5, scenario="s2", status="failed")]
    m = compute_metrics(reports)
    assert m["recovery"]["full"]["rows"]["micro"]["f1"]["mean"] == 1.0
    assert m["operations"]["full"]["job_failure_rate"] == 0.5


def test_precision_table_pools_counts():
    reports = [report("InitialAccess", r, 3, 1, 0) for r in (1, 2)] + [report("Execution", 1, 0, 0, 1)]
    t = precision_table(reports)["rows"]
    assert (t["InitialAccess"]["tp"], t["InitialAccess"]["fp"]) == (6, 2)
    assert t["InitialAccess"]["ci"] == list(wilson_ci(6, 8))
    assert t["Execution"]["precision"] is None and t["Execution"]["ci"] is None
    assert t["micro"]["precision"] == 0.75
    assert t["macro"]["precision"] == 0.75


def test_operations_summary():
    reports = [report("Execution", 1, 1, 0, 0, scenario=f"s{i}", cost=c, raw=raw, post=post)
               for i, (c, raw, post) in enumerate([(1.0, 3456, 887), (2.04, 100, 50), (7.82, 900, 100)])]
    ops = compute_metrics(reports)["operations"]["full"]
    ratios = [3456 / 887, 2.0, 9.0]
    assert ops["compression"]["median_ratio"] == pytest.approx(3456 / 887)
    assert ops["compression"]["mean_ratio"] == pytest.approx(sum(ratios) / 3)
    # the median of ratios and the ratio of medians differ
    assert ops["compression"]["ratio_of_medians"] == pytest.approx(900 / 100)
    assert ops["cost_usd"]["p50"] == 2.04
    assert ops["invalid_response_rate"] == pytest.approx(0.1)
    assert ops["compression"]["median_tables_selected"] == 6


def test_compute_metrics_is_order_insensitive_and_renders():
    reports = [report(ph, r, r, 1, 0, variant=v) for ph in PHASE_NAMES for r in (1, 2) for v in ("full", "baseline")]
    a = compute_metrics(reports)
    b = compute_metrics(list(reversed(reports)))
    assert a == b
    assert a["variants"] == ["full", "baseline"]
    text = render_report(a)
    assert "95% CI" in text and "F1 baseline" in text and "Macro" in text
    with pytest.raises(ValueError):
        compute_metrics([])
