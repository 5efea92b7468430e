"""Precision/recall/F1, Wilson intervals, compression, cost and stability summaries.

Everything here is a pure fold over run reports (plain dicts as written by the
evaluation runner), so a report directory can be re-scored without rerunning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist, mean, median, stdev
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..errors import EmptyTotal
from ..model import Phase

PHASES = (Phase.INITIAL_ACCESS, Phase.EXECUTION, Phase.POST_COMPROMISE)
VARIANTS = ("full", "baseline")


def _z(confidence: float) -> float:
    return NormalDist().inv_cdf(0.5 + confidence / 2.0)


def wilson_ci(successes: int, total: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, as fractions in [0, 1]."""
    if total <= 0:
        raise EmptyTotal("wilson_ci needs total > 0")
    if not 0 <= successes <= total:
        raise ValueError(f"successes {successes} outside [0, {total}]")
    z = _z(confidence)
    p = successes / total
    denom = 1.0 + z * z / total
    centre = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    low = 0.0 if successes == 0 else max(0.0, centre - half)
    high = 1.0 if successes == total else min(1.0, centre + half)
    return low, high


def macro_precision_ci(pairs: Sequence[tuple[int, int]], confidence: float = 0.95) -> tuple[float, float, float]:
    """Unweighted mean of per-group precisions with a normal-approximation interval.

    The variance of the mean is ``sum(p_i (1 - p_i) / n_i) / k**2``.
    Returns ``(mean, low, high)``.
    """
    if not pairs or any(n <= 0 for _, n in pairs):
        raise EmptyTotal("macro_precision_ci needs non-empty groups")
    ps = [s / n for s, n in pairs]
    k = len(ps)
    m = sum(ps) / k
    se = math.sqrt(sum(p * (1 - p) / n for p, (_, n) in zip(ps, pairs))) / k
    z = _z(confidence)
    return m, max(0.0, m - z * se), min(1.0, m + z * se)


def pct(x: float | None, digits: int = 1) -> str:
    return "--" if x is None else f"{100 * x:.{digits}f}%"


# ---------------------------------------------------------------------------
# counts to scores


@dataclass(frozen=True)
class PRF:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float | None:
        """Undefined (None) when nothing was emitted."""
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def f1(self) -> float | None:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else None

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _defined(values: Iterable[float | None]) -> list[float]:
    return [v for v in values if v is not None]


def mean_std(values: Sequence[float | None]) -> dict[str, float | None]:
    """Sample mean and standard deviation; std is 0 for a single value."""
    vals = _defined(values)
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": mean(vals), "std": stdev(vals) if len(vals) > 1 else 0.0, "n": len(vals)}


def percentiles(values: Sequence[float], qs: Sequence[int] = (50, 75, 95)) -> dict[str, float | None]:
    if not values:
        return {f"p{q}": None for q in qs}
    arr = np.asarray(values, dtype=float)
    return {f"p{q}": float(np.percentile(arr, q)) for q in qs}


def compression_ratio(raw: int, post: int) -> float:
    return 1.0 if raw == 0 else raw / max(post, 1)


# ---------------------------------------------------------------------------
# report folding


def _phase_scores(counts: Mapping[Phase, PRF]) -> dict[str, Any]:
    phases = {p: counts[p] for p in PHASES if p in counts}
    pooled = sum(phases.values(), PRF(0, 0, 0))
    out: dict[str, Any] = {
        p.value: {"precision": c.precision, "recall": c.recall, "f1": c.f1, "tp": c.tp, "fp": c.fp, "fn": c.fn}
        for p, c in phases.items()
    }

    def macro(attr: str) -> float | None:
        vals = _defined(getattr(c, attr) for c in phases.values())
        return sum(vals) / len(vals) if vals else None

    out["macro"] = {"precision": macro("precision"), "recall": macro("recall"), "f1": macro("f1")}
    out["micro"] = {
        "precision": pooled.precision, "recall": pooled.recall, "f1": pooled.f1,
        "tp": pooled.tp, "fp": pooled.fp, "fn": pooled.fn,
    }
    return out


def recovery_table(reports: Sequence[Mapping[str, Any]], variant: str) -> dict[str, Any]:
    """Per-phase and macro/micro scores for one variant, mean and std over repeats."""
    runs = [r for r in reports if r["variant"] == variant and r["status"] == "ok"]
    repeats = sorted({r["repeat"] for r in runs})
    per_repeat = []
    for rep in repeats:
        counts: dict[Phase, PRF] = {}
        for r in runs:
            if r["repeat"] == rep:
                ph = Phase(r["phase"])
                counts[ph] = counts.get(ph, PRF(0, 0, 0)) + PRF(r["tp"], r["fp"], r["fn"])
        per_repeat.append(_phase_scores(counts))
    rows: dict[str, Any] = {}
    for key in [p.value for p in PHASES] + ["macro", "micro"]:
        present = [s[key] for s in per_repeat if key in s]
        if not present:
            continue
        row = {m: mean_std([s[m] for s in present]) for m in ("precision", "recall", "f1")}
        phase_runs = [r for r in runs if key in ("macro", "micro") or r["phase"] == key]
        row["removed_alerts"] = mean([r["removed_alerts"] for r in phase_runs]) if phase_runs else None
        row["visible_alerts"] = mean([r["visible_alerts"] for r in phase_runs]) if phase_runs else None
        if key == "macro" and per_repeat:
            # averages of the per-phase averages
            per_phase = [rows[p.value] for p in PHASES if p.value in rows]
            row["removed_alerts"] = mean([p["removed_alerts"] for p in per_phase])
            row["visible_alerts"] = mean([p["visible_alerts"] for p in per_phase])
        rows[key] = row
    return {"variant": variant, "repeats": len(repeats), "runs": len(runs), "rows": rows}


def precision_table(reports: Sequence[Mapping[str, Any]], variant: str = "full", confidence: float = 0.95) -> dict[str, Any]:
    """Pooled precision with Wilson intervals per phase and micro, delta-method interval for macro."""
    runs = [r for r in reports if r["variant"] == variant and r["status"] == "ok"]
    rows: dict[str, Any] = {}
    pairs = []
    for p in PHASES:
        tp = sum(r["tp"] for r in runs if r["phase"] == p.value)
        fp = sum(r["fp"] for r in runs if r["phase"] == p.value)
        rows[p.value] = _precision_row(tp, fp, confidence)
        if tp + fp:
            pairs.append((tp, tp + fp))
    tp = sum(r["tp"] for r in runs)
    fp = sum(r["fp"] for r in runs)
    rows["micro"] = _precision_row(tp, fp, confidence)
    if pairs:
        m, lo, hi = macro_precision_ci(pairs, confidence)
        rows["macro"] = {"tp": None, "fp": None, "precision": m, "ci": [lo, hi]}
    else:
        rows["macro"] = {"tp": None, "fp": None, "precision": None, "ci": None}
    return {"variant": variant, "confidence": confidence, "rows": rows}


def _precision_row(tp: int, fp: int, confidence: float) -> dict[str, Any]:
    if tp + fp == 0:
        return {"tp": tp, "fp": fp, "precision": None, "ci": None}
    lo, hi = wilson_ci(tp, tp + fp, confidence)
    return {"tp": tp, "fp": fp, "precision": tp / (tp + fp), "ci": [lo, hi]}


def operations_summary(reports: Sequence[Mapping[str, Any]], variant: str = "full") -> dict[str, Any]:
    runs = [r for r in reports if r["variant"] == variant]
    ok = [r for r in runs if r["status"] == "ok"]
    builds = [r["build"] for r in ok if r.get("build")]
    ratios = [compression_ratio(b["raw_row_count"], b["post_aggregation_row_count"]) for b in builds]
    raw = [b["raw_row_count"] for b in builds]
    post = [b["post_aggregation_row_count"] for b in builds]
    attempts = sum(r["usage"]["attempts"] for r in runs)
    invalid = sum(r["usage"]["invalid_attempts"] for r in runs)
    return {
        "variant": variant,
        "jobs": len(runs),
        "compression": {
            "median_ratio": median(ratios) if ratios else None,
            "mean_ratio": mean(ratios) if ratios else None,
            "ratio_of_medians": compression_ratio(int(median(raw)), int(median(post))) if builds else None,
            "median_raw_rows": median(raw) if raw else None,
            "median_post_rows": median(post) if post else None,
            "mean_raw_rows": mean(raw) if raw else None,
            "mean_post_rows": mean(post) if post else None,
            "median_tables_selected": median([b["tables_selected"] for b in builds]) if builds else None,
        },
        "cost_usd": percentiles([r["usage"]["total_cost_usd"] for r in runs]),
        "invalid_response_rate": invalid / attempts if attempts else 0.0,
        "job_failure_rate": (len(runs) - len(ok)) / len(runs) if runs else 0.0,
    }


def compute_metrics(reports: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
    """Fold run reports into the evaluation report."""
    if not reports:
        raise ValueError("compute_metrics needs at least one run report")
    ordered = sorted(reports, key=lambda r: (r["variant"], r["scenario_id"], r["phase"], r["repeat"]))
    variants = [v for v in VARIANTS if any(r["variant"] == v for r in ordered)]
    return {
        "runs": len(ordered),
        "variants": variants,
        "recovery": {v: recovery_table(ordered, v) for v in variants},
        "precision": {v: precision_table(ordered, v) for v in variants},
        "operations": {v: operations_summary(ordered, v) for v in variants},
    }


# ---------------------------------------------------------------------------
# rendering

_SHORT = {p.value: p.short for p in PHASES}


def _num(x: float | None, digits: int = 2) -> str:
    if x is None:
        return "--"
    s = f"{x:.{digits}f}"
    return s[1:] if s.startswith("0.") else s


def _pm(cell: Mapping[str, Any]) -> str:
    if cell["mean"] is None:
        return "--"
    return f"{_num(cell['mean'])}±{_num(cell['std'])}"


def _grid(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in rows])


def render_precision(table: Mapping[str, Any]) -> str:
    rows = []
    for key, r in table["rows"].items():
        label = _SHORT.get(key, key.capitalize())
        ci = "--" if r["ci"] is None else f"{100 * r['ci'][0]:.1f}--{100 * r['ci'][1]:.1f}%"
        rows.append([label, "--" if r["tp"] is None else r["tp"], "--" if r["fp"] is None else r["fp"], pct(r["precision"]), ci])
    title = f"Alert precision ({table['variant']})"
    return title + "\n" + _grid(["Phase", "#TP", "#FP", "Pr", "95% CI"], rows)


def render_recovery(metrics: Mapping[str, Any]) -> str:
    rec = metrics["recovery"]
    lead = "full" if "full" in rec else metrics["variants"][0]
    base = rec.get("baseline") if lead == "full" else None
    rows = []
    for key, r in rec[lead]["rows"].items():
        label = _SHORT.get(key, key.capitalize())
        cells = [label, _num(r["removed_alerts"], 1), _num(r["visible_alerts"], 1),
                 _num(r["precision"]["mean"]), _num(r["recall"]["mean"])]
        if base is not None and key in base["rows"]:
            b = base["rows"][key]["f1"]
            f = r["f1"]
            delta = None if b["mean"] is None or f["mean"] is None else f["mean"] - b["mean"]
            cells += [_pm(b), _pm(f), "--" if delta is None else f"{delta:+.2f}".replace("0.", ".")]
        else:
            cells += [_pm(r["f1"])]
        rows.append(cells)
    if base is not None:
        header = ["Phase", "A_rm", "A_vis", "Pr", "Re", "F1 baseline", "F1 full", "dF1"]
    else:
        header = ["Phase", "A_rm", "A_vis", "Pr", "Re", f"F1 {lead}"]
    return f"Held-out gap recovery ({rec[lead]['repeats']} repeat(s))\n" + _grid(header, rows)


def render_operations(ops: Mapping[str, Any]) -> str:
    c = ops["compression"]
    cost = ops["cost_usd"]
    money = lambda x: "--" if x is None else f"${x:.4f}"
    lines = [
        f"Operations ({ops['variant']}, {ops['jobs']} jobs)",
        f"  tables selected (median)   {_num(c['median_tables_selected'], 1)}",
        f"  raw rows median/mean       {_num(c['median_raw_rows'], 0)} / {_num(c['mean_raw_rows'], 0)}",
        f"  timeline rows median/mean  {_num(c['median_post_rows'], 0)} / {_num(c['mean_post_rows'], 0)}",
        f"  compression median/mean    {_num(c['median_ratio'], 2)}x / {_num(c['mean_ratio'], 2)}x",
        f"  cost p50/p75/p95           {money(cost['p50'])} / {money(cost['p75'])} / {money(cost['p95'])}",
        f"  invalid response rate      {pct(ops['invalid_response_rate'], 2)}",
        f"  job failure rate           {pct(ops['job_failure_rate'], 2)}",
    ]
    return "\n".join(lines)


def render_report(metrics: Mapping[str, Any]) -> str:
    parts = [render_precision(metrics["precision"][v]) for v in metrics["variants"]]
    parts.append(render_recovery(metrics))
    parts += [render_operations(metrics["operations"][v]) for v in metrics["variants"]]
    return "\n\n".join(parts) + "\n"
