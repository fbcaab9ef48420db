"""Paired t-tests and mean ± std comparison tables.

The Student-t tail probability is computed from the regularized incomplete
beta function, evaluated with a modified-Lentz continued fraction. Nothing
here depends on a statistics library.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DegenerateInputError, InvariantError

SIGNIFICANCE_LEVEL = 0.05

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz's method."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float, one_minus_x: float | None = None) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1.

    ``one_minus_x`` may be supplied when ``1 - x`` is known more accurately
    than the subtraction would give.
    """
    if a <= 0 or b <= 0:
        raise ValueError(f"shape parameters must be positive, got a={a}, b={b}")
    y = 1.0 - x if one_minus_x is None else one_minus_x
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if y == 0.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(y)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= |t|) for a Student-t variable with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {dof}")
    if math.isnan(t):
        raise ValueError("t statistic is NaN")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    denom = dof + t2
    # two-sided tail = I_{dof/(dof+t^2)}(dof/2, 1/2)
    p = regularized_incomplete_beta(dof / 2.0, 0.5, dof / denom, t2 / denom)
    return min(1.0, max(0.0, p))


def student_t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * student_t_two_sided_p(t, dof)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class PairedSample:
    condition_a: tuple[float, ...]
    condition_b: tuple[float, ...]
    metric_name: str = ""

    def __post_init__(self) -> None:
        a = tuple(float(v) for v in self.condition_a)
        b = tuple(float(v) for v in self.condition_b)
        if len(a) != len(b):
            raise InvariantError(f"paired samples differ in length: {len(a)} vs {len(b)}")
        if len(a) < 2:
            raise InvariantError(f"a paired t-test needs at least 2 pairs, got {len(a)}")
        if not all(math.isfinite(v) for v in a + b):
            raise InvariantError("paired samples must be finite")
        object.__setattr__(self, "condition_a", a)
        object.__setattr__(self, "condition_b", b)


@dataclass(frozen=True)
class TestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float

    __test__ = False  # not a pytest class

    @property
    def significant(self) -> bool:
        return is_significant(self.p_value)


def is_significant(p: float) -> bool:
    return p < SIGNIFICANCE_LEVEL


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    ss = math.fsum((v - mean) ** 2 for v in values)
    return mean, math.sqrt(ss / (n - 1))


def paired_t_test(s: PairedSample) -> TestResult:
    """Two-sided paired t-test of condition_a against condition_b."""
    diffs = [a - b for a, b in zip(s.condition_a, s.condition_b)]
    n = len(diffs)
    dof = n - 1
    mean, sd = _mean_sd(diffs)
    if sd == 0.0:
        if mean == 0.0:
            return TestResult(0.0, dof, 1.0)
        raise DegenerateInputError(
            f"degenerate variance in '{s.metric_name}': all paired differences equal {mean}, t is undefined"
        )
    t = mean / (sd / math.sqrt(n))
    return TestResult(t, dof, student_t_two_sided_p(t, dof))


def summarize(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator; 0 for one value)."""
    vals = [float(v) for v in values]
    if not vals:
        raise InvariantError("cannot summarize an empty list")
    return _mean_sd(vals)


# ---------------------------------------------------------------------------
# comparison tables

@dataclass(frozen=True)
class MetricSpec:
    key: str
    label: str
    unit: str
    scale: float


METRICS = (
    MetricSpec("dice", "Dice", "%", 100.0),
    MetricSpec("sensitivity", "Sensitivity", "%", 100.0),
    MetricSpec("specificity", "Specificity", "%", 100.0),
    MetricSpec("hausdorff_mm", "Hausdorff", "mm", 1.0),
    MetricSpec("mean_surface_dist_mm", "Mean", "mm", 1.0),
)
_METRIC_BY_KEY = {m.key: m for m in METRICS}


@dataclass(frozen=True)
class ComparisonRow:
    """One (dataset, metric) cell pair, already in display units."""

    dataset: str
    metric: str
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    p_value: float

    def __post_init__(self) -> None:
        if self.std_a < 0 or self.std_b < 0:
            raise InvariantError("standard deviations must be nonnegative")
        if not 0.0 <= self.p_value <= 1.0:
            raise InvariantError(f"p-value must lie in [0, 1], got {self.p_value}")

    @property
    def significant(self) -> bool:
        return is_significant(self.p_value)


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...] = ()
    label_a: str = "Gold"
    label_b: str = "Silver"
    metrics: tuple[MetricSpec, ...] = field(default=METRICS)

    def datasets(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.dataset not in seen:
                seen.append(r.dataset)
        return seen

    def row(self, dataset: str, metric: str) -> ComparisonRow | None:
        for r in self.rows:
            if r.dataset == dataset and r.metric == metric:
                return r
        return None


def compare_metric(dataset: str, metric: str, a: Sequence[float], b: Sequence[float]) -> ComparisonRow:
    """Summarize and t-test one metric; fractions are scaled to display units."""
    scale = _METRIC_BY_KEY[metric].scale if metric in _METRIC_BY_KEY else 1.0
    sa = [v * scale for v in a]
    sb = [v * scale for v in b]
    mean_a, std_a = summarize(sa)
    mean_b, std_b = summarize(sb)
    result = paired_t_test(PairedSample(tuple(a), tuple(b), metric))
    return ComparisonRow(dataset, metric, mean_a, std_a, mean_b, std_b, result.p_value)


def build_table(
    datasets: dict[str, tuple[dict[str, Sequence[float]], dict[str, Sequence[float]]]],
    label_a: str = "Gold",
    label_b: str = "Silver",
) -> ComparisonTable:
    """``datasets`` maps a dataset name to (metric -> values) for both conditions."""
    rows = []
    for name, (a, b) in datasets.items():
        for m in METRICS:
            rows.append(compare_metric(name, m.key, a[m.key], b[m.key]))
    return ComparisonTable(tuple(rows), label_a, label_b)


def format_value(x: float) -> str:
    return f"{x:.3f}"


def format_p(p: float) -> str:
    """Three decimals, switching to scientific notation below 0.001."""
    if p == 0.0 or p >= 0.001:
        return f"{p:.3f}"
    return f"{p:.3e}".replace("e-0", "e-")


def _cell(mean: float, std: float) -> str:
    return f"{format_value(mean)} ± {format_value(std)}"


def _header_labels(t: ComparisonTable) -> list[str]:
    return [f"{m.label} ({m.unit})" for m in t.metrics]


def _render_markdown(t: ComparisonTable) -> str:
    cols = ["Training Masks", *_header_labels(t)]
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    blank = [""] * len(t.metrics)
    for ds in t.datasets():
        rows = [t.row(ds, m.key) for m in t.metrics]
        lines.append("| " + " | ".join([f"**{ds}**", *blank]) + " |")
        a_cells, p_cells, b_cells = [], [], []
        for r in rows:
            if r is None:
                a_cells.append("")
                p_cells.append("")
                b_cells.append("")
                continue
            a_cells.append(_cell(r.mean_a, r.std_a))
            b_cells.append(_cell(r.mean_b, r.std_b))
            ptxt = format_p(r.p_value)
            p_cells.append(f"**{ptxt}**" if r.significant else ptxt)
        lines.append("| " + " | ".join([f"**{t.label_a}**", *a_cells]) + " |")
        lines.append("| " + " | ".join(["*p-value*", *p_cells]) + " |")
        lines.append("| " + " | ".join([f"**{t.label_b}**", *b_cells]) + " |")
    return "\n".join(lines) + "\n"


def _latex_escape(s: str) -> str:
    out = s
    for ch in ("\\", "&", "%", "$", "#", "_", "{", "}"):
        out = out.replace(ch, "\\" + ch if ch != "\\" else r"\textbackslash{}")
    return out


def _render_latex(t: ComparisonTable) -> str:
    n = len(t.metrics)
    labels = [f"\\textbf{{{_latex_escape(m.label)}}} ({_latex_escape(m.unit)})" for m in t.metrics]
    lines = [
        "\\begin{tabular}{c" + "c" * n + "}",
        "\\toprule",
        f"\\multirow{{2}}{{*}}{{\\textbf{{Training Masks}}}} & \\multicolumn{{{n}}}{{c}}{{\\textbf{{Metrics}}}}\\\\",
        f"\\cmidrule{{2-{n + 1}}}",
        " & " + " & ".join(labels) + " \\\\",
    ]
    for ds in t.datasets():
        rows = [t.row(ds, m.key) for m in t.metrics]
        lines.append("\\midrule")
        lines.append(f"\\multicolumn{{{n + 1}}}{{c}}{{\\textbf{{{_latex_escape(ds)}}}}}\\\\")
        lines.append("\\midrule")
        a_cells, p_cells, b_cells = [], [], []
        for r in rows:
            if r is None:
                a_cells.append("")
                p_cells.append("")
                b_cells.append("")
                continue
            a_cells.append(f"$ {format_value(r.mean_a)} \\pm {format_value(r.std_a)} $")
            b_cells.append(f"$ {format_value(r.mean_b)} \\pm {format_value(r.std_b)} $")
            ptxt = format_p(r.p_value)
            p_cells.append(f"$\\boldsymbol{{{ptxt}}}$" if r.significant else f"${ptxt}$")
        lines.append(f"\\textbf{{{_latex_escape(t.label_a)}}} & " + " & ".join(a_cells) + " \\\\")
        lines.append("\\textit{p-value} & " + " & ".join(p_cells) + " \\\\")
        lines.append(f"\\textbf{{{_latex_escape(t.label_b)}}} & " + " & ".join(b_cells) + " \\\\")
    lines.append("\\bottomrule")
    lines.append("\\end{tabular}")
    return "\n".join(lines) + "\n"


CSV_FIELDS = ("dataset", "metric", "unit", "mean_a", "std_a", "mean_b", "std_b", "p_value", "significant")


def _render_csv(t: ComparisonTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in t.rows:
        unit = _METRIC_BY_KEY[r.metric].unit if r.metric in _METRIC_BY_KEY else ""
        writer.writerow(
            [
                r.dataset,
                r.metric,
                unit,
                format_value(r.mean_a),
                format_value(r.std_a),
                format_value(r.mean_b),
                format_value(r.std_b),
                format_p(r.p_value),
                "*" if r.significant else "",
            ]
        )
    return buf.getvalue()


RENDERERS = {"markdown": _render_markdown, "csv": _render_csv, "latex": _render_latex}


def render_table(t: ComparisonTable, format: str = "markdown") -> str:
    try:
        renderer = RENDERERS[format]
    except KeyError:
        raise InvariantError(f"unknown table format '{format}'; choose from {sorted(RENDERERS)}") from None
    return renderer(t)
