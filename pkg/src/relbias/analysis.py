"""Statistical readout of a batch of transcripts.

Ambiguous trials are dropped whole before anything is counted: both
options of the trial lose that presentation.

Report files (UTF-8, comma separated, header row, fixed column order):

=========================  ====================================================
choice_rates.csv           condition, model, run, option, label, chosen,
                           presented, rate
choice_rate_summary.csv    option, label, mean, se, n_runs
contrast.csv               n, mean, sd, t, df, p, d, stars, degenerate
contrast_runs.csv          condition, model, run, contrast
diagnostic_pairs.csv       pair, h_label, l_label, k, n, proportion, z, p, stars
learning_curves.csv        context, low_label, high_label, repetition, accuracy,
                           se, n
final_accuracy.csv         n, mean, sd, t, df, p, d, stars, degenerate
exclusions.csv             condition, model, run, learning_ambiguous,
                           transfer_ambiguous, ratings_missing
long_format.csv            condition, model, run, option, rate
=========================  ====================================================
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import RunTranscript
from .stats import TTestResult, one_sample_t, proportion_z_test, stars
from .task import TaskSpec, build_task_spec

CONTRAST_COEFFICIENTS = np.array([0, -1 / 3, 1 / 3, -1 / 3, 1 / 3, -1 / 3, 1 / 3, 0])

# (locally optimal H option, higher-paying L option), by option index
DIAGNOSTIC_PAIRS = [(1, 2), (3, 4), (5, 6), (1, 4), (3, 6), (1, 6)]


class AnalysisError(ValueError):
    pass


def _se(values: np.ndarray) -> float:
    values = values[~np.isnan(values)]
    if len(values) < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


@dataclass
class ChoiceRateTable:
    runs: list
    chosen: np.ndarray
    presented: np.ndarray
    rates: np.ndarray
    labels: list
    undefined_runs: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.array([np.nanmean(c) if np.any(~np.isnan(c)) else np.nan for c in self.rates.T])

    @property
    def se(self) -> np.ndarray:
        return np.array([_se(c) for c in self.rates.T])

    @property
    def n_defined(self) -> np.ndarray:
        return np.sum(~np.isnan(self.rates), axis=0)


def _run_key(t: RunTranscript) -> tuple:
    return (t.config.condition.value, t.config.model_name, t.config.run_index)


def choice_rates(transcripts: Sequence[RunTranscript], fixed_denominator: bool = False) -> ChoiceRateTable:
    """Per-run transfer choice rates.

    ``fixed_denominator`` divides by the nominal number of presentations
    (7) instead of the valid ones, counting an ambiguous trial as a
    non-choice for both options.
    """
    if not transcripts:
        raise AnalysisError("no transcripts to analyse")
    n_opt = transcripts[0].instance.spec.n_options
    chosen = np.zeros((len(transcripts), n_opt), dtype=int)
    presented = np.zeros((len(transcripts), n_opt), dtype=int)
    for r, t in enumerate(transcripts):
        if not t.transfer:
            raise AnalysisError(f"run {t.config.run_index} has no transfer records")
        for rec in t.transfer:
            if rec.ambiguous:
                continue
            for o in rec.options:
                presented[r, o] += 1
            chosen[r, rec.chosen_option] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        if fixed_denominator:
            rates = chosen / float(n_opt - 1)
        else:
            rates = np.where(presented > 0, chosen / np.maximum(presented, 1), np.nan)
    undefined = [(_run_key(transcripts[r]), o) for r, o in zip(*np.nonzero(np.isnan(rates)))]
    return ChoiceRateTable(
        runs=[_run_key(t) for t in transcripts],
        chosen=chosen,
        presented=presented,
        rates=rates,
        labels=transcripts[0].instance.spec.labels,
        undefined_runs=undefined,
    )


@dataclass(frozen=True)
class ContrastResult:
    values: tuple
    test: TTestResult

    @property
    def mean(self) -> float:
        return self.test.mean

    @property
    def degenerate(self) -> bool:
        return self.test.degenerate

    @property
    def t(self) -> float:
        return self.test.t

    @property
    def p(self) -> float:
        return self.test.p

    @property
    def d(self) -> float:
        return self.test.d

    @property
    def df(self) -> int:
        return self.test.df

    @property
    def stars(self) -> str:
        return self.test.stars


def contrast_values(rates: np.ndarray) -> np.ndarray:
    """Per-run contrast; NaN where a weighted option has no defined rate."""
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    used = CONTRAST_COEFFICIENTS != 0
    out = rates[:, used] @ CONTRAST_COEFFICIENTS[used]
    return out


def linear_contrast(rates: np.ndarray) -> ContrastResult:
    """Mean L21/L27/L33 rate minus mean H18/H24/H30 rate, tested against 0.

    Positive values point to absolute valuation, negative to relative.
    """
    values = contrast_values(rates)
    values = values[~np.isnan(values)]
    if len(values) < 2:
        raise AnalysisError(f"contrast needs at least 2 runs with defined rates, got {len(values)}")
    return ContrastResult(tuple(float(v) for v in values), one_sample_t(values, 0.0))


@dataclass
class LearningCurve:
    accuracy: np.ndarray  # [context, repetition]
    se: np.ndarray
    n: np.ndarray
    correct: np.ndarray  # [run, context, repetition], NaN where excluded
    spec: TaskSpec

    def pooled(self, repetition: int) -> float:
        """Accuracy over all contexts and runs at a 1-based repetition."""
        cells = self.correct[:, :, repetition - 1]
        return float(np.nanmean(cells))

    def per_run(self, repetition: int) -> np.ndarray:
        """Each run's accuracy across contexts at a 1-based repetition."""
        cells = self.correct[:, :, repetition - 1]
        with np.errstate(invalid="ignore"):
            return np.nanmean(cells, axis=1)


def learning_curves(transcripts: Sequence[RunTranscript], repetitions: int = 5) -> LearningCurve:
    if not transcripts:
        raise AnalysisError("no transcripts to analyse")
    spec = transcripts[0].instance.spec
    n_ctx = spec.n_contexts
    correct = np.full((len(transcripts), n_ctx, repetitions), np.nan)
    for r, t in enumerate(transcripts):
        seen = [0] * n_ctx
        for rec in t.learning:
            ctx = spec.options[rec.options[0]].context_index
            rep = seen[ctx]
            seen[ctx] += 1
            if rec.ambiguous or rep >= repetitions:
                continue
            _, high = spec.context(ctx)
            correct[r, ctx, rep] = 1.0 if rec.chosen_option == high else 0.0
    n = np.sum(~np.isnan(correct), axis=0)
    with np.errstate(invalid="ignore"):
        acc = np.nanmean(correct, axis=0)
    se = np.array([[_se(correct[:, c, k]) for k in range(repetitions)] for c in range(n_ctx)])
    return LearningCurve(acc, se, n, correct, spec)


@dataclass(frozen=True)
class DiagnosticPairResult:
    pair_id: str
    h_option: int
    l_option: int
    k: int
    n: int
    proportion: float
    z: float
    p: float

    @property
    def stars(self) -> str:
        return stars(self.p)


def diagnostic_pairs(transcripts: Sequence[RunTranscript]) -> list[DiagnosticPairResult]:
    """Share of runs choosing the higher-paying L option in each diagnostic pair."""
    if not transcripts:
        raise AnalysisError("no transcripts to analyse")
    spec = transcripts[0].instance.spec
    out = []
    for h, l in DIAGNOSTIC_PAIRS:
        k = n = 0
        for t in transcripts:
            for rec in t.transfer:
                if set(rec.options) == {h, l}:
                    if not rec.ambiguous:
                        n += 1
                        k += rec.chosen_option == l
                    break
        pair_id = f"{spec.options[h].label}v{spec.options[l].label}"
        if n == 0:
            nan = float("nan")
            out.append(DiagnosticPairResult(pair_id, h, l, 0, 0, nan, nan, nan))
            continue
        z = proportion_z_test(k, n)
        out.append(DiagnosticPairResult(pair_id, h, l, k, n, z.proportion, z.z, z.p))
    return out


@dataclass
class AnalysisReport:
    conditions: list
    models: list
    rates: ChoiceRateTable
    contrast: Optional[ContrastResult]
    diagnostics: list
    curves: LearningCurve
    final_accuracy: Optional[TTestResult]
    exclusions: list
    notes: list = field(default_factory=list)


def analyze(transcripts: Sequence[RunTranscript], fixed_denominator: bool = False, allow_mixed: bool = False) -> AnalysisReport:
    if not transcripts:
        raise AnalysisError("no transcripts to analyse; refusing to write an empty report")
    transcripts = sorted(transcripts, key=_run_key)
    conditions = sorted({t.config.condition.value for t in transcripts})
    models = sorted({t.config.model_name for t in transcripts})
    if (len(conditions) > 1 or len(models) > 1) and not allow_mixed:
        raise AnalysisError(f"transcripts mix conditions {conditions} / models {models}; pass allow_mixed to pool them")
    notes = []
    rates = choice_rates(transcripts, fixed_denominator)
    if rates.undefined_runs:
        notes.append(f"{len(rates.undefined_runs)} (run, option) rates undefined (no valid presentation), excluded from pooling")
    try:
        contrast = linear_contrast(rates.rates)
    except AnalysisError as exc:
        contrast = None
        notes.append(str(exc))
    curves = learning_curves(transcripts)
    final = curves.per_run(curves.correct.shape[2])
    final = final[~np.isnan(final)]
    final_test = one_sample_t(final, 0.5) if len(final) >= 2 else None
    exclusions = [
        (
            *_run_key(t),
            sum(r.ambiguous for r in t.learning),
            sum(r.ambiguous for r in t.transfer),
            sum(r.ratings_missing for r in t.records),
        )
        for t in transcripts
    ]
    return AnalysisReport(conditions, models, rates, contrast, diagnostic_pairs(transcripts), curves, final_test, exclusions, notes)


# ---------------------------------------------------------------------------
# Output

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return f"{x:.10g}"


def _write(path: Path, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _ttest_row(t: Optional[TTestResult]) -> list:
    if t is None:
        return [""] * 9
    return [t.n, t.mean, t.sd, t.t, t.df, t.p, t.d, t.stars, t.degenerate]


def write_report(report: AnalysisReport, out_dir: "str | Path") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rt = report.rates
    labels = rt.labels
    written = []

    def emit(name, header, rows):
        p = out / name
        _write(p, header, rows)
        written.append(p)

    emit(
        "choice_rates.csv",
        ["condition", "model", "run", "option", "label", "chosen", "presented", "rate"],
        [(*run, o, labels[o], rt.chosen[r, o], rt.presented[r, o], rt.rates[r, o])
         for r, run in enumerate(rt.runs) for o in range(len(labels))],
    )
    emit(
        "choice_rate_summary.csv",
        ["option", "label", "mean", "se", "n_runs"],
        [(o, labels[o], rt.mean[o], rt.se[o], rt.n_defined[o]) for o in range(len(labels))],
    )
    ttest_header = ["n", "mean", "sd", "t", "df", "p", "d", "stars", "degenerate"]
    emit("contrast.csv", ttest_header, [_ttest_row(report.contrast.test if report.contrast else None)])
    per_run = contrast_values(rt.rates)
    emit("contrast_runs.csv", ["condition", "model", "run", "contrast"],
         [(*run, per_run[r]) for r, run in enumerate(rt.runs)])
    emit(
        "diagnostic_pairs.csv",
        ["pair", "h_label", "l_label", "k", "n", "proportion", "z", "p", "stars"],
        [(d.pair_id, labels[d.h_option], labels[d.l_option], d.k, d.n, d.proportion, d.z, d.p, d.stars)
         for d in report.diagnostics],
    )
    cv = report.curves
    emit(
        "learning_curves.csv",
        ["context", "low_label", "high_label", "repetition", "accuracy", "se", "n"],
        [(c, labels[2 * c], labels[2 * c + 1], k + 1, cv.accuracy[c, k], cv.se[c, k], cv.n[c, k])
         for c in range(cv.accuracy.shape[0]) for k in range(cv.accuracy.shape[1])],
    )
    emit("final_accuracy.csv", ttest_header, [_ttest_row(report.final_accuracy)])
    emit(
        "exclusions.csv",
        ["condition", "model", "run", "learning_ambiguous", "transfer_ambiguous", "ratings_missing"],
        report.exclusions,
    )
    emit(
        "long_format.csv",
        ["condition", "model", "run", "option", "rate"],
        [(*run, labels[o], rt.rates[r, o]) for r, run in enumerate(rt.runs) for o in range(len(labels))],
    )
    return written


def summary_text(report: AnalysisReport) -> str:
    lines = [f"conditions: {', '.join(report.conditions)}; models: {', '.join(report.models)}; runs: {len(report.rates.runs)}"]
    labels = report.rates.labels
    lines.append("choice rates: " + "  ".join(f"{l}={m:.3f}" for l, m in zip(labels, report.rates.mean)))
    c = report.contrast
    if c is None:
        lines.append("contrast: undefined")
    elif c.degenerate:
        lines.append(f"contrast: mean={c.mean:+.4f} (degenerate: no variance across {c.test.n} runs)")
    else:
        lines.append(f"contrast: mean={c.mean:+.4f} t({c.df})={c.t:.2f} p={c.p:.3g} d={c.d:.2f} {c.stars}".rstrip())
    lines.append("diagnostic pairs (proportion choosing L):")
    for d in report.diagnostics:
        prop = "n/a" if d.n == 0 else f"{d.proportion:.2f}{d.stars}"
        lines.append(f"  {d.pair_id:<9} {prop:<8} ({d.k}/{d.n})")
    acc = report.curves
    lines.append("learning accuracy by repetition: " + "  ".join(
        f"{k + 1}:{acc.pooled(k + 1):.2f}" for k in range(acc.correct.shape[2])))
    n_amb = sum(e[3] + e[4] for e in report.exclusions)
    lines.append(f"ambiguous responses excluded: {n_amb}")
    lines.extend(f"note: {n}" for n in report.notes)
    return "\n".join(lines)
