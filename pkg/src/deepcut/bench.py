"""Benchmark grid over methods, forget fractions and seeds, plus report files.

``run_benchmark`` trains the original model once per seed, builds the exact
reference by retraining, then applies each method and scores it on the
retained, forget and test splits. Timings cover the unlearning call only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, TextIO

from .data import TokenDataset, UnlearnRequest, select_forget
from .engines import (METHODS, Evaluator, TrainConfig, UnlearnOutcome, sisa_train, sisa_unlearn, train_model,
                      unlearn_deepcut, unlearn_finetune, unlearn_retrain, unlearn_reverse_gradient)
from .evaluation import F1Score, evaluate_split, model_agreement
from .model import PersistenceError

log = logging.getLogger(__name__)

TABLE_HEADER = ("method", "fraction", "retained_f1", "test_f1", "forget_f1", "agreement", "tv", "seconds")
SPLITS = ("retained", "forget", "test")


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    method: str
    dataset: str
    fraction: float
    seed: int | None            # None on averaged rows
    retained: F1Score
    forget: F1Score
    test: F1Score
    agreement: float
    tv: float
    seconds: float
    n_seeds: int = 1

    @property
    def averaged(self) -> bool:
        return self.seed is None

    def as_dict(self) -> dict:
        d = asdict(self)
        d["averaged"] = self.averaged
        return d


@dataclass(frozen=True)
class CellFailure:
    method: str
    fraction: float
    seed: int
    error: str


@dataclass
class BenchmarkResult:
    reports: list[MetricsReport] = field(default_factory=list)
    averages: list[MetricsReport] = field(default_factory=list)
    failures: list[CellFailure] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def cell(self, method: str, fraction: float, seed: int | None = None) -> MetricsReport:
        rows = self.averages if seed is None else self.reports
        for r in rows:
            if r.method == method and r.fraction == fraction and r.seed == seed:
                return r
        raise KeyError((method, fraction, seed))


def _mean_f1(scores: Sequence[F1Score]) -> F1Score:
    n = len(scores)
    return F1Score(
        precision=math.fsum(s.precision for s in scores) / n,
        recall=math.fsum(s.recall for s in scores) / n,
        f1=math.fsum(s.f1 for s in scores) / n,
        tp=sum(s.tp for s in scores), fp=sum(s.fp for s in scores), fn=sum(s.fn for s in scores),
        tokens=sum(s.tokens for s in scores), degenerate=any(s.degenerate for s in scores))


def average_reports(reports: Sequence[MetricsReport]) -> list[MetricsReport]:
    """One row per (method, fraction): arithmetic means over seeds, in first-seen order."""
    groups: dict[tuple[str, float], list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.fraction), []).append(r)
    out = []
    for (method, fraction), rows in groups.items():
        n = len(rows)
        out.append(MetricsReport(
            method, rows[0].dataset, fraction, None,
            *(_mean_f1([getattr(r, split) for r in rows]) for split in SPLITS),
            agreement=math.fsum(r.agreement for r in rows) / n,
            tv=math.fsum(r.tv for r in rows) / n,
            seconds=math.fsum(r.seconds for r in rows) / n,
            n_seeds=n))
    return out


Runner = Callable[..., UnlearnOutcome]

_APPROXIMATE: dict[str, Runner] = {
    "finetune": unlearn_finetune,
    "revgrad": unlearn_reverse_gradient,
    "deepcut": unlearn_deepcut,
}


def run_benchmark(ds: TokenDataset, fractions: Sequence[float], methods: Sequence[str],
                  seeds: Sequence[int], cfg: TrainConfig, evaluator: Evaluator | None = None,
                  progress: TextIO | None = None) -> BenchmarkResult:
    """Evaluate every (method, fraction, seed) cell; failing cells are logged and skipped.

    The retrained model is always computed, because agreement and total
    variation are measured against it.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}")
    if not seeds:
        raise ValueError("at least one seed is required")
    result = BenchmarkResult(config={"train": cfg.as_dict(), "fractions": list(fractions),
                                     "methods": list(methods), "seeds": list(seeds), "dataset": ds.name})
    evaluator = evaluator or Evaluator(ds.label_names)
    cells = len(methods) * len(fractions) * len(seeds)

    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        try:
            original = train_model(ds, scfg, evaluator=evaluator, progress=progress)
            ensemble = sisa_train(ds, scfg.sisa_shards, scfg, evaluator=evaluator) if "sisa" in methods else None
        except Exception as exc:  # the whole seed is lost; record every cell
            log.error("seed %d: original training failed: %s", seed, exc)
            result.failures += [CellFailure(m, f, seed, f"original model: {exc}") for f in fractions for m in methods]
            continue
        for fraction in fractions:
            try:
                request = select_forget(ds, fraction, seed)
                exact = unlearn_retrain(ds, request, scfg, evaluator, progress)
            except Exception as exc:
                log.error("seed %d fraction %g: reference retrain failed: %s", seed, fraction, exc)
                result.failures += [CellFailure(m, fraction, seed, f"reference: {exc}") for m in methods]
                continue
            for method in methods:
                try:
                    if method == "retrain":
                        outcome = exact
                    elif method == "sisa":
                        outcome = sisa_unlearn(ensemble, ds, request, scfg, evaluator, progress)
                    else:
                        outcome = _APPROXIMATE[method](original, ds, request, scfg, evaluator, progress)
                    result.reports.append(score_outcome(ds, request, outcome, exact.model, seed))
                except Exception as exc:
                    log.error("cell %s/%g/%d failed: %s", method, fraction, seed, exc)
                    result.failures.append(CellFailure(method, fraction, seed, f"{type(exc).__name__}: {exc}"))
    if cells and not result.reports:
        raise BenchmarkError(f"all {cells} benchmark cells failed; first error: {result.failures[0].error}")
    result.averages = average_reports(result.reports)
    return result


def score_outcome(ds: TokenDataset, request: UnlearnRequest, outcome: UnlearnOutcome, exact,
                  seed: int) -> MetricsReport:
    retained, forget = request.split(ds.train)
    model = outcome.model
    agree = model_agreement(model, exact, ds.test)
    return MetricsReport(
        outcome.method, ds.name, request.fraction, seed,
        retained=evaluate_split(model, retained, ds.label_names),
        forget=evaluate_split(model, forget, ds.label_names),
        test=evaluate_split(model, ds.test, ds.label_names),
        agreement=agree.agreement, tv=agree.tv, seconds=outcome.seconds)


# ---------------------------------------------------------------------------
# report files

def _num(x: float) -> str:
    return repr(float(x))


def table_rows(result: BenchmarkResult) -> list[list[str]]:
    return [[r.method, _num(r.fraction), _num(r.retained.f1), _num(r.test.f1), _num(r.forget.f1),
             _num(r.agreement), _num(r.tv), _num(r.seconds)] for r in result.averages]


def timing_pairs(result: BenchmarkResult) -> list[tuple[str, float]]:
    """Mean unlearning seconds per method at the largest forget fraction."""
    if not result.averages:
        return []
    top = max(r.fraction for r in result.averages)
    return [(r.method, r.seconds) for r in result.averages if r.fraction == top]


def results_document(result: BenchmarkResult, run_config: dict | None = None) -> dict:
    return {
        "schema": "deepcut-results/1",
        "config": run_config if run_config is not None else result.config,
        "reports": [r.as_dict() for r in result.reports],
        "averages": [r.as_dict() for r in result.averages],
        "failures": [asdict(f) for f in result.failures],
    }


def emit_reports(result: BenchmarkResult, out_dir, run_config: dict | None = None,
                 figures: bool = True) -> dict[str, Path]:
    """Write results.json, table.csv and timing.tsv (plus figures) into ``out_dir``.

    Files depend only on ``result`` and ``run_config``, so emitting the same
    reports twice gives byte-identical files.
    """
    if not result.reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"results": out / "results.json", "table": out / "table.csv", "timing": out / "timing.tsv"}
        doc = results_document(result, run_config)
        paths["results"].write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n",
                                    encoding="utf-8")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        writer.writerows(table_rows(result))
        paths["table"].write_text(buf.getvalue(), encoding="utf-8")
        paths["timing"].write_text("".join(f"{m}\t{_num(s)}\n" for m, s in timing_pairs(result)),
                                   encoding="utf-8")
        if figures:
            from .plotting import render_figures
            paths.update(render_figures(result, out))
    except OSError as exc:
        raise PersistenceError(f"cannot write reports to {out}: {exc}") from exc
    return paths
