"""Ingestion and rendering of accuracy tables, score tables and reports.

CSV schemas:
  accuracies:  header ``arch_id,accuracy``; accuracy in percent, [0, 100].
  scores:      header ``arch_id,proxy_name,value``.
Both are UTF-8; every schema violation is rejected with its line number,
nothing is dropped silently.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import TableError, UndefinedMetricError
from .metrics import EvalPair, kendall_tau_b, ndcg, permutation_pvalue, spearman_rho
from .ranking import RankVector, ScoreTable, rank_from_scores


def fmt_float(v) -> str:
    """Shortest round-trip decimal form of a float (plain Python repr)."""
    return repr(float(v))


@dataclass(frozen=True)
class AccuracyTable:
    rows: tuple[tuple[str, float], ...]
    dataset_tag: str = ""

    def as_dict(self) -> dict[str, float]:
        return dict(self.rows)


def ingest_accuracy_table(path: str, dataset_tag: str = "") -> AccuracyTable:
    """Load and validate an accuracy CSV; duplicates name both lines."""
    with open(path, encoding="utf-8", newline="") as fh:
        return _parse_accuracy(fh, dataset_tag)


def _parse_accuracy(fh, dataset_tag: str) -> AccuracyTable:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise TableError("empty file") from None
    if [h.strip() for h in header] != ["arch_id", "accuracy"]:
        raise TableError(f"expected header 'arch_id,accuracy', got {','.join(header)!r}",
                         line=1)
    rows: list[tuple[str, float]] = []
    seen: dict[str, int] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise TableError(f"expected 2 columns, got {len(row)}", line=line_no)
        arch_id = row[0].strip()
        if not arch_id:
            raise TableError("empty arch_id", line=line_no)
        try:
            acc = float(row[1])
        except ValueError:
            raise TableError(f"column 'accuracy': {row[1]!r} is not a number",
                             line=line_no) from None
        if not np.isfinite(acc) or not 0.0 <= acc <= 100.0:
            raise TableError(f"accuracy {acc} outside [0, 100]", line=line_no)
        if arch_id in seen:
            raise TableError(
                f"duplicate arch_id {arch_id!r}, first seen on line {seen[arch_id]}",
                line=line_no)
        seen[arch_id] = line_no
        rows.append((arch_id, acc))
    return AccuracyTable(rows=tuple(rows), dataset_tag=dataset_tag)


def serialize_accuracy_table(table: AccuracyTable) -> str:
    """Canonical form: rows sorted by arch_id, shortest-repr floats."""
    out = io.StringIO()
    out.write("arch_id,accuracy\n")
    for arch_id, acc in sorted(table.rows):
        out.write(f"{arch_id},{fmt_float(acc)}\n")
    return out.getvalue()


def ingest_score_table(path: str, provenance: str = "external-file") -> ScoreTable:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableError("empty file") from None
        if [h.strip() for h in header] != ["arch_id", "proxy_name", "value"]:
            raise TableError(
                f"expected header 'arch_id,proxy_name,value', got {','.join(header)!r}",
                line=1)
        rows: list[tuple[str, str, float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise TableError(f"expected 3 columns, got {len(row)}", line=line_no)
            try:
                value = float(row[2])
            except ValueError:
                raise TableError(f"column 'value': {row[2]!r} is not a number",
                                 line=line_no) from None
            rows.append((row[0].strip(), row[1].strip(), value))
    try:
        return ScoreTable(rows=tuple(rows), provenance=provenance)
    except TableError as exc:
        raise TableError(f"invalid score table {path}: {exc}") from exc


def write_score_table(table: ScoreTable) -> str:
    out = io.StringIO()
    out.write("arch_id,proxy_name,value\n")
    for arch_id, proxy, value in table.rows:
        out.write(f"{arch_id},{proxy},{fmt_float(value)}\n")
    return out.getvalue()


@dataclass(frozen=True)
class ProxyMetrics:
    proxy: str
    kendall: float
    spearman: float
    ndcg_by_seed: tuple[float, ...]
    ndcg_mean: float
    n_common: int
    pvalue: float | None = None


@dataclass(frozen=True)
class MetricReport:
    entries: tuple[ProxyMetrics, ...]
    p: int
    seeds: tuple[int, ...]
    missing: tuple[str, ...]         # arch ids present on one side only


def eval_report(scores: ScoreTable, acc: AccuracyTable, p: int,
                seeds: list[int], perm_samples: int = 0) -> MetricReport:
    """Per-proxy rank metrics against ground-truth accuracies.

    Kendall and Spearman are tie-deterministic and computed once; nDCG is
    computed per tie-break seed and averaged. Architectures missing on one
    side are reported, not silently dropped; fewer than two in common is an
    error.
    """
    if not seeds:
        raise UndefinedMetricError("need at least one nDCG seed")
    acc_map = acc.as_dict()
    entries = []
    all_missing: set[str] = set()
    for proxy in scores.proxies():
        column = scores.column(proxy)
        score_ids = {a for a, _ in column}
        common = sorted(score_ids & set(acc_map))
        all_missing |= score_ids.symmetric_difference(acc_map)
        if len(common) < 2:
            raise UndefinedMetricError(
                f"proxy {proxy!r} shares only {len(common)} architectures with "
                "the accuracy table")
        values = dict(column)
        ranked = rank_from_scores([(a, values[a]) for a in common])
        pair = EvalPair(
            accuracies=np.array([acc_map[a] for a in common]),
            ranks=ranked.ranks)
        nd = tuple(ndcg(pair, p, tie_seed=s) for s in seeds)
        pv = None
        if perm_samples > 0:
            pv = permutation_pvalue(pair, min(p, len(common)),
                                    n_samples=perm_samples, seed=seeds[0])
        entries.append(ProxyMetrics(
            proxy=proxy, kendall=kendall_tau_b(pair), spearman=spearman_rho(pair),
            ndcg_by_seed=nd, ndcg_mean=float(np.mean(nd)), n_common=len(common),
            pvalue=pv))
    return MetricReport(entries=tuple(entries), p=p, seeds=tuple(seeds),
                        missing=tuple(sorted(all_missing)))


def report_csv(report: MetricReport) -> str:
    out = io.StringIO()
    cols = "proxy,kendall_tau,spearman_rho,ndcg_mean"
    cols += "".join(f",ndcg_seed{s}" for s in report.seeds)
    if any(e.pvalue is not None for e in report.entries):
        cols += ",ndcg_perm_pvalue"
    out.write(cols + "\n")
    for e in report.entries:
        row = f"{e.proxy},{e.kendall:.6f},{e.spearman:.6f},{e.ndcg_mean:.6f}"
        row += "".join(f",{v:.6f}" for v in e.ndcg_by_seed)
        if e.pvalue is not None:
            row += f",{e.pvalue:.6f}"
        out.write(row + "\n")
    return out.getvalue()


def report_markdown(report: MetricReport) -> str:
    lines = [
        f"| Proxy | KT | SPR | nDCG_{report.p} |",
        "|---|---|---|---|",
    ]
    for e in report.entries:
        lines.append(
            f"| {e.proxy} | {e.kendall:.3f} | {e.spearman:.3f} | {e.ndcg_mean:.3f} |")
    if report.missing:
        lines.append("")
        lines.append(f"Unmatched arch ids: {len(report.missing)} "
                     f"(e.g. {', '.join(report.missing[:3])})")
    lines.append("")
    lines.append(f"nDCG averaged over seeds {list(report.seeds)}; "
                 f"{report.entries[0].n_common if report.entries else 0} architectures scored.")
    return "\n".join(lines) + "\n"
