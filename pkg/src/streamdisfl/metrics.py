"""Incremental evaluation metrics over prediction logs.

All corpus-level figures are pooled over tokens or (prefix, token) pairs,
except edit overhead which is a mean of per-utterance ratios. Abstentions are
never counted as predictions: they contribute nothing to the streaming
confusion counts, and a change from or to an abstention is not an edit.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import TokenRole
from .decoder import ABSTAIN, DISFLUENT, PredictionLog

ROLE_ORDER = (TokenRole.REPAIR, TokenRole.FLUENT, TokenRole.INTERREGNUM,
              TokenRole.REPARANDUM, TokenRole.EDIT, TokenRole.REPAIR_ONSET)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, gold: int, decision: str) -> None:
        if decision == ABSTAIN:
            return
        pred = decision == DISFLUENT
        if gold:
            if pred:
                self.tp += 1
            else:
                self.fn += 1
        elif pred:
            self.fp += 1
        else:
            self.tn += 1


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    counts: Counts
    undefined: tuple[str, ...] = ()


def prf_from_counts(c: Counts) -> PRF:
    undefined = []
    if c.tp + c.fp:
        p = c.tp / (c.tp + c.fp)
    else:
        p = 0.0
        undefined.append("precision")
    if c.tp + c.fn:
        r = c.tp / (c.tp + c.fn)
    else:
        r = 0.0
        undefined.append("recall")
    if p + r > 0:
        f1 = 2 * p * r / (p + r)
    else:
        f1 = 0.0
        undefined.append("f1")
    return PRF(p, r, f1, c, tuple(undefined))


def _gold(log: PredictionLog) -> tuple[int, ...]:
    if log.gold is None:
        raise ValueError(f"{log.utterance_id}: log has no gold labels")
    return log.gold


def streaming_prf(logs: Sequence[PredictionLog]) -> PRF:
    """P/R/F1 with every emitted (prefix, token) decision scored as its own prediction."""
    c = Counts()
    for log in logs:
        gold = _gold(log)
        for row in log.rows:
            for j, decision in enumerate(row):
                c.add(gold[j], decision)
    return prf_from_counts(c)


def final_prf(logs: Sequence[PredictionLog]) -> PRF:
    c = Counts()
    for log in logs:
        gold = _gold(log)
        for j, decision in enumerate(log.final):
            if decision == ABSTAIN:
                raise ValueError(f"{log.utterance_id}: final row contains an abstention")
            c.add(gold[j], decision)
    return prf_from_counts(c)


def final_f1(logs: Sequence[PredictionLog]) -> float:
    return final_prf(logs).f1


def edit_count(log: PredictionLog) -> int:
    """Changes between two emitted decisions for a token in consecutive prefixes."""
    edits = 0
    for prev, row in zip(log.rows, log.rows[1:]):
        for a, b in zip(prev, row):
            if a != ABSTAIN and b != ABSTAIN and a != b:
                edits += 1
    return edits


def edit_overhead(logs: Sequence[PredictionLog]) -> float:
    if not logs:
        return math.nan
    total = 0.0
    for log in logs:
        total += edit_count(log) / len(log)
    return total / len(logs)


def first_disfluent_prefix(log: PredictionLog, k: int) -> int | None:
    """1-based prefix at which token k (0-based) is first labelled disfluent."""
    for i in range(k + 1, len(log) + 1):
        if log.rows[i - 1][k] == DISFLUENT:
            return i
    return None


def first_prediction_prefix(log: PredictionLog, k: int) -> int:
    for i in range(k + 1, len(log) + 1):
        if log.rows[i - 1][k] != ABSTAIN:
            return i
    raise ValueError(f"{log.utterance_id}: token {k} never receives a prediction")


def detection_times(log: PredictionLog) -> list[int]:
    gold = _gold(log)
    out = []
    for k, g in enumerate(gold):
        if g:
            first = first_disfluent_prefix(log, k)
            if first is not None:
                out.append(first - (k + 1))
    return out


def time_to_detection(logs: Sequence[PredictionLog]) -> float:
    """Mean delay between a disfluent token and its first disfluent label; NaN if none detected."""
    total = count = 0
    for log in logs:
        times = detection_times(log)
        total += sum(times)
        count += len(times)
    return total / count if count else math.nan


def repair_onsets(roles: Sequence[TokenRole]) -> list[int | None]:
    """For each token, the 0-based index of the repair that closes its structure.

    A run of reparandum and interregnum tokens belongs to the structure whose
    repair onset immediately follows the run; runs not followed by a repair
    onset have no repair. Other tokens get None.
    """
    out: list[int | None] = [None] * len(roles)
    run: list[int] = []
    for j, role in enumerate(roles):
        role = TokenRole(role)
        if role in (TokenRole.REPARANDUM, TokenRole.INTERREGNUM):
            run.append(j)
            continue
        if role == TokenRole.REPAIR_ONSET:
            for k in run:
                out[k] = j
        run = []
    return out


def first_detection_times(log: PredictionLog, roles: Sequence[TokenRole]) -> list[int]:
    gold = _gold(log)
    if len(roles) != len(gold):
        raise ValueError(f"{log.utterance_id}: roles and log lengths differ")
    onsets = repair_onsets(roles)
    out = []
    for k, g in enumerate(gold):
        if g and onsets[k] is not None:
            first = first_disfluent_prefix(log, k)
            if first is not None:
                out.append(first - (onsets[k] + 1))
    return out


def first_time_to_detection(logs: Sequence[PredictionLog], roles: Sequence[Sequence[TokenRole]]) -> float:
    """Like TTD but measured from the onset of the gold repair; can be negative."""
    total = count = 0
    for log, r in zip(logs, roles, strict=True):
        times = first_detection_times(log, r)
        total += sum(times)
        count += len(times)
    return total / count if count else math.nan


def waiting_times(log: PredictionLog) -> list[int]:
    return [first_prediction_prefix(log, k) - (k + 1) for k in range(len(log))]


def average_waiting_time(logs: Sequence[PredictionLog]) -> float:
    total = count = 0
    for log in logs:
        w = waiting_times(log)
        total += sum(w)
        count += len(w)
    return total / count if count else math.nan


# ---------------------------------------------------------------------------
# Per-role analyses
# ---------------------------------------------------------------------------


@dataclass
class RoleBreakdown:
    """Per-role value; roles with no tokens (or no predictions) are absent."""

    values: dict[TokenRole, float]
    support: dict[TokenRole, int]

    def get(self, role: TokenRole) -> float | None:
        return self.values.get(role)


def awt_by_role(logs: Sequence[PredictionLog], roles: Sequence[Sequence[TokenRole]]) -> RoleBreakdown:
    totals: dict[TokenRole, int] = {}
    counts: dict[TokenRole, int] = {}
    for log, rs in zip(logs, roles, strict=True):
        for role, w in zip(rs, waiting_times(log), strict=True):
            role = TokenRole(role)
            totals[role] = totals.get(role, 0) + w
            counts[role] = counts.get(role, 0) + 1
    return RoleBreakdown({r: totals[r] / counts[r] for r in counts}, counts)


def misclassification_by_role(logs: Sequence[PredictionLog],
                              roles: Sequence[Sequence[TokenRole]]) -> RoleBreakdown:
    """Share of emitted (prefix, token) decisions that disagree with gold, per role."""
    wrong: dict[TokenRole, int] = {}
    counts: dict[TokenRole, int] = {}
    for log, rs in zip(logs, roles, strict=True):
        gold = _gold(log)
        rs = [TokenRole(r) for r in rs]
        for row in log.rows:
            for j, decision in enumerate(row):
                if decision == ABSTAIN:
                    continue
                counts[rs[j]] = counts.get(rs[j], 0) + 1
                if (decision == DISFLUENT) != bool(gold[j]):
                    wrong[rs[j]] = wrong.get(rs[j], 0) + 1
    return RoleBreakdown({r: wrong.get(r, 0) / counts[r] for r in counts}, counts)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("Model", "F1", "P", "R", "EO", "TTD", "FTD", "AWT", "Final F1",
                  "TP", "FP", "TN", "FN", "Final TP", "Final FP", "Final TN", "Final FN")


@dataclass
class MetricReport:
    streaming_precision: float
    streaming_recall: float
    streaming_f1: float
    edit_overhead: float
    ttd: float
    ftd: float
    awt: float
    final_f1: float
    streaming_counts: Counts
    final_counts: Counts
    undefined: tuple[str, ...] = ()
    name: str = ""

    def row(self) -> dict:
        s, f = self.streaming_counts, self.final_counts
        return {
            "Model": self.name, "F1": self.streaming_f1, "P": self.streaming_precision,
            "R": self.streaming_recall, "EO": self.edit_overhead, "TTD": self.ttd,
            "FTD": self.ftd, "AWT": self.awt, "Final F1": self.final_f1,
            "TP": s.tp, "FP": s.fp, "TN": s.tn, "FN": s.fn,
            "Final TP": f.tp, "Final FP": f.fp, "Final TN": f.tn, "Final FN": f.fn,
        }

    def to_json(self) -> dict:
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.row().items()}
        d["undefined"] = list(self.undefined)
        return d


def evaluate_logs(logs: Sequence[PredictionLog], roles: Sequence[Sequence[TokenRole]],
                  name: str = "") -> MetricReport:
    stream = streaming_prf(logs)
    final = final_prf(logs)
    ttd = time_to_detection(logs)
    ftd = first_time_to_detection(logs, roles)
    undefined = [f"streaming_{u}" for u in stream.undefined] + [f"final_{u}" for u in final.undefined]
    if math.isnan(ttd):
        undefined.append("ttd")
    if math.isnan(ftd):
        undefined.append("ftd")
    return MetricReport(stream.precision, stream.recall, stream.f1, edit_overhead(logs), ttd, ftd,
                        average_waiting_time(logs), final.f1, stream.counts, final.counts,
                        tuple(undefined), name)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_report_csv(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            row = rep.row()
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def write_report_json(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


ROLE_COLUMNS = ("Type of disfluency", "Average wait time", "Misclassification rate",
                "Tokens", "Predictions")


def role_table(logs, roles) -> list[dict]:
    awt = awt_by_role(logs, roles)
    mis = misclassification_by_role(logs, roles)
    rows = []
    for role in ROLE_ORDER:
        if role not in awt.values and role not in mis.values:
            continue
        rows.append({
            "Type of disfluency": role.display_name,
            "Average wait time": awt.values.get(role),
            "Misclassification rate": mis.values.get(role),
            "Tokens": awt.support.get(role, 0),
            "Predictions": mis.support.get(role, 0),
        })
    return rows


def write_role_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROLE_COLUMNS)
        for row in rows:
            w.writerow(["" if row[c] is None else _fmt(row[c]) for c in ROLE_COLUMNS])


def write_role_json(rows: Sequence[dict], path) -> None:
    Path(path).write_text(json.dumps(list(rows), indent=2) + "\n", encoding="utf-8")
