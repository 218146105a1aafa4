"""Objective evaluation and report rendering.

Mel-cepstral distortion between equal-length coefficient sequences,
identification confusion tables with a display-suppression threshold for
sparse mistakes, and table files mirroring the result layout of the
experiment protocol.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DomainError, EmasynthError

MCD_CONST = 10.0 / math.log(10.0)
OTHER = "OTHER"
SUPPRESS_N = 5

SIGNIFICANCE_LEVEL = 0.05
MARK_AUGMENTATION = "†"   # dagger: augmentation effect significant
MARK_DEGRADATION = "*"         # MOS reduction significant


def mcd(c_ref: np.ndarray, c_pred: np.ndarray, exclude_c0: bool = True) -> float:
    """Mel-cepstral distortion in dB.

    Per frame (10/ln 10) * sqrt(2 * sum_d (ref_d - pred_d)^2) over
    coefficients d0..M (d0 = 1 when c0 is excluded), averaged over frames.
    Sequences must already share a frame clock; no time warping happens
    here.
    """
    c_ref = np.asarray(c_ref, dtype=float)
    c_pred = np.asarray(c_pred, dtype=float)
    if c_ref.shape != c_pred.shape:
        raise AlignmentError(
            f"sequence shapes differ: {c_ref.shape} vs {c_pred.shape}"
        )
    if c_ref.ndim != 2 or c_ref.shape[1] < 2:
        raise DomainError("need (T, M+1) coefficient matrices with M >= 1")
    d0 = 1 if exclude_c0 else 0
    diff = c_ref[:, d0:] - c_pred[:, d0:]
    per_frame = MCD_CONST * np.sqrt(2.0 * np.sum(diff**2, axis=1))
    return float(per_frame.mean())


@dataclass(frozen=True)
class McdResult:
    utterance_id: str
    speaker: str
    speaker_condition: str
    setup: str
    condition: str
    frames: int
    mcd_db: float


def weighted_mean_mcd(results: list) -> float:
    frames = sum(r.frames for r in results)
    if frames == 0:
        return float("nan")
    return sum(r.mcd_db * r.frames for r in results) / frames


# ---------------------------------------------------------------------------
# Confusion tables
# ---------------------------------------------------------------------------

def normalize_answer(answer: str) -> str:
    return answer.strip().lower()


@dataclass
class ConfusionTable:
    """Counts of chosen words per presented word.

    In-vocabulary answers land in their own cell; everything else counts as
    OTHER, with the raw (normalized) wording retained in a per-row
    breakdown.  Off-diagonal cells with 0 < count < suppress_n are flagged
    for display suppression (and folded into OTHER when rendering) but the
    stored counts are never altered.
    """

    vocabulary: tuple
    task: str = ""
    condition: str = ""
    speaker_group: str = ""
    suppress_n: int = SUPPRESS_N
    counts: dict = field(default_factory=dict)
    other_breakdown: dict = field(default_factory=dict)

    def add(self, presented: str, answer: str) -> None:
        presented = normalize_answer(presented)
        if presented not in self.vocabulary:
            raise DomainError(f"presented word {presented!r} not in vocabulary")
        chosen = normalize_answer(answer)
        row = self.counts.setdefault(
            presented, {w: 0 for w in (*self.vocabulary, OTHER)}
        )
        if chosen in self.vocabulary:
            row[chosen] += 1
        else:
            row[OTHER] += 1
            branch = self.other_breakdown.setdefault(presented, {})
            branch[chosen] = branch.get(chosen, 0) + 1

    def row_total(self, presented: str) -> int:
        return sum(self.counts.get(presented, {}).values())

    def percentage(self, presented: str, chosen: str) -> float:
        total = self.row_total(presented)
        if total == 0:
            return float("nan")
        return 100.0 * self.counts[presented][chosen] / total

    def is_suppressed(self, presented: str, chosen: str) -> bool:
        if chosen == presented:
            return False
        count = self.counts[presented][chosen]
        return 0 < count < self.suppress_n

    def display_row(self, presented: str) -> dict:
        """Percentages for rendering: suppressed cells are folded into OTHER."""
        total = self.row_total(presented)
        out = {}
        folded = 0
        for word in self.vocabulary:
            count = self.counts[presented][word]
            if self.is_suppressed(presented, word):
                out[word] = 0.0
                folded += count
            else:
                out[word] = 100.0 * count / total
        out[OTHER] = 100.0 * (self.counts[presented][OTHER] + folded) / total
        return out

    def display_other_breakdown(self, presented: str) -> dict:
        """OTHER wordings worth reporting (count >= suppress_n)."""
        total = self.row_total(presented)
        branch = self.other_breakdown.get(presented, {})
        return {
            word: (100.0 * n / total, n)
            for word, n in sorted(branch.items(), key=lambda kv: (-kv[1], kv[0]))
            if n >= self.suppress_n
        }

    def rows(self) -> list:
        out = []
        for presented in self.vocabulary:
            if presented not in self.counts:
                continue
            for chosen in (*self.vocabulary, OTHER):
                out.append({
                    "task": self.task,
                    "condition": self.condition,
                    "group": self.speaker_group,
                    "presented": presented,
                    "chosen": chosen,
                    "count": self.counts[presented][chosen],
                    "pct": round(self.percentage(presented, chosen), 4),
                    "suppressed": int(chosen != OTHER
                                      and self.is_suppressed(presented, chosen)),
                })
        return out


def confusion(pairs: list, vocabulary: tuple, task: str = "",
              condition: str = "", speaker_group: str = "",
              suppress_n: int = SUPPRESS_N) -> ConfusionTable:
    """Build a confusion table from (presented_word, raw_answer) pairs."""
    table = ConfusionTable(vocabulary=tuple(normalize_answer(w) for w in vocabulary),
                           task=task, condition=condition,
                           speaker_group=speaker_group, suppress_n=suppress_n)
    for presented, answer in pairs:
        table.add(presented, answer)
    return table


# ---------------------------------------------------------------------------
# CSV table files
# ---------------------------------------------------------------------------

MCD_FIELDS = ("utterance_id", "speaker", "speaker_condition", "setup",
              "condition", "frames", "mcd_db")
CONFUSION_FIELDS = ("task", "condition", "group", "presented", "chosen",
                    "count", "pct", "suppressed")
STATS_FIELDS = ("test", "scope", "statistic", "df", "p", "method", "n")


def _write_csv(path, fieldnames, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_mcd_csv(path, results: list) -> None:
    rows = [{
        "utterance_id": r.utterance_id,
        "speaker": r.speaker,
        "speaker_condition": r.speaker_condition,
        "setup": r.setup,
        "condition": r.condition,
        "frames": r.frames,
        "mcd_db": f"{r.mcd_db:.6f}",
    } for r in results]
    _write_csv(path, MCD_FIELDS, rows)


def read_mcd_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [McdResult(
            utterance_id=row["utterance_id"],
            speaker=row["speaker"],
            speaker_condition=row["speaker_condition"],
            setup=row["setup"],
            condition=row["condition"],
            frames=int(row["frames"]),
            mcd_db=float(row["mcd_db"]),
        ) for row in csv.DictReader(fh)]


def write_confusion_csv(path, tables: list) -> None:
    rows = []
    for table in tables:
        rows.extend(table.rows())
    _write_csv(path, CONFUSION_FIELDS, rows)


def write_stats_csv(path, rows: list) -> None:
    formatted = [{
        "test": r["test"],
        "scope": r["scope"],
        "statistic": f"{r['statistic']:.6f}",
        "df": "" if r.get("df") is None else f"{r['df']:g}",
        "p": f"{r['p']:.6g}",
        "method": r["method"],
        "n": r["n"],
    } for r in rows]
    _write_csv(path, STATS_FIELDS, formatted)


def read_stats_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({
                "test": row["test"],
                "scope": row["scope"],
                "statistic": float(row["statistic"]),
                "df": float(row["df"]) if row["df"] else None,
                "p": float(row["p"]),
                "method": row["method"],
                "n": int(row["n"]),
            })
        return rows


def parse_scope(scope: str) -> dict:
    out = {}
    for part in scope.split(";"):
        if part:
            key, _, value = part.partition("=")
            out[key] = value
    return out


def format_scope(**kv) -> str:
    return ";".join(f"{k}={v}" for k, v in kv.items())


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _speaker_columns(results: list) -> list:
    ordered = []
    for cond in ("healthy", "oral_cancer"):
        speakers = sorted({r.speaker for r in results
                           if r.speaker_condition == cond})
        ordered.extend((s, cond) for s in speakers)
    return ordered


def report(run_dir) -> dict:
    """Render report tables from a run directory.

    Requires eval/mcd.csv; stats/stats.csv, eval/confusion.csv and
    eval/mos.csv are folded in when present.  Writes report/report.csv and
    report/report.txt and returns the written paths.
    """
    run_dir = Path(run_dir)
    mcd_path = run_dir / "eval" / "mcd.csv"
    if not mcd_path.exists():
        raise EmasynthError(f"missing mandatory MCD results at {mcd_path}")
    results = read_mcd_csv(mcd_path)
    stats_path = run_dir / "stats" / "stats.csv"
    stats_rows = read_stats_csv(stats_path) if stats_path.exists() else None

    aug_significant = set()
    mos_significant = set()
    if stats_rows:
        for row in stats_rows:
            scope = parse_scope(row["scope"])
            if (row["test"] == "paired_t" and "speaker" in scope
                    and row["p"] < SIGNIFICANCE_LEVEL):
                aug_significant.add((scope["speaker"], scope.get("setup", "")))
            if (row["test"] == "wilcoxon_signed_rank" and "speaker" in scope
                    and row["p"] < SIGNIFICANCE_LEVEL):
                mos_significant.add((scope["speaker"], scope.get("condition", "")))

    columns = _speaker_columns(results)
    setups = sorted({r.setup for r in results})
    predicted = [r for r in results if r.condition == "predicted"]

    csv_rows = []
    lines = []
    header = ["row"] + [s for s, _ in columns] + ["healthy_avg", "oral_cancer_avg"]
    lines.append("  ".join(f"{h:>14s}" for h in header))
    for setup in setups:
        label = f"MCD[{setup}]"
        cells = []
        for speaker, _cond in columns:
            rs = [r for r in predicted if r.setup == setup and r.speaker == speaker]
            value = weighted_mean_mcd(rs)
            mark = MARK_AUGMENTATION if (speaker, setup) in aug_significant else ""
            cells.append((speaker, value, mark))
        group_avg = {}
        for cond in ("healthy", "oral_cancer"):
            rs = [r for r in predicted
                  if r.setup == setup and r.speaker_condition == cond]
            group_avg[cond] = weighted_mean_mcd(rs)
        csv_rows.append({
            "row": label,
            **{s: f"{v:.3f}{m}" for s, v, m in cells},
            "healthy_avg": f"{group_avg['healthy']:.3f}",
            "oral_cancer_avg": f"{group_avg['oral_cancer']:.3f}",
        })
        lines.append("  ".join(
            [f"{label:>14s}"]
            + [f"{f'{v:.2f}{m}':>14s}" for _, v, m in cells]
            + [f"{group_avg['healthy']:>14.2f}", f"{group_avg['oral_cancer']:>14.2f}"]
        ))

    mos_path = run_dir / "eval" / "mos.csv"
    if mos_path.exists():
        with open(mos_path, newline="", encoding="utf-8") as fh:
            mos_rows = list(csv.DictReader(fh))
        conditions = sorted({r["condition"] for r in mos_rows})
        for condition in conditions:
            label = f"MOS[{condition}]"
            cells = []
            for speaker, _cond in columns:
                vals = [float(r["rating"]) for r in mos_rows
                        if r["speaker"] == speaker and r["condition"] == condition]
                value = sum(vals) / len(vals) if vals else float("nan")
                mark = (MARK_DEGRADATION
                        if (speaker, condition) in mos_significant else "")
                cells.append((speaker, value, mark))
            csv_rows.append({
                "row": label,
                **{s: f"{v:.2f}{m}" for s, v, m in cells},
                "healthy_avg": "", "oral_cancer_avg": "",
            })
            lines.append("  ".join(
                [f"{label:>14s}"]
                + [f"{f'{v:.2f}{m}':>14s}" for _, v, m in cells]
                + [f"{'':>14s}", f"{'':>14s}"]
            ))

    if stats_rows is None:
        lines.append("")
        lines.append("note: no statistics computed; significance markers omitted")
    else:
        lines.append("")
        lines.append(f"{MARK_AUGMENTATION} augmentation effect significant at "
                     f"p < {SIGNIFICANCE_LEVEL}; {MARK_DEGRADATION} degradation "
                     f"significant at p < {SIGNIFICANCE_LEVEL}")

    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / "report.csv"
    txt_path = report_dir / "report.txt"
    fieldnames = ["row"] + [s for s, _ in columns] + ["healthy_avg", "oral_cancer_avg"]
    _write_csv(csv_path, fieldnames, csv_rows)
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    confusion_path = run_dir / "eval" / "confusion.csv"
    stored = {
        "report_csv": str(csv_path.relative_to(run_dir)),
        "report_txt": str(txt_path.relative_to(run_dir)),
        "has_stats": stats_rows is not None,
        "has_confusion": confusion_path.exists(),
    }
    (report_dir / "summary.json").write_text(
        json.dumps(stored, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return {**stored, "report_csv": str(csv_path), "report_txt": str(txt_path)}
