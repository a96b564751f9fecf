"""Per-image segmentation metrics, split aggregation and cross-split gap tables."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass

import numpy as np

from .tensor import ShapeError

METRICS = ("jac", "dice", "f2", "ppv", "recall", "accuracy")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricRecord:
    jac: float
    dice: float
    f2: float
    ppv: float
    recall: float
    accuracy: float
    empty_gt: bool = False

    def values(self) -> tuple:
        return astuple(self)[:6]


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics(c: ConfusionCounts) -> MetricRecord:
    """Six overlap metrics with fixed conventions for empty masks.

    Empty ground truth: a matching empty prediction scores 1 on the five
    overlap metrics, any foreground prediction scores 0.  A non-empty ground
    truth with an empty prediction has PPV 0.
    """
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    acc = (tp + tn) / c.total
    if tp + fn == 0:
        v = 1.0 if fp == 0 else 0.0
        return MetricRecord(v, v, v, v, v, acc, empty_gt=True)
    return MetricRecord(
        jac=tp / (tp + fp + fn),
        dice=2 * tp / (2 * tp + fp + fn),
        f2=5 * tp / (5 * tp + 4 * fn + fp),
        ppv=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn),
        accuracy=acc,
    )


def evaluate(pred, gt) -> MetricRecord:
    return metrics(confusion(pred, gt))


@dataclass
class SplitReport:
    split: str
    n: int
    mean: dict
    std: dict

    def row(self) -> list:
        out = [self.split, self.n]
        for m in METRICS:
            out += [self.mean[m], self.std[m]]
        return out


def aggregate(records, split: str) -> SplitReport:
    """Per-metric mean and population standard deviation over images."""
    records = list(records)
    if not records:
        raise ValueError(f"no records for split {split!r}")
    table = np.array([r.values() for r in records], dtype=np.float64)
    # sort each column so the report does not depend on record order
    table = np.sort(table, axis=0)
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    return SplitReport(split, len(records),
                       {m: float(v) for m, v in zip(METRICS, mean)},
                       {m: float(v) for m, v in zip(METRICS, std)})


REPORT_COLUMNS = ["split", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.split, r.n] + [f"{v:.6f}" for v in r.row()[2:]])
    return buf.getvalue()


def reports_from_csv(text: str) -> dict:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(REPORT_COLUMNS) - set(rows[0]):
        raise ValueError(f"report CSV lacks columns {sorted(set(REPORT_COLUMNS) - set(rows[0]))}")
    out = {}
    for row in rows:
        out[row["split"]] = SplitReport(
            row["split"], int(row["n"]),
            {m: float(row[f"{m}_mean"]) for m in METRICS},
            {m: float(row[f"{m}_std"]) for m in METRICS})
    return out


def _markdown(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    lines = [fmt(cells[0]), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt(r) for r in cells[1:]]
    return "\n".join(lines) + "\n"


def reports_to_markdown(reports) -> str:
    header = ["split", "n", "JAC", "Dice", "F2", "PPV", "Rec", "Acc"]
    rows = [[r.split, r.n] + [f"{r.mean[m]:.3f}±{r.std[m]:.3f}" for m in METRICS]
            for r in reports]
    return _markdown(header, rows)


# ---------------------------------------------------------------------------
# gaps between splits
# ---------------------------------------------------------------------------

@dataclass
class GapRow:
    method: str
    metric: str
    split_a: str
    split_b: str
    gap: float
    percent_decrease: float | None  # None for the baseline or an undefined ratio


def gap_report(reports: dict, baseline: str, pairs, metric_names=METRICS) -> list[GapRow]:
    """Per method/metric/pair gap = mean(A) - mean(B), with percent decrease vs baseline.

    ``reports`` maps method -> {split: SplitReport}.
    """
    if baseline not in reports:
        raise ValueError(f"baseline method {baseline!r} not among {sorted(reports)}")
    for method, splits in reports.items():
        for a, b in pairs:
            for s in (a, b):
                if s not in splits:
                    raise ValueError(f"method {method!r} has no split {s!r}")

    def gap(method, metric, a, b):
        return reports[method][a].mean[metric] - reports[method][b].mean[metric]

    rows = []
    for method in reports:
        for a, b in pairs:
            for metric in metric_names:
                g = gap(method, metric, a, b)
                pct = None
                if method != baseline:
                    gb = gap(baseline, metric, a, b)
                    if gb != 0:
                        pct = (gb - g) / abs(gb) * 100
                rows.append(GapRow(method, metric, a, b, g, pct))
    return rows


GAP_COLUMNS = ["method", "metric", "split_a", "split_b", "gap", "percent_decrease"]


def _pct(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def gap_to_csv(rows, baseline: str | None = None) -> str:
    """CSV gap table; the percent column is dropped when only the baseline is present."""
    with_pct = any(r.method != baseline for r in rows) if baseline else True
    cols = GAP_COLUMNS if with_pct else GAP_COLUMNS[:-1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        line = [r.method, r.metric, r.split_a, r.split_b, f"{r.gap:.6f}"]
        if with_pct:
            line.append("" if r.method == baseline else _pct(r.percent_decrease))
        w.writerow(line)
    return buf.getvalue()


def gap_to_markdown(rows, baseline: str | None = None) -> str:
    with_pct = any(r.method != baseline for r in rows) if baseline else True
    header = ["method", "metric", "pair", "gap"] + (["% decrease vs " + str(baseline)] if with_pct else [])
    body = []
    for r in rows:
        line = [r.method, r.metric, f"{r.split_a} vs {r.split_b}", f"{r.gap:.4f}"]
        if with_pct:
            line.append("-" if r.method == baseline else _pct(r.percent_decrease))
        body.append(line)
    return _markdown(header, body)
