"""Continual-learning metrics over the loss matrix, run reports and file export.

``LossMatrix.values[t, i]`` is the held-out NLL of task ``i`` after finishing
task ``t`` (0-based, ``i <= t``), averaged over clients.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError

REPORT_VERSION = 1
METRICS_COLUMNS = ("t", "metric", "value")
LOSS_MATRIX_COLUMNS = ("t", "i", "nll")
ALPHA_COLUMNS = ("client", "task", "source_client", "source_task", "layer", "value")


class LossMatrix:
    def __init__(self, n_tasks, values=None):
        self.n_tasks = int(n_tasks)
        if values is None:
            values = np.full((self.n_tasks, self.n_tasks), np.nan)
        self.values = np.array(values, dtype=np.float64)
        if self.values.shape != (self.n_tasks, self.n_tasks):
            raise ValidationError(f"loss matrix must be {self.n_tasks}x{self.n_tasks}")
        if np.isfinite(self.values[np.triu_indices(self.n_tasks, 1)]).any():
            raise ValidationError("loss matrix has entries above the diagonal")

    def set(self, t, i, value):
        if not 0 <= i <= t < self.n_tasks:
            raise ValidationError(f"loss matrix entry ({t}, {i}) is outside the lower triangle")
        if not np.isfinite(value):
            raise ValidationError(f"loss matrix entry ({t}, {i}) is not finite: {value}")
        self.values[t, i] = float(value)

    def set_row(self, t, row):
        for i, v in enumerate(row):
            self.set(t, i, v)

    @property
    def completed(self):
        """Number of leading rows that are fully filled."""
        n = 0
        for t in range(self.n_tasks):
            if not np.isfinite(self.values[t, :t + 1]).all():
                break
            n += 1
        return n

    def entries(self):
        return [(t, i, float(self.values[t, i]))
                for t in range(self.n_tasks) for i in range(t + 1)
                if np.isfinite(self.values[t, i])]

    def to_list(self):
        return [[float(v) if np.isfinite(v) else None for v in row] for row in self.values]

    @classmethod
    def from_list(cls, rows):
        return cls(len(rows), [[np.nan if v is None else v for v in row] for row in rows])

    @classmethod
    def from_entries(cls, n_tasks, entries):
        lm = cls(n_tasks)
        for t, i, v in entries:
            lm.set(int(t), int(i), float(v))
        return lm


def _values(lm):
    return lm.values if isinstance(lm, LossMatrix) else np.asarray(lm, dtype=np.float64)


def avg_task_nll(lm, t):
    """Mean over tasks ``0..t`` of their NLL after task ``t``."""
    v = _values(lm)
    return float(np.mean(v[t, :t + 1]))


def base_task_loss(lm, t):
    return float(_values(lm)[t, 0])


def new_task_loss(lm, t):
    return float(_values(lm)[t, t])


def avg_forgetting(lm, T=None, literal=False):
    """Average forgetting after the last of ``T`` tasks; returns ``(value, defined)``.

    Default: for each earlier task, final NLL minus the best (lowest) NLL it had
    after any earlier task boundary, clipped at 0. ``literal=True`` instead
    clips the best-earlier-minus-final difference, which measures improvement.
    With fewer than two tasks forgetting is undefined and ``(0.0, False)`` is
    returned.
    """
    v = _values(lm)
    T = v.shape[0] if T is None else int(T)
    if T < 2:
        return 0.0, False
    final = T - 1
    total = 0.0
    for i in range(T - 1):
        earlier = v[i:final, i]
        if literal:
            total += max(0.0, float(np.max(earlier - v[final, i])))
        else:
            total += max(0.0, float(v[final, i] - np.min(earlier)))
    return total / (T - 1), True


def summarize(lm: LossMatrix, literal_forgetting=False):
    per_task = []
    for t in range(lm.completed):
        per_task.append({"t": t, "avg_task_nll": avg_task_nll(lm, t),
                         "base_task_loss": base_task_loss(lm, t),
                         "new_task_loss": new_task_loss(lm, t)})
    T = lm.completed
    forgetting, defined = avg_forgetting(lm.values[:T, :T], T, literal_forgetting)
    summary = {"avg_task_nll": avg_task_nll(lm, T - 1) if T else None,
               "avg_forgetting": forgetting, "forgetting_defined": defined,
               "literal_forgetting": bool(literal_forgetting)}
    return {"per_task": per_task, "summary": summary}


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    method_spec: dict
    loss_matrix: LossMatrix
    alpha: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    literal_forgetting: bool = False

    @property
    def metrics(self):
        return summarize(self.loss_matrix, self.literal_forgetting)

    @property
    def forgetting(self):
        return self.metrics["summary"]["avg_forgetting"]

    @property
    def final_nll(self):
        return self.metrics["summary"]["avg_task_nll"]

    def to_dict(self):
        """Everything except wall-clock time, which is exported separately."""
        return {
            "version": REPORT_VERSION,
            "method": self.method,
            "seed": int(self.seed),
            "config": self.config,
            "method_spec": self.method_spec,
            "loss_matrix": self.loss_matrix.to_list(),
            "metrics": self.metrics,
            "alpha": self.alpha,
            "communication": self.ledger.get("totals", {}),
            "warnings": list(self.warnings),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["method"], d["seed"], d["config"], d["method_spec"],
                   LossMatrix.from_list(d["loss_matrix"]), d.get("alpha", []),
                   {"totals": d.get("communication", {})}, d.get("warnings", []),
                   literal_forgetting=d["metrics"]["summary"].get("literal_forgetting", False))


def _csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def metrics_csv(report: RunReport):
    m = report.metrics
    rows = []
    for row in m["per_task"]:
        for name in ("avg_task_nll", "base_task_loss", "new_task_loss"):
            rows.append((row["t"], name, row[name]))
    if m["per_task"]:
        rows.append((m["per_task"][-1]["t"], "avg_forgetting", m["summary"]["avg_forgetting"]))
    return _csv(METRICS_COLUMNS, rows)


def loss_matrix_csv(lm: LossMatrix):
    return _csv(LOSS_MATRIX_COLUMNS, lm.entries())


def alpha_csv(rows):
    return _csv(ALPHA_COLUMNS, [tuple(r[c] for c in ALPHA_COLUMNS) for r in rows])


def read_loss_matrix_csv(path, n_tasks=None):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    entries = [(int(r["t"]), int(r["i"]), float(r["nll"])) for r in rows]
    if n_tasks is None:
        n_tasks = 1 + max((t for t, _, _ in entries), default=-1)
    return LossMatrix.from_entries(n_tasks, entries)


def export(report: RunReport, out_dir):
    """Write metrics.csv, loss_matrix.csv, alpha.csv, ledger.json, report.json and timing.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics.csv": metrics_csv(report),
        "loss_matrix.csv": loss_matrix_csv(report.loss_matrix),
        "alpha.csv": alpha_csv(report.alpha),
        "ledger.json": json.dumps(report.ledger, sort_keys=True, indent=1) + "\n",
        "report.json": report.to_json(),
        "timing.json": json.dumps(report.wall_clock, sort_keys=True, indent=2) + "\n",
    }
    for name, text in files.items():
        (out / name).write_text(text)
    return {name: out / name for name in files}


def load_report(path):
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return RunReport.from_dict(json.loads(path.read_text()))


def compare(reports):
    """One comparison row per report."""
    rows = []
    for r in reports:
        s = r.metrics["summary"]
        comm = r.ledger.get("totals", {})
        rows.append({"method": r.method, "seed": r.seed,
                     "avg_task_nll": s["avg_task_nll"], "avg_forgetting": s["avg_forgetting"],
                     "communication": comm.get("total", 0)})
    return rows
