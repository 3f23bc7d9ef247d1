"""Accuracy, forgetting, drift and diversity metrics plus their serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from tppt.errors import ContractError

Snapshot = Mapping[int, np.ndarray]


def _check_matrix(matrix: Sequence[Sequence[float]]) -> list[list[float]]:
    rows = [list(map(float, r)) for r in matrix]
    if not rows:
        raise ContractError("empty accuracy matrix")
    for t, r in enumerate(rows, start=1):
        if len(r) != t:
            raise ContractError(f"row {t} of the accuracy matrix has {len(r)} entries, expected {t}")
    return rows


def summarize(stage_accuracies: Sequence[float]) -> tuple[float, float]:
    """Average accuracy over stages and final-stage accuracy."""
    acc = [float(a) for a in stage_accuracies]
    if not acc:
        raise ContractError("no stage accuracies")
    return sum(acc) / len(acc), acc[-1]


def forgetting(matrix: Sequence[Sequence[float]]) -> tuple[list[float], float]:
    """Per-task forgetting F_t and its average over all T tasks.

    ``F_t = 1/(t-1) * sum_{tau<t} max_{tau<=t'<t} (A[t'][tau] - A[t][tau])``; only
    stages that had already seen task tau enter the max.  ``F_1`` is 0.
    """
    rows = _check_matrix(matrix)
    per_task = [0.0]
    for t in range(2, len(rows) + 1):
        drops = []
        for tau in range(1, t):
            best = max(rows[tp - 1][tau - 1] for tp in range(tau, t))
            drops.append(best - rows[t - 1][tau - 1])
        per_task.append(sum(drops) / (t - 1))
    return per_task, sum(per_task) / len(per_task)


def representation_drift(snap_t: Snapshot, snap_prev: Snapshot) -> float:
    """Mean distance each previously seen class mean moved since the last stage."""
    if not snap_prev:
        raise ContractError("previous snapshot is empty")
    missing = set(snap_prev) - set(snap_t)
    if missing:
        raise ContractError(f"classes {sorted(missing)} vanished between stages")
    dists = [float(np.linalg.norm(np.asarray(snap_t[c]) - np.asarray(snap_prev[c])))
             for c in sorted(snap_prev)]
    return sum(dists) / len(dists)


def pairwise_diversity(snap: Snapshot) -> float:
    """Mean Euclidean distance over unordered pairs of class means."""
    keys = sorted(snap)
    if len(keys) < 2:
        raise ContractError("diversity needs at least two classes")
    means = np.stack([np.asarray(snap[c], dtype=np.float64) for c in keys])
    i, j = np.triu_indices(len(keys), k=1)
    return float(np.linalg.norm(means[i] - means[j], axis=1).mean())


def class_means(embeddings: np.ndarray, labels: np.ndarray, classes: Sequence[int]) -> dict[int, np.ndarray]:
    """Re-normalised mean of unit embeddings for each class in ``classes``."""
    out = {}
    for c in classes:
        sel = embeddings[labels == c]
        if len(sel) == 0:
            raise ContractError(f"no test embeddings for class {c}")
        m = sel.mean(axis=0)
        out[int(c)] = m / np.linalg.norm(m)
    return out


@dataclass
class MetricsLog:
    seed: int
    mode: str
    config: dict
    accuracy_matrix: list[list[float]] = field(default_factory=list)
    stage_accuracy: list[float] = field(default_factory=list)
    average_so_far: list[float] = field(default_factory=list)
    drift: list[float | None] = field(default_factory=list)
    diversity: list[float | None] = field(default_factory=list)
    forgetting_per_task: list[float] = field(default_factory=list)
    average_accuracy: float = float("nan")
    final_accuracy: float = float("nan")
    average_forgetting: float = float("nan")
    loss_curve: list[dict] = field(default_factory=list)
    task_classes: list[list[int]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=lambda: {
        "class_means": "unit-normalised mean of unit visual embeddings per class",
        "drift": "mean Euclidean distance between a class mean and its previous-stage value",
        "diversity": "mean Euclidean distance over unordered pairs of class means",
        "stage_accuracy": "accuracy over the pooled test data of all seen tasks",
    })

    def add_stage(self, row: Sequence[float], stage_acc: float, drift: float | None,
                  diversity: float | None) -> None:
        self.accuracy_matrix.append([float(a) for a in row])
        self.stage_accuracy.append(float(stage_acc))
        self.average_so_far.append(summarize(self.stage_accuracy)[0])
        self.drift.append(drift)
        self.diversity.append(diversity)
        self.finalize()

    def finalize(self) -> None:
        self.average_accuracy, self.final_accuracy = summarize(self.stage_accuracy)
        self.forgetting_per_task, self.average_forgetting = forgetting(self.accuracy_matrix)

    @property
    def mean_drift(self) -> float:
        vals = [d for d in self.drift[1:] if d is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    @property
    def final_diversity(self) -> float | None:
        return self.diversity[-1] if self.diversity else None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "mode": self.mode, "config": self.config,
            "accuracy_matrix": self.accuracy_matrix, "stage_accuracy": self.stage_accuracy,
            "average_so_far": self.average_so_far, "drift": self.drift,
            "diversity": self.diversity, "forgetting_per_task": self.forgetting_per_task,
            "average_accuracy": self.average_accuracy, "final_accuracy": self.final_accuracy,
            "average_forgetting": self.average_forgetting, "mean_drift": self.mean_drift,
            "loss_curve": self.loss_curve, "task_classes": self.task_classes,
            "extra": self.extra, "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsLog":
        log = cls(seed=d["seed"], mode=d["mode"], config=d["config"])
        for name in ("accuracy_matrix", "stage_accuracy", "average_so_far", "drift", "diversity",
                     "forgetting_per_task", "average_accuracy", "final_accuracy",
                     "average_forgetting", "loss_curve", "task_classes", "extra", "metadata"):
            setattr(log, name, d[name])
        return log

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsLog":
        return cls.from_dict(json.loads(text))

    def verify(self) -> bool:
        """True if stored summaries equal values recomputed from the matrix."""
        avg, final = summarize(self.stage_accuracy)
        per_task, avg_f = forgetting(self.accuracy_matrix)
        return (avg == self.average_accuracy and final == self.final_accuracy
                and per_task == list(self.forgetting_per_task) and avg_f == self.average_forgetting)

    # CSV artefacts ---------------------------------------------------------

    def accuracy_matrix_csv(self) -> str:
        T = len(self.accuracy_matrix)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage"] + [f"task_{i}" for i in range(1, T + 1)])
        for t, row in enumerate(self.accuracy_matrix, start=1):
            w.writerow([t] + [repr(a) for a in row] + [""] * (T - len(row)))
        return buf.getvalue()

    def stage_metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "stage_accuracy", "average_so_far", "drift", "diversity"])
        for t in range(len(self.stage_accuracy)):
            w.writerow([t + 1, repr(self.stage_accuracy[t]), repr(self.average_so_far[t]),
                        _fmt(self.drift[t]), _fmt(self.diversity[t])])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["average_accuracy", "final_accuracy", "average_forgetting"])
        w.writerow([repr(self.average_accuracy), repr(self.final_accuracy),
                    repr(self.average_forgetting)])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(self.to_json())
        (out / "accuracy_matrix.csv").write_text(self.accuracy_matrix_csv())
        (out / "stage_metrics.csv").write_text(self.stage_metrics_csv())
        (out / "summary.csv").write_text(self.summary_csv())


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def read_accuracy_matrix(path: str | Path) -> list[list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [[float(x) for x in r[1:] if x != ""] for r in rows[1:]]


def aggregate(logs: Sequence[MetricsLog]) -> dict[str, tuple[float, float]]:
    """Mean and population std across seeds of the headline metrics."""
    fields = {
        "average_accuracy": [l.average_accuracy for l in logs],
        "final_accuracy": [l.final_accuracy for l in logs],
        "average_forgetting": [l.average_forgetting for l in logs],
        "mean_drift": [l.mean_drift for l in logs],
        "final_drift": [l.drift[-1] if l.drift and l.drift[-1] is not None else math.nan for l in logs],
        "final_diversity": [l.final_diversity if l.final_diversity is not None else math.nan for l in logs],
    }
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in fields.items()}


def aggregate_csv(logs: Sequence[MetricsLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mean", "std", "n_seeds"])
    for k, (m, s) in aggregate(logs).items():
        w.writerow([k, repr(m), repr(s), len(logs)])
    return buf.getvalue()
