"""Top-1 accuracy, the accuracy matrix and Avg / Last / forgetting summaries."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import no_grad


class AccuracyMatrix:
    """``rows[i][k]``: accuracy on task k's test set after training task i (k <= i)."""

    def __init__(self, rows=None):
        self.rows = [list(map(float, r)) for r in (rows or [])]
        self.validate()

    def validate(self):
        for i, r in enumerate(self.rows):
            if len(r) != i + 1:
                raise ContractError(f"row {i} has {len(r)} entries, expected {i + 1}")
            for a in r:
                if not 0.0 <= a <= 1.0:
                    raise ContractError(f"accuracy {a} outside [0, 1]")

    def append(self, row):
        self.rows.append([float(a) for a in row])
        self.validate()

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", "eval_task", "top1"])
        for i, r in enumerate(self.rows):
            for k, a in enumerate(r):
                w.writerow([i, k, repr(a)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = {}
        for rec in csv.DictReader(io.StringIO(text)):
            rows.setdefault(int(rec["after_task"]), {})[int(rec["eval_task"])] = float(rec["top1"])
        out = []
        for i in range(len(rows)):
            if i not in rows:
                raise ContractError(f"missing rows for after_task={i}")
            out.append([rows[i][k] for k in range(len(rows[i]))])
        return cls(out)


@dataclass
class SummaryMetrics:
    avg: float
    last: float
    forgetting: list
    trainable_params: int = 0


def summarize(matrix: AccuracyMatrix, trainable_params=0) -> SummaryMetrics:
    """Avg: mean over steps of the mean accuracy on tasks seen so far.
    Last: mean accuracy over all tasks after the final one.
    forgetting[k]: best accuracy ever reached on task k minus its final accuracy."""
    if not isinstance(matrix, AccuracyMatrix):
        matrix = AccuracyMatrix(matrix)
    rows = matrix.rows
    if not rows:
        raise ContractError("empty accuracy matrix")
    t = len(rows) - 1
    avg = sum(sum(r) / len(r) for r in rows) / len(rows)
    last = sum(rows[t]) / len(rows[t])
    forgetting = [max(rows[i][k] for i in range(k, t + 1)) - rows[t][k] for k in range(t + 1)]
    return SummaryMetrics(avg, last, forgetting, trainable_params)


def predict(model, images, task_index, batch_size=256, threads=1):
    """Argmax of the task head's logits; np.argmax breaks ties toward index 0."""
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]

    def run(chunk):
        with no_grad():
            return np.argmax(model.full_forward(chunk, task_index, training=False).data, axis=1)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def top1(model, test_set, task_index, threads=1) -> float:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    head = model.heads[task_index]
    truth = head.local_labels(test_set.labels)
    return float(np.mean(predict(model, test_set.images, task_index, threads=threads) == truth))


def top1_from_logits(logits, labels) -> float:
    logits = np.asarray(logits)
    if len(logits) == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
