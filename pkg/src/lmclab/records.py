"""RunRecord: everything one experiment run produced, persisted as a directory.

Layout:

    summary.txt           key: value metric lines
    config.txt            dotted-key config echo
    acc_matrix_aware.csv  lower-triangular accuracy matrix
    acc_matrix_agnostic.csv
    module_counts.csv
    events.log            one structured line per expansion/freeze event
    selection_maps/       portable tensor files, train-time and final maps
    network/              serialized network (manifest + parameters)

Plots are views over these files and never the only copy of a number.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .tensorfile import load_tensor, save_tensor


@dataclass
class RunRecord:
    learner: str
    stream_kind: str
    seed: int
    acc_aware: np.ndarray
    acc_agnostic: np.ndarray
    module_counts: list = field(default_factory=list)
    events: list = field(default_factory=list)
    selection_maps_train: dict = field(default_factory=dict)
    selection_maps_final: dict = field(default_factory=dict)
    head_selection_final: dict = field(default_factory=dict)
    task_reports: list = field(default_factory=list)
    task_names: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @classmethod
    def empty(cls, learner: str, stream_kind: str, n_tasks: int, seed: int) -> "RunRecord":
        return cls(learner=learner, stream_kind=stream_kind, seed=seed,
                   acc_aware=np.full((n_tasks, n_tasks), np.nan),
                   acc_agnostic=np.full((n_tasks, n_tasks), np.nan))

    @property
    def n_tasks(self) -> int:
        return self.acc_aware.shape[0]

    def summary(self) -> dict:
        agnostic = self.acc_agnostic if not np.isnan(self.acc_agnostic[-1]).all() else None
        out = metrics.summarize(self.acc_aware, agnostic, self.module_counts)
        out["learner"] = self.learner
        out["stream"] = self.stream_kind
        out["seed"] = self.seed
        out["tasks"] = self.n_tasks
        out["expansions"] = sum(1 for e in self.events if e.get("kind") == "expansion")
        out["wall_clock_s"] = round(self.wall_clock, 3)
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_matrix_csv(directory / "acc_matrix_aware.csv", self.acc_aware, self.task_names)
        _write_matrix_csv(directory / "acc_matrix_agnostic.csv", self.acc_agnostic, self.task_names)
        with open(directory / "module_counts.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["after_task", "modules"])
            for i, m in enumerate(self.module_counts):
                writer.writerow([i, m])
        with open(directory / "events.log", "w") as fh:
            for event in self.events:
                fh.write(json.dumps(event) + "\n")
        maps_dir = directory / "selection_maps"
        maps_dir.mkdir(exist_ok=True)
        for t, arr in self.selection_maps_train.items():
            save_tensor(maps_dir / f"task{t}_train.lmct", arr)
        for t, arr in self.selection_maps_final.items():
            save_tensor(maps_dir / f"task{t}_final.lmct", arr)
        summary = self.summary()
        with open(directory / "summary.txt", "w") as fh:
            for key in sorted(summary):
                fh.write(f"{key}: {summary[key]}\n")
            for t, rate in sorted(self.head_selection_final.items()):
                fh.write(f"head_selection_match.task{t}: {rate}\n")
        with open(directory / "config.txt", "w") as fh:
            for key in sorted(self.config_echo):
                fh.write(f"{key} = {self.config_echo[key]}\n")
        meta = {"learner": self.learner, "stream_kind": self.stream_kind,
                "seed": self.seed, "task_names": self.task_names,
                "wall_clock": self.wall_clock,
                "head_selection_final": {str(k): v for k, v in self.head_selection_final.items()}}
        (directory / "meta.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        acc_aware = _read_matrix_csv(directory / "acc_matrix_aware.csv")
        acc_agnostic = _read_matrix_csv(directory / "acc_matrix_agnostic.csv")
        record = cls(learner=meta["learner"], stream_kind=meta["stream_kind"],
                     seed=meta["seed"], acc_aware=acc_aware, acc_agnostic=acc_agnostic)
        record.task_names = meta["task_names"]
        record.wall_clock = meta["wall_clock"]
        record.head_selection_final = {int(k): v for k, v in meta.get("head_selection_final", {}).items()}
        with open(directory / "module_counts.csv") as fh:
            record.module_counts = [int(row["modules"]) for row in csv.DictReader(fh)]
        events_path = directory / "events.log"
        if events_path.exists():
            record.events = [json.loads(line) for line in events_path.read_text().splitlines() if line]
        maps_dir = directory / "selection_maps"
        if maps_dir.exists():
            for path in maps_dir.glob("task*_train.lmct"):
                t = int(path.stem.split("_")[0][4:])
                record.selection_maps_train[t] = load_tensor(path)
            for path in maps_dir.glob("task*_final.lmct"):
                t = int(path.stem.split("_")[0][4:])
                record.selection_maps_final[t] = load_tensor(path)
        config_path = directory / "config.txt"
        if config_path.exists():
            for line in config_path.read_text().splitlines():
                if " = " in line:
                    key, value = line.split(" = ", 1)
                    record.config_echo[key] = value
        return record


def _write_matrix_csv(path, matrix: np.ndarray, task_names: list) -> None:
    n = matrix.shape[0]
    names = task_names if len(task_names) == n else [f"task{j}" for j in range(n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["after_task"] + names)
        for i in range(n):
            row = [i] + ["" if np.isnan(matrix[i, j]) else f"{matrix[i, j]:.6f}" for j in range(n)]
            writer.writerow(row)


def _read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    n = len(rows) - 1
    matrix = np.full((n, n), np.nan)
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:]):
            if cell:
                matrix[i, j] = float(cell)
    return matrix
