"""Two-phase continual training loop and evaluation harness.

Each task trains for a fixed number of epochs. Whenever the network
spawns a module, a projection phase starts: for the next ``projection_epochs``
epochs no further growth is allowed and the loss is the structural term
(optionally plus the task loss), which drives the fresh module to emit
representations the frozen modules above it expect. Otherwise the loss is
task cross-entropy plus the accumulated structural loss.

Freezing schedule: when task t starts, everything born before t is frozen
completely (parameters and batch norms); when task t ends, the structural
parameters of every module are fixed so relatedness scores stay put.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .network import LmcNetwork
from .optim import make_optimizer
from .taskgen import Task, TaskStream, materialize
from .tensor import Tensor, cross_entropy, no_grad


@dataclass
class TrainConfig:
    epochs: int = 20
    projection_epochs: int = 5  # 0 disables the projection phase entirely
    functional_in_projection: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    structural_weight: float = 1.0
    seed: int = 0
    normalize: bool = False  # per-task input normalization (off by default)

    def validate(self):
        if self.projection_epochs < 0:
            raise ContractError("projection_epochs must be >= 0")
        if self.epochs > 0 and self.projection_epochs >= self.epochs:
            raise ContractError("projection_epochs must be smaller than epochs")


@dataclass
class PhaseState:
    """Tracks whether a projection phase is active within the current task."""

    last_addition_epoch: Optional[int] = None

    def note_addition(self, epoch: int) -> None:
        self.last_addition_epoch = epoch

    def in_projection(self, epoch: int, projection_epochs: int) -> bool:
        if self.last_addition_epoch is None or projection_epochs <= 0:
            return False
        return (epoch - self.last_addition_epoch) < projection_epochs


@dataclass
class TaskReport:
    task_id: int
    epochs: int
    expansions: list
    epoch_losses: list
    train_accuracy: float
    val_accuracy: float


def _batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: Optional[np.random.Generator]):
    n = x.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def _normalized(task: Task) -> Task:
    mu = task.x_train.mean(axis=(0, 2, 3), keepdims=True)
    sd = task.x_train.std(axis=(0, 2, 3), keepdims=True) + 1e-6
    return Task(task.spec,
                (task.x_train - mu) / sd, task.y_train,
                (task.x_val - mu) / sd, task.y_val,
                (task.x_test - mu) / sd, task.y_test)


def assemble_loss(trace, logits, labels, in_projection: bool,
                  functional_in_projection: bool,
                  structural_weight: float = 1.0) -> Tensor:
    """Loss for one step: structural-only during projection (plus the task
    term when configured), task term plus structural otherwise.

    The trace accumulates the structural loss as a sum over the batch; the
    step loss divides it by the batch extent so both terms are per-sample
    expectations and neither drowns the other in the shared gradients.
    """
    batch = logits.shape[0]
    structural = trace.structural_loss * (structural_weight / batch)
    if in_projection:
        loss = structural
        if functional_in_projection:
            loss = loss + cross_entropy(logits, labels)
        return loss
    return cross_entropy(logits, labels) + structural


def train_task(net: LmcNetwork, task: Task, task_id: int, cfg: TrainConfig,
               rng: np.random.Generator, events: Optional[list] = None,
               freeze: bool = True) -> TaskReport:
    cfg.validate()
    if task.x_train.shape[0] == 0:
        raise ContractError(f"task {task_id} has an empty training split")
    events = events if events is not None else []

    # freeze everything born before this task: parameters and batch norms
    if freeze and task_id > 0:
        for cell in net.all_cells():
            if cell.birth_task < task_id and not cell.fully_frozen:
                cell.freeze("both")
        events.append({"kind": "freeze", "scope": "pre-task", "task": task_id})
    if task_id not in net.heads:
        net.add_head(task_id, task.classes)

    opt = make_optimizer(cfg.optimizer, cfg.lr)
    phase = PhaseState()
    expansions = []
    epoch_losses = []
    net.train()
    for epoch in range(cfg.epochs):
        step_losses = []
        for xb, yb in _batches(task.x_train, task.y_train, cfg.batch_size, rng):
            in_proj = phase.in_projection(epoch, cfg.projection_epochs)
            allow_expansion = task_id > 0 and not in_proj
            logits, trace = net.forward(Tensor(xb), task_id=task_id,
                                        allow_expansion=allow_expansion)
            if trace.events:
                phase.note_addition(epoch)
                for ev in trace.events:
                    ev = dict(ev, task=task_id, epoch=epoch)
                    expansions.append(ev)
                    events.append(ev)
                in_proj = phase.in_projection(epoch, cfg.projection_epochs)
            loss = assemble_loss(trace, logits, yb, in_proj,
                                 cfg.functional_in_projection, cfg.structural_weight)
            loss.backward()
            params = net.trainable_params()
            opt.step(params)
            opt.zero_grad(params)
            step_losses.append(loss.item())
        epoch_losses.append(float(np.mean(step_losses)))

    # end of task: relatedness scorers stop moving for every module
    if freeze:
        for cell in net.all_cells():
            cell.freeze("structural")
        events.append({"kind": "freeze", "scope": "structural", "task": task_id})

    train_acc = evaluate(net, task.x_train, task.y_train, task_id=task_id,
                         batch_size=cfg.batch_size)
    val_acc = evaluate(net, task.x_val, task.y_val, task_id=task_id,
                       batch_size=cfg.batch_size)
    net.train()
    return TaskReport(task_id, cfg.epochs, expansions, epoch_losses, train_acc, val_acc)


def evaluate(net: LmcNetwork, x: np.ndarray, y: np.ndarray,
             task_id: Optional[int] = None, batch_size: int = 64,
             forced_route: Optional[list] = None) -> float:
    """Accuracy; ``task_id`` picks the head (task-aware), None lets the
    heads compete (task-agnostic). Expansion never runs in eval mode."""
    was_training = net.training
    net.eval()
    correct = 0
    with no_grad():
        for xb, yb in _batches(x, y, batch_size, rng=None):
            logits, _ = net.forward(Tensor(xb), task_id=task_id, forced_route=forced_route)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    if was_training:
        net.train()
    return correct / max(len(y), 1)


def head_selection_rate(net: LmcNetwork, x: np.ndarray, expected_head: int,
                        batch_size: int = 64) -> float:
    """Fraction of batches whose agnostic head choice equals ``expected_head``."""
    was_training = net.training
    net.eval()
    hits, total = 0, 0
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            _, trace = net.forward(Tensor(x[start:start + batch_size]), task_id=None)
            hits += trace.selected_head == expected_head
            total += 1
    if was_training:
        net.train()
    return hits / max(total, 1)


def run_stream(net: LmcNetwork, stream: TaskStream, cfg: TrainConfig,
               learner: str = "lmc", freeze: bool = True) -> "RunRecord":
    """Train the stream in order; after each task, evaluate every seen task
    in both task-aware and task-agnostic modes."""
    from .records import RunRecord  # local import to avoid a cycle

    tasks = materialize(stream)
    if cfg.normalize:
        tasks = [_normalized(t) for t in tasks]
    n = len(tasks)
    rng = np.random.default_rng(cfg.seed)
    record = RunRecord.empty(learner=learner, stream_kind=stream.kind, n_tasks=n,
                             seed=cfg.seed)
    record.task_names = [t.name for t in tasks]
    started = time.perf_counter()
    for t, task in enumerate(tasks):
        report = train_task(net, task, t, cfg, rng, events=record.events, freeze=freeze)
        record.task_reports.append(report)
        record.module_counts.append(net.module_count())
        net.eval()
        record.selection_maps_train[t] = net.selection_map(
            _eval_batches(task.x_test, cfg.batch_size))
        for j in range(t + 1):
            record.acc_aware[t, j] = evaluate(net, tasks[j].x_test, tasks[j].y_test,
                                              task_id=j, batch_size=cfg.batch_size)
            if net.with_structural:
                record.acc_agnostic[t, j] = evaluate(net, tasks[j].x_test, tasks[j].y_test,
                                                     task_id=None, batch_size=cfg.batch_size)
        net.train()
    net.eval()
    for j, task in enumerate(tasks):
        record.selection_maps_final[j] = net.selection_map(
            _eval_batches(task.x_test, cfg.batch_size))
        if net.with_structural:
            record.head_selection_final[j] = head_selection_rate(net, task.x_test, j,
                                                                 cfg.batch_size)
    record.wall_clock = time.perf_counter() - started
    return record


def _eval_batches(x: np.ndarray, batch_size: int):
    return [x[s:s + batch_size] for s in range(0, x.shape[0], batch_size)]
