"""Comparison learners sharing the same tensor stack and task streams.

* experts: one isolated network per task, task-aware eval, zero forgetting
  by construction.
* finetune: a single shared trunk with per-task heads, nothing frozen,
  nothing grown; the wide variant doubles the channel width.
* mntdp-lite: oracle-style search that extends the best prior path with
  fresh modules from the top, keeping the validation-best layout per task;
  stored layouts are task-addressed and old modules never retrain.
* lmc variants: the modular learner with eval-mode or gating flags.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .modules import ModuleCell, make_conv_cell, make_head_cell
from .network import ExpansionConfig, GatingConfig, LmcNetwork
from .optim import make_optimizer
from .records import RunRecord
from .taskgen import TaskStream, materialize
from .tensor import Tensor, cross_entropy, no_grad
from .training import TrainConfig, _batches, _normalized, evaluate, run_stream

LMC_KINDS = ("lmc-agnostic", "lmc-aware", "lmc-hard", "lmc-no-projection")
BASELINE_KINDS = LMC_KINDS + ("experts", "finetune", "finetune-wide", "mntdp-lite")

# a layout with more new modules must beat the incumbent by this much on
# validation accuracy; below that the tie resolves toward fewer modules
MNTDP_ACCEPT_MARGIN = 0.02


@dataclass
class NetParams:
    """Construction knobs shared by every learner for fair comparison."""

    input_shape: tuple = (3, 16, 16)
    depth: int = 4
    width: int = 16
    gating: GatingConfig = field(default_factory=GatingConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    stats_cfg: dict = field(default_factory=dict)
    seed: int = 0


def build_network(params: NetParams, with_structural: bool = True,
                  width_factor: float = 1.0,
                  structural_signal_into_functional: bool = True) -> LmcNetwork:
    return LmcNetwork(
        input_shape=params.input_shape,
        depth=params.depth,
        width=int(round(params.width * width_factor)),
        gating=GatingConfig(**params.gating.__dict__),
        expansion=ExpansionConfig(**params.expansion.__dict__),
        seed=params.seed,
        with_structural=with_structural,
        stats_cfg=dict(params.stats_cfg),
        structural_signal_into_functional=structural_signal_into_functional,
    )


def train_learner(kind: str, stream: TaskStream, cfg: TrainConfig,
                  params: NetParams) -> tuple[RunRecord, object]:
    """Train one learner kind on a stream; returns (record, trained model)."""
    if kind in LMC_KINDS:
        record, net = lmc_variant(stream, cfg, kind, params)
    elif kind == "experts":
        record, net = train_experts(stream, cfg, params)
    elif kind in ("finetune", "finetune-wide"):
        record, net = train_finetune(stream, cfg, params, wide=kind.endswith("wide"))
    elif kind == "mntdp-lite":
        record, net = mntdp_lite(stream, cfg, params)
    else:
        raise ContractError(f"unknown learner kind {kind!r}; known: {BASELINE_KINDS}")
    return record, net


# -- LMC variants --------------------------------------------------------------


def lmc_variant(stream: TaskStream, cfg: TrainConfig, kind: str,
                params: NetParams) -> tuple[RunRecord, LmcNetwork]:
    """aware/agnostic differ only at reporting time; hard swaps the gating;
    no-projection removes the projection phase and cuts the structural
    gradient into functional parameters."""
    if kind not in LMC_KINDS:
        raise ContractError(f"not an lmc variant: {kind!r}")
    cfg = copy.deepcopy(cfg)
    net_kwargs = {}
    if kind == "lmc-hard":
        params = copy.deepcopy(params)
        params.gating.hard = True
    if kind == "lmc-no-projection":
        cfg.projection_epochs = 0
        net_kwargs["structural_signal_into_functional"] = False
    net = build_network(params, **net_kwargs)
    record = run_stream(net, stream, cfg, learner=kind)
    return record, net


# -- experts ----------------------------------------------------------------------


def train_experts(stream: TaskStream, cfg: TrainConfig,
                  params: NetParams) -> tuple[RunRecord, list]:
    """An isolated single-column model per task; forgetting is identically
    zero because nothing is shared."""
    from .training import train_task

    tasks = materialize(stream)
    if cfg.normalize:
        tasks = [_normalized(t) for t in tasks]
    n = len(tasks)
    record = RunRecord.empty("experts", stream.kind, n, cfg.seed)
    record.task_names = [t.name for t in tasks]
    rng = np.random.default_rng(cfg.seed)
    started = time.perf_counter()
    experts = []
    diag = []
    for t, task in enumerate(tasks):
        expert_params = copy.deepcopy(params)
        expert_params.seed = params.seed + 1000 * t
        net = build_network(expert_params, with_structural=False)
        train_task(net, task, 0, cfg, rng, events=record.events)
        experts.append(net)
        diag.append(evaluate(net, task.x_test, task.y_test, task_id=0,
                             batch_size=cfg.batch_size))
        record.module_counts.append(params.depth * (t + 1))
        for j in range(t + 1):
            record.acc_aware[t, j] = diag[j]
    record.wall_clock = time.perf_counter() - started
    return record, experts


# -- finetune ------------------------------------------------------------------------


def train_finetune(stream: TaskStream, cfg: TrainConfig, params: NetParams,
                   wide: bool = False) -> tuple[RunRecord, LmcNetwork]:
    """One shared trunk, per-task heads, no freezing and no growth: the
    catastrophic-forgetting reference point."""
    net = build_network(params, with_structural=False,
                        width_factor=2.0 if wide else 1.0)
    record = run_stream(net, stream, cfg, learner="finetune-wide" if wide else "finetune",
                        freeze=False)
    return record, net


# -- mntdp-lite ------------------------------------------------------------------------


class PathModel:
    """Per-layer module pools with one stored path (and head) per task."""

    def __init__(self, params: NetParams):
        self.params = params
        self.rng = np.random.default_rng(params.seed)
        c, h, w = params.input_shape
        self.layer_in_channels = [c] + [params.width] * (params.depth - 1)
        self.head_features = params.width * (h // 2**params.depth) * (w // 2**params.depth)
        self.pools: list[list[ModuleCell]] = [[] for _ in range(params.depth)]
        self.layouts: dict[int, list[int]] = {}
        self.heads: dict[int, ModuleCell] = {}

    def new_cell(self, layer: int) -> ModuleCell:
        return make_conv_cell(self.layer_in_channels[layer], self.params.width,
                              0, self.rng, with_structural=False)

    def forward_cells(self, cells, head, x: Tensor, training: bool) -> Tensor:
        h = x
        for cell in cells:
            h = cell.functional.forward(h, training and not cell.frozen_functional)
        return head.functional.forward(h, training and not head.frozen_functional)

    def features(self, cells, x: np.ndarray, batch_size: int) -> np.ndarray:
        out = []
        with no_grad():
            for s in range(0, x.shape[0], batch_size):
                h = Tensor(x[s:s + batch_size])
                for cell in cells:
                    h = cell.functional.forward(h, training=False)
                out.append(h.data.reshape(h.shape[0], -1))
        return np.concatenate(out)

    def cells_for_layout(self, layout) -> list:
        return [self.pools[l][m] for l, m in enumerate(layout)]

    def path_accuracy(self, layout, task, batch_size: int) -> float:
        """Nearest-prototype accuracy of a stored path on a new task:
        class means from the train split, cosine distance on the val split."""
        cells = self.cells_for_layout(layout)
        f_train = self.features(cells, task.x_train, batch_size)
        f_val = self.features(cells, task.x_val, batch_size)
        protos = np.stack([f_train[task.y_train == c].mean(axis=0)
                           for c in range(task.classes)])
        protos = protos / (np.linalg.norm(protos, axis=1, keepdims=True) + 1e-12)
        f_val = f_val / (np.linalg.norm(f_val, axis=1, keepdims=True) + 1e-12)
        pred = (f_val @ protos.T).argmax(axis=1)
        return float((pred == task.y_val).mean())

    def module_count(self) -> int:
        return sum(len(p) for p in self.pools)


def _train_candidate(model: PathModel, base_layout, cut: Optional[int],
                     task, task_id: int, cfg: TrainConfig,
                     rng: np.random.Generator) -> dict:
    """Train a candidate layout: fresh modules at layers >= cut substituted
    into the base path (cut None reuses the whole path)."""
    depth = model.params.depth
    fresh_layers = [] if cut is None else list(range(cut, depth))
    cells = []
    for l in range(depth):
        if l in fresh_layers or base_layout is None:
            cells.append(model.new_cell(l))
        else:
            cells.append(model.pools[l][base_layout[l]])
    head = make_head_cell(model.head_features, task.classes, task_id, model.rng,
                          with_structural=False)
    trainable = [c for c in cells if not c.frozen_functional] + [head]
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    for _ in range(cfg.epochs):
        for xb, yb in _batches(task.x_train, task.y_train, cfg.batch_size, rng):
            logits = model.forward_cells(cells, head, Tensor(xb), training=True)
            loss = cross_entropy(logits, yb)
            loss.backward()
            params = [p for c in trainable for p in c.trainable_params()]
            opt.step(params)
            opt.zero_grad(params)
    correct, total = 0, 0
    with no_grad():
        for xb, yb in _batches(task.x_val, task.y_val, cfg.batch_size, None):
            logits = model.forward_cells(cells, head, Tensor(xb), training=False)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += len(yb)
    return {"cut": cut, "cells": cells, "head": head, "fresh_layers": fresh_layers,
            "val_acc": correct / max(total, 1), "new_modules": len(fresh_layers)}


def mntdp_lite(stream: TaskStream, cfg: TrainConfig,
               params: NetParams) -> tuple[RunRecord, PathModel]:
    tasks = materialize(stream)
    if cfg.normalize:
        tasks = [_normalized(t) for t in tasks]
    n = len(tasks)
    model = PathModel(params)
    record = RunRecord.empty("mntdp-lite", stream.kind, n, cfg.seed)
    record.task_names = [t.name for t in tasks]
    rng = np.random.default_rng(cfg.seed)
    started = time.perf_counter()
    depth = params.depth
    for t, task in enumerate(tasks):
        if t == 0:
            candidates = [_train_candidate(model, None, 0, task, t, cfg, rng)]
        else:
            scores = [(model.path_accuracy(model.layouts[j], task, cfg.batch_size), j)
                      for j in sorted(model.layouts)]
            best_prior = model.layouts[max(scores)[1]]
            # candidates ordered by growth; a later one must strictly win
            candidates = [_train_candidate(model, best_prior, None, task, t, cfg, rng)]
            for cut in range(depth - 1, -1, -1):
                candidates.append(_train_candidate(model, best_prior, cut, task, t, cfg, rng))
        candidates.sort(key=lambda c: c["new_modules"])
        best = candidates[0]
        for cand in candidates[1:]:
            if cand["val_acc"] > best["val_acc"] + MNTDP_ACCEPT_MARGIN:
                best = cand
        layout = []
        for l, cell in enumerate(best["cells"]):
            if l in best["fresh_layers"] or t == 0:
                cell.freeze("both")
                model.pools[l].append(cell)
                layout.append(len(model.pools[l]) - 1)
            else:
                layout.append(model.pools[l].index(cell))
        best["head"].freeze("both")
        model.heads[t] = best["head"]
        model.layouts[t] = layout
        record.events.append({"kind": "mntdp-layout", "task": t, "layout": layout,
                              "new_modules": best["new_modules"] if t else depth})
        record.module_counts.append(model.module_count())
        for j in range(t + 1):
            record.acc_aware[t, j] = evaluate_path(model, j, tasks[j], cfg.batch_size)
    record.wall_clock = time.perf_counter() - started
    return record, model


def evaluate_path(model: PathModel, task_id: int, task, batch_size: int = 64) -> float:
    cells = model.cells_for_layout(model.layouts[task_id])
    head = model.heads[task_id]
    correct = 0
    with no_grad():
        for s in range(0, task.x_test.shape[0], batch_size):
            logits = model.forward_cells(cells, head, Tensor(task.x_test[s:s + batch_size]),
                                         training=False)
            correct += int((logits.data.argmax(axis=1) == task.y_test[s:s + batch_size]).sum())
    return correct / max(len(task.y_test), 1)
