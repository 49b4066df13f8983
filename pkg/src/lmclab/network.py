"""Layered composition of module cells with local routing.

Every trunk layer holds one or more cells; a forward pass evaluates each
cell once, turns the per-sample relatedness scores into mixing weights,
and emits the weighted sum of the functional outputs. Weights are treated
as constants in the backward pass so each structural scorer learns only
from its own loss and no cross-module coupling leaks through the softmax.

Outlier pressure grows the network: when every cell at a layer flags the
batch (mean z above the threshold), that layer is frozen and a fresh cell
is appended. Only the layer closest to the input may grow per forward
pass, a layer gains at most one cell per task, and nothing grows during
the first task or while a projection phase is active.

Output heads are per-task cells kept in a separate registry. Training
always routes through the head of the task being learned; task-agnostic
evaluation scores every head on the trunk output and hard-selects the
best one per batch.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CombineError, ContractError, ParameterError
from .modules import ModuleCell, ScoreStats, make_conv_cell, make_head_cell
from .tensor import Tensor, no_grad
from .tensorfile import load_tensor, save_tensor


@dataclass
class GatingConfig:
    """Softmax routing knobs.

    ``batched`` biases each sample's weights toward the batch-average
    selection (computed at temperature ``tau_prime``); ``hard`` replaces
    the softmax with a per-sample one-hot argmax at every layer.
    """

    tau: float = 1.0
    tau_prime: float = 1.0
    batched: bool = True
    hard: bool = False

    def validate(self):
        if self.tau <= 0 or self.tau_prime <= 0:
            raise ParameterError(f"gating temperatures must be positive, got tau={self.tau}, tau_prime={self.tau_prime}")


@dataclass
class ExpansionConfig:
    """Outlier-triggered growth knobs. ``per_batch``: average z over the
    batch before comparing against the threshold."""

    z_threshold: float = 2.0
    per_batch: bool = True


def _softmax_cols(scores: np.ndarray, tau: float) -> np.ndarray:
    scaled = scores / tau
    scaled = scaled - scaled.max(axis=0, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=0, keepdims=True)


def gate_weights(scores: np.ndarray, cfg: GatingConfig) -> np.ndarray:
    """Mixing weights [M,B] from relatedness scores [M,B]; columns sum to 1."""
    cfg.validate()
    m, b = scores.shape
    if m == 1:
        return np.ones((1, b))
    if cfg.hard:
        w = np.zeros((m, b))
        w[scores.argmax(axis=0), np.arange(b)] = 1.0
        return w
    w = _softmax_cols(scores, cfg.tau)
    if cfg.batched:
        mean_sel = _softmax_cols(scores, cfg.tau_prime).mean(axis=1, keepdims=True)
        w = w * mean_sel
        w = w / w.sum(axis=0, keepdims=True)
    return w


@dataclass
class LayerRecord:
    """Per-layer trace of one forward pass."""

    scores: np.ndarray       # [M,B] relatedness
    weights: np.ndarray      # [M,B] final mixing weights
    mean_z: np.ndarray       # [M] batch-mean outlier z per cell
    expanded: bool = False


@dataclass
class HeadRecord:
    task_ids: list
    scores: np.ndarray
    weights: np.ndarray


@dataclass
class ForwardTrace:
    layer_records: list = field(default_factory=list)
    head_record: Optional[HeadRecord] = None
    structural_loss: Optional[Tensor] = None
    selected_head: Optional[int] = None
    events: list = field(default_factory=list)

    def recompute_structural_loss(self) -> float:
        """Re-derive the accumulated structural loss from the trace."""
        total = 0.0
        for rec in self.layer_records:
            total += float((-rec.scores * rec.weights).sum())
        if self.head_record is not None:
            total += float((-self.head_record.scores * self.head_record.weights).sum())
        return total


class Layer:
    """Ordered cells sharing one input shape; never fewer than one cell."""

    def __init__(self, index: int, cells: list[ModuleCell]):
        self.index = index
        self.cells = cells

    def __len__(self):
        return len(self.cells)


class LmcNetwork:
    """The composed modular network; owns forward, growth and head logic."""

    def __init__(self, input_shape=(3, 16, 16), depth: int = 4, width: int = 16,
                 gating: Optional[GatingConfig] = None,
                 expansion: Optional[ExpansionConfig] = None,
                 seed: int = 0, with_structural: bool = True,
                 stats_cfg: Optional[dict] = None,
                 structural_signal_into_functional: bool = True):
        self.input_shape = tuple(input_shape)
        self.depth = depth
        self.width = width
        self.gating = gating or GatingConfig()
        self.expansion = expansion or ExpansionConfig()
        self.seed = seed
        self.with_structural = with_structural
        self.stats_cfg = stats_cfg or {}
        self.structural_signal_into_functional = structural_signal_into_functional
        self.rng = np.random.default_rng(seed)
        self.training = True

        c, h, w = self.input_shape
        if h % (2**depth) or w % (2**depth):
            raise ParameterError(f"input extent {h}x{w} must be divisible by 2^depth={2**depth}")
        self._layer_in_channels = [c] + [width] * (depth - 1)
        self.head_features = width * (h // 2**depth) * (w // 2**depth)
        self.layers = [
            Layer(l, [make_conv_cell(self._layer_in_channels[l], width, 0, self.rng,
                                     with_structural, self.stats_cfg,
                                     not structural_signal_into_functional)])
            for l in range(depth)
        ]
        self.heads: dict[int, ModuleCell] = {}

    # -- mode -----------------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # -- heads -----------------------------------------------------------------

    def add_head(self, task_id: int, classes: int) -> None:
        if task_id in self.heads:
            raise ContractError(f"head for task {task_id} already exists")
        self.heads[task_id] = make_head_cell(self.head_features, classes, task_id,
                                             self.rng, self.with_structural, self.stats_cfg,
                                             not self.structural_signal_into_functional)

    # -- growth ------------------------------------------------------------------

    def _spawn_cell(self, layer_index: int, birth_task: int) -> ModuleCell:
        cell = make_conv_cell(self._layer_in_channels[layer_index], self.width,
                              birth_task, self.rng, self.with_structural, self.stats_cfg,
                              not self.structural_signal_into_functional)
        self.layers[layer_index].cells.append(cell)
        return cell

    def module_count(self) -> int:
        """Trunk cell count; output heads are not included."""
        return sum(len(layer) for layer in self.layers)

    def trainable_params(self):
        params = []
        for layer in self.layers:
            for cell in layer.cells:
                params += cell.trainable_params()
        for head in self.heads.values():
            params += head.trainable_params()
        return params

    def all_cells(self):
        for layer in self.layers:
            yield from layer.cells
        yield from self.heads.values()

    # -- forward -----------------------------------------------------------------

    def forward(self, x: Tensor, task_id: Optional[int] = None,
                allow_expansion: bool = False,
                forced_route: Optional[list] = None) -> tuple[Tensor, ForwardTrace]:
        """Run the network; returns (logits, trace).

        Training mode requires ``task_id`` (its head is used and outlier
        masking applies to cells born in that task). In eval mode a given
        ``task_id`` selects the head directly; ``task_id=None`` selects the
        head with the highest mean activation weight for the batch.
        ``forced_route`` pins one cell index per trunk layer and bypasses
        gating entirely.
        """
        if self.training and task_id is None:
            raise ContractError("training-mode forward requires a task id")
        if x.shape[1:] != self.input_shape:
            raise ContractError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        if x.shape[0] == 0:
            raise ContractError("forward needs a non-empty batch")
        trace = ForwardTrace()
        l_str = Tensor(0.0)
        current_task = task_id if self.training else None
        expansion_armed = (self.training and allow_expansion
                           and current_task is not None and current_task > 0)

        for layer in self.layers:
            if forced_route is not None:
                x, contrib = self._forced_layer(layer, x, forced_route[layer.index])
            else:
                x, contrib, expansion_armed = self._layer_forward(
                    layer, x, current_task, expansion_armed, trace)
            l_str = l_str + contrib

        logits, head_contrib = self._head_forward(x, task_id, trace)
        l_str = l_str + head_contrib
        trace.structural_loss = l_str
        return logits, trace

    def _forced_layer(self, layer: Layer, x: Tensor, cell_index: int):
        cell = layer.cells[cell_index]
        out = cell.functional.forward(x, self.training and not cell.frozen_functional)
        return out, Tensor(0.0)

    def _layer_forward(self, layer: Layer, x: Tensor, current_task, expansion_armed, trace):
        training = self.training
        batch = x.shape[0]

        def evaluate(cells):
            scores, outs = [], []
            for cell in cells:
                s, f = cell.relatedness(x, training)
                scores.append(s)
                outs.append(f)
            return scores, outs, np.stack([s.data for s in scores])

        def z_matrix(cells, loss_mat):
            return np.stack([c.stats.z_scores(loss_mat[i]) for i, c in enumerate(cells)])

        scores, outs, score_mat = evaluate(layer.cells)
        loss_mat = -score_mat
        z_mat = z_matrix(layer.cells, loss_mat)

        expanded = False
        guard = current_task is not None and current_task > 0
        if expansion_armed and guard:
            born_here = any(c.birth_task == current_task for c in layer.cells)
            if not born_here and self._outlier_trigger(z_mat):
                for cell in layer.cells:
                    cell.freeze("both")
                self._spawn_cell(layer.index, current_task)
                expanded = True
                trace.events.append({"kind": "expansion", "layer": layer.index,
                                     "cells": len(layer.cells)})
                # the fresh cell participates immediately
                scores, outs, score_mat = evaluate(layer.cells)
                loss_mat = -score_mat
                z_mat = z_matrix(layer.cells, loss_mat)
                expansion_armed = False  # one expansion per forward pass

        weights = gate_weights(score_mat, self.gating)
        if guard and training:
            weights = self._mask_current_task_outliers(layer, weights, z_mat, current_task)

        if training:
            for i, cell in enumerate(layer.cells):
                cell.update_stats(loss_mat[i])

        out = self._mix(outs, weights, batch)
        contrib = Tensor(0.0)
        for i, s in enumerate(scores):
            if s.requires_grad:
                contrib = contrib + (-s * Tensor(weights[i])).sum()
            else:
                contrib = contrib + float((loss_mat[i] * weights[i]).sum())
        trace.layer_records.append(LayerRecord(score_mat, weights, z_mat.mean(axis=1), expanded))
        return out, contrib, expansion_armed

    def _outlier_trigger(self, z_mat: np.ndarray) -> bool:
        thr = self.expansion.z_threshold
        if self.expansion.per_batch:
            return bool(np.all(z_mat.mean(axis=1) > thr))
        return bool(np.any(np.all(z_mat > thr, axis=0)))

    def _mask_current_task_outliers(self, layer, weights, z_mat, current_task):
        """Zero the weights of cells born in the current task that flag the
        input as an outlier, then renormalize; columns where everything got
        masked keep the unmasked softmax weights."""
        thr = self.expansion.z_threshold
        masked = weights.copy()
        hit = False
        for i, cell in enumerate(layer.cells):
            if cell.birth_task != current_task:
                continue
            if self.expansion.per_batch:
                if z_mat[i].mean() > thr:
                    masked[i, :] = 0.0
                    hit = True
            else:
                sel = z_mat[i] > thr
                if sel.any():
                    masked[i, sel] = 0.0
                    hit = True
        if not hit:
            return weights
        col = masked.sum(axis=0, keepdims=True)
        dead = col[0] == 0.0
        col[:, dead] = 1.0
        masked = masked / col
        if dead.any():
            masked[:, dead] = weights[:, dead]
        return masked

    def _mix(self, outs, weights, batch):
        live = [i for i in range(len(outs)) if weights[i].any()]
        if len(live) == 1 and np.all(weights[live[0]] == 1.0):
            return outs[live[0]]
        feature_shape = (batch,) + (1,) * (outs[0].ndim - 1)
        total = None
        for i in live:
            term = outs[i] * Tensor(weights[i].reshape(feature_shape))
            total = term if total is None else total + term
        return total

    def _head_forward(self, x: Tensor, task_id, trace):
        if not self.heads:
            raise ContractError("network has no output heads")
        if self.training:
            head = self._get_head(task_id)
            score, logits = head.relatedness(x, training=True)
            head.update_stats(-score.data)
            contrib = (-score).sum() if score.requires_grad else Tensor(float(-score.data.sum()))
            trace.head_record = HeadRecord([task_id], score.data[None, :], np.ones((1, score.data.shape[0])))
            trace.selected_head = task_id
            return logits, contrib

        if task_id is not None:
            head = self._get_head(task_id)
            logits = head.functional.forward(x, training=False)
            b = x.shape[0]
            trace.head_record = HeadRecord([task_id], np.zeros((1, b)), np.ones((1, b)))
            trace.selected_head = task_id
            return logits, Tensor(0.0)

        # task-agnostic: score every head, hard-select the best for the batch
        ids = sorted(self.heads)
        scores, logits_all = [], []
        for tid in ids:
            head = self.heads[tid]
            if head.structural is None:
                raise ContractError(f"head {tid} has no structural component; task-agnostic eval unavailable")
            s, lo = head.relatedness(x, training=False)
            scores.append(s.data)
            logits_all.append(lo)
        score_mat = np.stack(scores)
        weights = _softmax_cols(score_mat, self.gating.tau) if len(ids) > 1 else np.ones((1, x.shape[0]))
        winner = int(weights.mean(axis=1).argmax())
        trace.head_record = HeadRecord(ids, score_mat, weights)
        trace.selected_head = ids[winner]
        contrib = Tensor(float((-score_mat * weights).sum()))
        return logits_all[winner], contrib

    def _get_head(self, task_id):
        if task_id not in self.heads:
            raise ContractError(f"unknown task id {task_id}; known heads: {sorted(self.heads)}")
        return self.heads[task_id]

    # -- analysis ------------------------------------------------------------------

    def selection_map(self, x_batches) -> np.ndarray:
        """Mean activation weight per (trunk layer, cell), zero-padded to the
        widest layer. Eval-mode view; rows sum to one."""
        if self.training:
            raise ContractError("selection_map requires eval mode")
        widest = max(len(layer) for layer in self.layers)
        sums = np.zeros((self.depth, widest))
        seen = 0
        any_task = sorted(self.heads)[0] if self.heads else None
        with no_grad():
            for xb in x_batches:
                xb = xb if isinstance(xb, Tensor) else Tensor(xb)
                _, trace = self.forward(xb, task_id=any_task)
                for l, rec in enumerate(trace.layer_records):
                    sums[l, : rec.weights.shape[0]] += rec.weights.sum(axis=1)
                seen += xb.shape[0]
        return sums / max(seen, 1)

    # -- persistence ------------------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "params").mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": 1,
            "input_shape": list(self.input_shape),
            "depth": self.depth,
            "width": self.width,
            "seed": self.seed,
            "with_structural": self.with_structural,
            "structural_signal_into_functional": self.structural_signal_into_functional,
            "stats_cfg": self.stats_cfg,
            "gating": asdict(self.gating),
            "expansion": asdict(self.expansion),
            "layers": [],
            "heads": {},
        }
        for layer in self.layers:
            entries = []
            for m, cell in enumerate(layer.cells):
                entries.append(self._cell_manifest(cell, f"layer{layer.index}_cell{m}", directory))
            manifest["layers"].append(entries)
        for tid, head in sorted(self.heads.items()):
            entry = self._cell_manifest(head, f"head{tid}", directory)
            entry["classes"] = head.functional.classes
            manifest["heads"][str(tid)] = entry
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    def _cell_manifest(self, cell, module_id, directory):
        tensors = []
        for role, named in (("param", cell.named_params()), ("buffer", cell.named_buffers())):
            for name, value in named:
                data = value.data if isinstance(value, Tensor) else value
                fname = f"{module_id}__{name}.lmct"
                save_tensor(directory / "params" / fname, data)
                tensors.append({"role": role, "name": name, "shape": list(data.shape), "file": fname})
        return {
            "module_id": module_id,
            "kind": cell.functional.kind,
            "birth_task": cell.birth_task,
            "frozen_functional": cell.frozen_functional,
            "frozen_structural": cell.frozen_structural,
            "structural": None if cell.structural is None else cell.structural.variant,
            "stats": cell.stats.state_dict(),
            "tensors": tensors,
        }

    @classmethod
    def load(cls, directory) -> "LmcNetwork":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        net = cls(
            input_shape=tuple(manifest["input_shape"]),
            depth=manifest["depth"],
            width=manifest["width"],
            gating=GatingConfig(**manifest["gating"]),
            expansion=ExpansionConfig(**manifest["expansion"]),
            seed=manifest["seed"],
            with_structural=manifest["with_structural"],
            stats_cfg=manifest.get("stats_cfg") or {},
            structural_signal_into_functional=manifest.get("structural_signal_into_functional", True),
        )
        for l, entries in enumerate(manifest["layers"]):
            net.layers[l].cells = []
            for entry in entries:
                cell = make_conv_cell(net._layer_in_channels[l], net.width,
                                      entry["birth_task"], net.rng,
                                      entry["structural"] is not None, net.stats_cfg)
                net._restore_cell(cell, entry, directory)
                net.layers[l].cells.append(cell)
        for tid_str, entry in manifest["heads"].items():
            tid = int(tid_str)
            head = make_head_cell(net.head_features, entry["classes"], entry["birth_task"],
                                  net.rng, entry["structural"] is not None, net.stats_cfg)
            net._restore_cell(head, entry, directory)
            net.heads[tid] = head
        return net

    def _restore_cell(self, cell, entry, directory):
        params = dict(cell.named_params())
        buffers = dict(cell.named_buffers())
        for spec in entry["tensors"]:
            data = load_tensor(directory / "params" / spec["file"])
            if spec["role"] == "param":
                params[spec["name"]].data[...] = data
            else:
                buffers[spec["name"]][...] = data
        cell.stats = ScoreStats.from_state(entry["stats"])
        if entry["frozen_functional"]:
            cell.freeze("functional")
        if entry["frozen_structural"]:
            cell.freeze("structural")


def combine(net_a: LmcNetwork, net_b: LmcNetwork) -> LmcNetwork:
    """Layer-wise union of two trained networks into a frozen third one.

    Cells are deep-copied (sources are untouched), every copy is frozen,
    and the second network's heads are re-keyed past the first's so task
    ids stay disjoint. The result carries a ``head_origin`` map
    new-task-id -> (source, original-task-id).
    """
    if net_a.depth != net_b.depth:
        raise CombineError(f"depth mismatch: {net_a.depth} vs {net_b.depth}")
    if net_a.input_shape != net_b.input_shape or net_a.width != net_b.width:
        raise CombineError(
            f"shape-incompatible networks: input {net_a.input_shape}/{net_b.input_shape}, "
            f"width {net_a.width}/{net_b.width}")
    for l in range(net_a.depth):
        ca, cb = net_a._layer_in_channels[l], net_b._layer_in_channels[l]
        if ca != cb:
            raise CombineError(f"layer {l} input channels differ: {ca} vs {cb}")

    merged = LmcNetwork(net_a.input_shape, net_a.depth, net_a.width,
                        gating=GatingConfig(**asdict(net_a.gating)),
                        expansion=ExpansionConfig(**asdict(net_a.expansion)),
                        seed=net_a.seed, with_structural=net_a.with_structural,
                        stats_cfg=net_a.stats_cfg)
    for l in range(merged.depth):
        cells = [copy.deepcopy(c) for c in net_a.layers[l].cells]
        cells += [copy.deepcopy(c) for c in net_b.layers[l].cells]
        for cell in cells:
            cell.freeze("both")
        merged.layers[l].cells = cells

    merged.head_origin = {}
    offset = (max(net_a.heads) + 1) if net_a.heads else 0
    for tid, head in sorted(net_a.heads.items()):
        h = copy.deepcopy(head)
        h.freeze("both")
        merged.heads[tid] = h
        merged.head_origin[tid] = ("a", tid)
    for tid, head in sorted(net_b.heads.items()):
        h = copy.deepcopy(head)
        h.freeze("both")
        merged.heads[tid + offset] = h
        merged.head_origin[tid + offset] = ("b", tid)
    merged.eval()
    return merged
