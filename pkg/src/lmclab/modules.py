"""One network module: a functional block paired with a local structural scorer.

The functional block does the actual prediction work (conv block or
linear head). The structural component watches the same traffic and
produces a per-sample loss measuring how foreign the input looks to this
module; its negation is the relatedness score used for gating, outlier
detection and head selection. Two scorer variants exist:

* ``AutoencoderStructural`` decodes the functional output back to the
  module's input and scores by reconstruction error.
* ``InvertibleStructural`` runs an additive two-block coupling over the
  L2-normalized flattened input and scores by output norm; invertibility
  keeps the map from collapsing onto zero.

Both losses go through log(1 + .) so they stay finite and non-negative.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm,
    concat,
    conv2d,
    conv_transpose2d,
    he_normal,
    linear,
    maxpool2,
    xavier_normal,
)


class ScoreStats:
    """Running mean/std of a module's structural-loss values.

    Bias-corrected exponential moving averages over per-batch mean and
    per-batch deviation. Before ``warmup`` batches the z-score is defined
    as zero; the reported std never drops below ``sigma_floor``.
    """

    def __init__(self, decay: float = 0.99, sigma_floor: float = 1e-3, warmup: int = 10):
        self.decay = decay
        self.sigma_floor = sigma_floor
        self.warmup = warmup
        self.count = 0
        self._mu_ema = 0.0
        self._sigma_ema = 0.0

    @property
    def warm(self) -> bool:
        return self.count >= self.warmup

    @property
    def mean(self) -> float:
        if self.count == 0:
            return 0.0
        if self.decay == 0.0:
            return self._mu_ema
        return self._mu_ema / (1.0 - self.decay**self.count)

    @property
    def std(self) -> float:
        if self.count == 0:
            return self.sigma_floor
        raw = self._sigma_ema if self.decay == 0.0 else self._sigma_ema / (1.0 - self.decay**self.count)
        return max(raw, self.sigma_floor)

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return
        batch_mean = float(values.mean())
        batch_dev = float(values.std())
        d = self.decay
        self._mu_ema = d * self._mu_ema + (1 - d) * batch_mean
        self._sigma_ema = d * self._sigma_ema + (1 - d) * batch_dev
        self.count += 1

    def z_scores(self, values: np.ndarray) -> np.ndarray:
        """Per-sample z of structural-loss values; zero before warm-up."""
        values = np.asarray(values, dtype=np.float64)
        if not self.warm:
            return np.zeros_like(values)
        return (values - self.mean) / self.std

    def state_dict(self) -> dict:
        return {
            "decay": self.decay, "sigma_floor": self.sigma_floor, "warmup": self.warmup,
            "count": self.count, "mu_ema": self._mu_ema, "sigma_ema": self._sigma_ema,
        }

    @classmethod
    def from_state(cls, d: dict) -> "ScoreStats":
        st = cls(d["decay"], d["sigma_floor"], d["warmup"])
        st.count = int(d["count"])
        st._mu_ema = float(d["mu_ema"])
        st._sigma_ema = float(d["sigma_ema"])
        return st


# -- functional blocks -----------------------------------------------------


class ConvBlock:
    """conv3x3(pad 1) -> batchnorm -> relu -> maxpool2; halves spatial extents."""

    kind = "conv-block"

    def __init__(self, in_channels: int, channels: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.channels = channels
        self.weight = he_normal(rng, (channels, in_channels, 3, 3), fan_in=in_channels * 9)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.bn = BatchNormState.create(channels)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = conv2d(x, self.weight, self.bias, padding=1)
        y = batchnorm(y, self.bn, training=training)
        return maxpool2(y.relu())

    def named_params(self):
        return [("conv.weight", self.weight), ("conv.bias", self.bias),
                ("bn.gamma", self.bn.gamma), ("bn.beta", self.bn.beta)]

    def buffers(self):
        return [("bn.running_mean", self.bn.running_mean), ("bn.running_var", self.bn.running_var)]

    def set_frozen(self, frozen: bool) -> None:
        self.bn.frozen = frozen


class HeadBlock:
    """flatten -> linear; one per task, output extent = class count."""

    kind = "head"

    def __init__(self, in_features: int, classes: int, rng: np.random.Generator):
        self.in_features = in_features
        self.classes = classes
        self.weight = xavier_normal(rng, (in_features, classes), fan_in=in_features, fan_out=classes)
        self.bias = Tensor(np.zeros(classes), requires_grad=True)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim > 2:
            x = x.flatten()
        return linear(x, self.weight, self.bias)

    def named_params(self):
        return [("linear.weight", self.weight), ("linear.bias", self.bias)]

    def buffers(self):
        return []

    def set_frozen(self, frozen: bool) -> None:
        pass


# -- structural components ---------------------------------------------------


class AutoencoderStructural:
    """Decode the functional output back to the module input and score
    by log(1 + squared reconstruction error) per sample."""

    variant = "autoencoder"

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator):
        self.channels = channels
        self.out_channels = out_channels
        self.tconv_weight = he_normal(rng, (channels, channels, 2, 2), fan_in=channels * 4)
        self.tconv_bias = Tensor(np.zeros(channels), requires_grad=True)
        self.bn = BatchNormState.create(channels)
        self.conv_weight = xavier_normal(rng, (out_channels, channels, 3, 3),
                                         fan_in=channels * 9, fan_out=out_channels * 9)
        self.conv_bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def decode(self, functional_out: Tensor, training: bool) -> Tensor:
        y = conv_transpose2d(functional_out, self.tconv_weight, self.tconv_bias, stride=2)
        y = batchnorm(y, self.bn, training=training)
        y = conv2d(y.relu(), self.conv_weight, self.conv_bias, padding=1)
        return y.sigmoid()

    def loss(self, functional_out: Tensor, module_input: Tensor, training: bool) -> Tensor:
        recon = self.decode(functional_out, training)
        if recon.shape != module_input.shape:
            raise ShapeError(f"reconstruction shape {recon.shape} does not match module input {module_input.shape}")
        return reconstruction_loss(recon, module_input)

    def named_params(self):
        return [("dec.tconv.weight", self.tconv_weight), ("dec.tconv.bias", self.tconv_bias),
                ("dec.bn.gamma", self.bn.gamma), ("dec.bn.beta", self.bn.beta),
                ("dec.conv.weight", self.conv_weight), ("dec.conv.bias", self.conv_bias)]

    def buffers(self):
        return [("dec.bn.running_mean", self.bn.running_mean), ("dec.bn.running_var", self.bn.running_var)]

    def set_frozen(self, frozen: bool) -> None:
        self.bn.frozen = frozen


def reconstruction_loss(recon: Tensor, target: Tensor) -> Tensor:
    """Per-sample log(1 + sum of squared errors) over non-batch axes."""
    diff = recon - target
    sq = (diff * diff).flatten().sum(axis=1)
    return sq.log1p()


class InvertibleStructural:
    """Additive two-block coupling over the L2-normalized flattened input.

    The input o splits into equal halves (o1, o2); the forward map is
    a1 = s1(o2) + o1, a2 = s2(a1) + o2, with s1 and s2 plain linear maps.
    The per-sample loss is log(1 + ||a||^2). The map is bijective by
    construction; ``invert`` applies the reverse recurrence.
    """

    variant = "invertible"

    def __init__(self, features: int, rng: np.random.Generator):
        if features % 2 != 0:
            raise ContractError(f"invertible structural component needs an even feature extent, got {features}")
        self.features = features
        half = features // 2
        self.s1_weight = xavier_normal(rng, (half, half), fan_in=half, fan_out=half)
        self.s1_bias = Tensor(np.zeros(half), requires_grad=True)
        self.s2_weight = xavier_normal(rng, (half, half), fan_in=half, fan_out=half)
        self.s2_bias = Tensor(np.zeros(half), requires_grad=True)

    @staticmethod
    def _normalize(flat: Tensor) -> Tensor:
        norm_sq = (flat * flat).sum(axis=1, keepdims=True)
        return flat / (norm_sq + 1e-12).sqrt()

    def couple(self, o_norm: Tensor) -> Tensor:
        half = self.features // 2
        o1, o2 = o_norm[:, :half], o_norm[:, half:]
        a1 = linear(o2, self.s1_weight, self.s1_bias) + o1
        a2 = linear(a1, self.s2_weight, self.s2_bias) + o2
        return concat([a1, a2], axis=1)

    def loss(self, functional_out: Tensor, module_input: Tensor, training: bool) -> Tensor:
        flat = module_input.flatten() if module_input.ndim > 2 else module_input
        if flat.shape[1] != self.features:
            raise ShapeError(f"invertible component expects {self.features} features, got {flat.shape}")
        a = self.couple(self._normalize(flat))
        return (a * a).sum(axis=1).log1p()

    def invert(self, a: np.ndarray) -> np.ndarray:
        """Reverse recurrence: o2 = a2 - s2(a1), o1 = a1 - s1(o2)."""
        half = self.features // 2
        a1, a2 = a[:, :half], a[:, half:]
        o2 = a2 - (a1 @ self.s2_weight.data + self.s2_bias.data)
        o1 = a1 - (o2 @ self.s1_weight.data + self.s1_bias.data)
        return np.concatenate([o1, o2], axis=1)

    def named_params(self):
        return [("s1.weight", self.s1_weight), ("s1.bias", self.s1_bias),
                ("s2.weight", self.s2_weight), ("s2.bias", self.s2_bias)]

    def buffers(self):
        return []

    def set_frozen(self, frozen: bool) -> None:
        pass


# -- the module cell ----------------------------------------------------------


class ModuleCell:
    """Functional block + optional structural scorer + bookkeeping.

    Freezing is one-way and absorbing: a frozen side drops out of every
    optimizer step, batch norms stop updating, and score statistics stop
    moving. ``birth_task`` never changes after construction.
    """

    def __init__(self, functional, structural, birth_task: int,
                 stats: Optional[ScoreStats] = None,
                 detach_structural_input: bool = False):
        self.functional = functional
        self.structural = structural
        self.stats = stats or ScoreStats()
        self.birth_task = birth_task
        self.frozen_functional = False
        self.frozen_structural = False
        # ablation switch: scorer losses then train scorer parameters only,
        # never the functional path feeding them
        self.detach_structural_input = detach_structural_input
        self.checkpoint_data: Optional[dict] = None

    # -- scoring ----------------------------------------------------------

    def structural_loss(self, functional_out: Tensor, module_input: Tensor, training: bool) -> Tensor:
        if self.structural is None:
            raise ContractError("module has no structural component")
        if self.detach_structural_input:
            functional_out = functional_out.detach()
            module_input = module_input.detach()
        return self.structural.loss(functional_out, module_input, training and not self.frozen_structural)

    def relatedness(self, module_input: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        """Return (score, functional output); score = -structural loss.

        The functional block runs exactly once; its output is returned for
        reuse by the layer mixing.
        """
        f_out = self.functional.forward(module_input, training and not self.frozen_functional)
        if self.structural is None:
            return Tensor(np.zeros(module_input.shape[0])), f_out
        loss = self.structural_loss(f_out, module_input, training)
        return -loss, f_out

    def update_stats(self, loss_values: np.ndarray) -> None:
        if self.structural is not None and not self.frozen_structural:
            self.stats.update(loss_values)

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        out = [("functional." + n, p) for n, p in self.functional.named_params()]
        if self.structural is not None:
            out += [("structural." + n, p) for n, p in self.structural.named_params()]
        return out

    def named_buffers(self):
        out = [("functional." + n, b) for n, b in self.functional.buffers()]
        if self.structural is not None:
            out += [("structural." + n, b) for n, b in self.structural.buffers()]
        return out

    def trainable_params(self):
        params = []
        if not self.frozen_functional:
            params += [p for _, p in self.functional.named_params()]
        if self.structural is not None and not self.frozen_structural:
            params += [p for _, p in self.structural.named_params()]
        return params

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    # -- freezing / snapshots -------------------------------------------------

    def freeze(self, what: str = "both") -> None:
        if what not in ("functional", "structural", "both"):
            raise ContractError(f"freeze target must be functional/structural/both, got {what!r}")
        if what in ("functional", "both"):
            self.frozen_functional = True
            for _, p in self.functional.named_params():
                p.requires_grad = False
            self.functional.set_frozen(True)
        if what in ("structural", "both") and self.structural is not None:
            self.frozen_structural = True
            for _, p in self.structural.named_params():
                p.requires_grad = False
            self.structural.set_frozen(True)
        elif what == "structural" and self.structural is None:
            self.frozen_structural = True

    @property
    def fully_frozen(self) -> bool:
        return self.frozen_functional and self.frozen_structural

    def make_checkpoint(self) -> None:
        self.checkpoint_data = {
            "params": {n: p.data.copy() for n, p in self.named_params()},
            "buffers": {n: b.copy() for n, b in self.named_buffers()},
            "stats": self.stats.state_dict(),
        }

    def rollback(self) -> None:
        if self.checkpoint_data is None:
            raise ContractError("rollback called without a checkpoint")
        for n, p in self.named_params():
            p.data[...] = self.checkpoint_data["params"][n]
        for n, b in self.named_buffers():
            b[...] = self.checkpoint_data["buffers"][n]
        self.stats = ScoreStats.from_state(self.checkpoint_data["stats"])


def make_conv_cell(in_channels: int, channels: int, birth_task: int,
                   rng: np.random.Generator, with_structural: bool = True,
                   stats_cfg: Optional[dict] = None,
                   detach_structural_input: bool = False) -> ModuleCell:
    functional = ConvBlock(in_channels, channels, rng)
    structural = AutoencoderStructural(channels, in_channels, rng) if with_structural else None
    stats = ScoreStats(**stats_cfg) if stats_cfg else ScoreStats()
    return ModuleCell(functional, structural, birth_task, stats, detach_structural_input)


def make_head_cell(in_features: int, classes: int, birth_task: int,
                   rng: np.random.Generator, with_structural: bool = True,
                   stats_cfg: Optional[dict] = None,
                   detach_structural_input: bool = False) -> ModuleCell:
    functional = HeadBlock(in_features, classes, rng)
    structural = InvertibleStructural(in_features, rng) if with_structural else None
    stats = ScoreStats(**stats_cfg) if stats_cfg else ScoreStats()
    return ModuleCell(functional, structural, birth_task, stats, detach_structural_input)
