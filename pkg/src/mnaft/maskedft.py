"""Gradient masks from a neuron partition and masked SGD fine-tuning.

A selected unit ``i`` of a block unmasks row ``i`` of ``ffn.w_in``, entry ``i`` of
``ffn.b_in`` and (unless ``incoming_only``) column ``i`` of ``ffn.w_out``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .model import MODULES, Model, batch_loss_and_grads
from .neuronscore import SelectedLayers
from .partition import NeuronPartition
from .synthtask import Sample, TaskSpec, instruction_tokens

MODES = ("mnaft", "full", "all-layers", "language-layers", "vision-layers", "general-only", "specific-only")
OPTIMIZERS = ("sgd", "adam")
DECAYS = ("none", "cosine")
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class GradientMaskSet:
    masks: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def trainable_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def check(self, model: Model) -> None:
        if list(self.masks) != list(model.params):
            raise ValueError("mask set does not cover exactly the model parameters")
        for name, m in self.masks.items():
            if m.shape != model.params[name].shape:
                raise ValueError(f"mask shape {m.shape} != parameter shape for {name}")
            if not np.all((m == 0) | (m == 1)):
                raise ValueError(f"mask for {name} is not binary")

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, json.dumps(self.provenance, sort_keys=True), self.masks)

    @classmethod
    def load(cls, path: str | Path) -> "GradientMaskSet":
        header, tensors = checkpoint.load(path)
        return cls(tensors, json.loads(header))


def _zero_masks(model: Model) -> dict[str, np.ndarray]:
    return {k: np.zeros(v.shape, dtype=np.float32) for k, v in model.params.items()}


def unit_mask(d_ffn: int, units) -> np.ndarray:
    """Binary per-unit indicator: 1 for every listed unit."""
    m = np.zeros(d_ffn, dtype=np.float32)
    for u in units:
        if not 0 <= u < d_ffn:
            raise ValueError(f"unit index {u} out of range for d_ffn={d_ffn}")
        m[u] = 1.0
    return m


def _open_units(masks, model: Model, module: str, block: int, units, incoming_only: bool) -> None:
    w_in, b_in, w_out = model.ffn_names(module, block)
    m = unit_mask(model.config.d_ffn, units)
    masks[w_in] = np.maximum(masks[w_in], m[:, None] * np.ones_like(masks[w_in]))
    masks[b_in] = np.maximum(masks[b_in], m)
    if not incoming_only:
        masks[w_out] = np.maximum(masks[w_out], m[None, :] * np.ones_like(masks[w_out]))


def _check_layers(partition: NeuronPartition, model: Model) -> None:
    for lp in partition.layers:
        if lp.module not in MODULES or not 0 <= lp.block < model.config.blocks(lp.module):
            raise ValueError(f"partition layer {lp.module}.{lp.block} does not exist in the model")


def masks_from_partition(partition: NeuronPartition, target_task: int, model: Model,
                         incoming_only: bool = False) -> GradientMaskSet:
    _check_layers(partition, model)
    masks = _zero_masks(model)
    for lp in partition.layers:
        _open_units(masks, model, lp.module, lp.block, sorted(lp.units_for(target_task)), incoming_only)
    return GradientMaskSet(masks, {"mode": "mnaft", "target_task": target_task,
                                   "partition": partition.digest(), "incoming_only": incoming_only})


def ablation_mode_masks(mode: str, partition: NeuronPartition, selected: SelectedLayers | None,
                        model: Model, target_task: int, incoming_only: bool = False) -> GradientMaskSet:
    if mode not in MODES:
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if mode == "mnaft":
        return masks_from_partition(partition, target_task, model, incoming_only)
    cfg = model.config
    if mode == "full":
        masks = {k: np.ones(v.shape, dtype=np.float32) for k, v in model.params.items()}
    else:
        masks = _zero_masks(model)
        if mode in ("general-only", "specific-only"):
            _check_layers(partition, model)
            for lp in partition.layers:
                units = lp.general if mode == "general-only" else lp.specific.get(target_task, ())
                _open_units(masks, model, lp.module, lp.block, units, incoming_only)
        else:
            modules = {"all-layers": MODULES, "language-layers": ("language",),
                       "vision-layers": ("vision",)}[mode]
            for module in modules:
                for b in range(cfg.blocks(module)):
                    _open_units(masks, model, module, b, range(cfg.d_ffn), incoming_only)
    return GradientMaskSet(masks, {"mode": mode, "target_task": target_task,
                                   "partition": partition.digest() if partition else None,
                                   "incoming_only": incoming_only})


def masked_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                  masks: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """One plain SGD step on masked gradients; returns new parameter arrays."""
    out = {}
    for name, w in params.items():
        g, m = grads[name], masks[name]
        if g.shape != w.shape or m.shape != w.shape:
            raise ValueError(f"shape mismatch for {name}: param {w.shape}, grad {g.shape}, mask {m.shape}")
        out[name] = (w - np.float32(lr) * (g * m)).astype(np.float32)
    return out


@dataclass
class FinetuneConfig:
    mode: str = "mnaft"
    target_task: int = 0
    lr: float = 0.1
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "sgd"
    precision: str = "float32"
    incoming_only: bool = False
    warmup: int = 0  # linear ramp over the first steps
    decay: str = "none"  # none | cosine

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps >= 1 required")
        if self.batch_size < 1:
            raise ValueError("batch_size >= 1 required")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in _DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")
        if not 0 <= self.warmup < self.steps:
            raise ValueError("warmup must lie in [0, steps)")
        if self.decay not in DECAYS:
            raise ValueError(f"unknown decay {self.decay!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        if step <= self.warmup:
            return self.lr * step / self.warmup
        if self.decay == "cosine":
            frac = (step - self.warmup - 1) / max(self.steps - self.warmup - 1, 1)
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    evals: list[tuple[int, dict]] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "seconds"])
            for i, (loss, sec) in enumerate(zip(self.losses, self.seconds), start=1):
                w.writerow([i, f"{loss:.17g}", f"{sec:.3f}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainLog":
        log = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                log.losses.append(float(row["loss"]))
                log.seconds.append(float(row["seconds"]))
        return log


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def step(self, params, grads, masks, lr):
        self.t += 1
        out = {}
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, w in params.items():
            g = grads[k] * masks[k]
            self.m[k] = (self.b1 * self.m[k] + (1 - self.b1) * g).astype(np.float32)
            self.v[k] = (self.b2 * self.v[k] + (1 - self.b2) * g * g).astype(np.float32)
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = (w - np.float32(lr) * (upd * masks[k]).astype(np.float32)).astype(np.float32)
        return out


def finetune(model: Model, dataset: list[tuple[Sample, TaskSpec]], config: FinetuneConfig,
             masks: GradientMaskSet, eval_fn: Callable[[Model], dict] | None = None,
             eval_every: int = 0) -> tuple[Model, TrainLog]:
    """Masked training on translate-instruction batches; returns a new model and its log."""
    config.validate()
    if not dataset:
        raise ValueError("dataset must be non-empty")
    masks.check(model)
    out = model.copy()
    dtype = _DTYPES[config.precision]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x46544E45]))
    order = rng.permutation(len(dataset))
    cursor = 0
    adam = _Adam(out.params) if config.optimizer == "adam" else None
    log = TrainLog()
    start = time.perf_counter()
    for step in range(1, config.steps + 1):
        idx = []
        while len(idx) < min(config.batch_size, len(dataset)):
            if cursor == len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            idx.append(int(order[cursor]))
            cursor += 1
        batch = [dataset[i] for i in idx]
        loss, grads = batch_loss_and_grads(
            out, [s.v for s, _ in batch], [instruction_tokens(t, "translate") for _, t in batch],
            [list(s.t) for s, _ in batch], dtype=dtype)
        if adam is None:
            out.params = masked_update(out.params, grads, masks.masks, config.lr_at(step))
        else:
            out.params = adam.step(out.params, grads, masks.masks, config.lr_at(step))
        log.losses.append(loss)
        log.seconds.append(time.perf_counter() - start)
        if eval_fn is not None and eval_every and step % eval_every == 0:
            log.evals.append((step, eval_fn(out)))
    return out, log


def frozen_violations(before: Model, after: Model, masks: GradientMaskSet) -> int:
    """Count parameter elements with mask 0 whose bytes changed."""
    bad = 0
    for name, m in masks.masks.items():
        a = before.params[name].view(np.uint32)
        b = after.params[name].view(np.uint32)
        bad += int(np.count_nonzero((a != b) & (m == 0)))
    return bad


def config_dict(config: FinetuneConfig) -> dict:
    return asdict(config)
