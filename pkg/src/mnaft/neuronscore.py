"""Instruction-driven neuron awareness scores, layer relevance and layer selection.

The awareness score of an FFN unit is the first-order Taylor estimate of the
loss change from silencing it, ``|dL/dh * h|``, taken per token position on the
realized activation, averaged over positions and then over the scoring set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .model import MODULES, Model, NeuronId, build_plan, list_neurons, run
from .synthtask import Sample, TaskSpec, instruction_tokens, supervision_target

REDUCTIONS = ("position-mean", "first-order")


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _valid_positions(plan, module: str) -> np.ndarray:
    return plan.vis_len if module == "vision" else plan.dec_len


def taylor_saliency(h: np.ndarray, g: np.ndarray, lengths, reduction: str = "position-mean") -> np.ndarray:
    """Per-unit saliency summed over the samples of one batch.

    ``h`` and ``g`` are (batch, positions, units); only the first ``lengths[i]``
    positions of sample ``i`` count. ``position-mean`` gives ``mean_pos |g*h|``
    per sample; ``first-order`` gives the signed sum ``sum_pos g*h``.
    """
    prod = np.asarray(h, dtype=np.float64) * np.asarray(g, dtype=np.float64)
    out = np.zeros(prod.shape[-1], dtype=np.float64)
    for i, n in enumerate(lengths):
        if reduction == "position-mean":
            out += np.abs(prod[i, :n]).mean(axis=0)
        else:
            out += prod[i, :n].sum(axis=0)
    return out


def neuron_awareness(model: Model, task: TaskSpec, scoring_set: list[Sample], kind: str = "translate",
                     batch_size: int = 32, loss_scale: float = 1.0,
                     reduction: str = "position-mean") -> np.ndarray:
    """Awareness score per neuron, ordered as :func:`list_neurons`.

    ``kind`` is ``translate``, ``ocr-probe`` or ``both`` (mean of the two probes).

    With ``reduction="first-order"`` the products are summed with their signs over
    positions and samples before taking the magnitude, giving the linear prediction
    of :func:`exact_ablation` (mean loss change when the unit is silenced everywhere).
    """
    if not scoring_set:
        raise ValueError("scoring set must be non-empty")
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if kind == "both":
        a = neuron_awareness(model, task, scoring_set, "translate", batch_size, loss_scale, reduction)
        b = neuron_awareness(model, task, scoring_set, "ocr-probe", batch_size, loss_scale, reduction)
        return (a + b) / 2.0
    cfg = model.config
    instr = instruction_tokens(task, kind)
    blocks = [(m, b) for m in MODULES for b in range(cfg.blocks(m))]
    totals = {key: np.zeros(cfg.d_ffn, dtype=np.float64) for key in blocks}
    for chunk in _batches(scoring_set, batch_size):
        # summed per-sample losses: the gradient at a sample's positions is that sample's own gradient
        plan = build_plan(model, [s.v for s in chunk], [instr] * len(chunk),
                          [list(supervision_target(s, kind)) for s in chunk],
                          reduction="sum", loss_scale=loss_scale)
        taps = {key: ad.register_tap(plan.graph, plan.ffn[key]) for key in blocks}
        tape, _ = run(model, plan, trainable=False)
        ad.backward(tape, plan.loss)
        for (module, b), tap in taps.items():
            totals[(module, b)] += taylor_saliency(tap.activation, tap.gradient,
                                                   _valid_positions(plan, module), reduction)
    out = np.concatenate([totals[key] for key in blocks]) / len(scoring_set)
    return np.abs(out) if reduction == "first-order" else out


@dataclass
class ScoreMatrix:
    tasks: list[int]
    neurons: list[NeuronId]
    values: np.ndarray  # (tasks, neurons) float64
    scoring_size: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.tasks), len(self.neurons)):
            raise ValueError("score matrix shape does not match tasks x neurons")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("scores must be finite and non-negative")

    def columns(self, module: str, block: int) -> np.ndarray:
        return np.array([j for j, n in enumerate(self.neurons) if n.module == module and n.block == block])

    def layer(self, module: str, block: int) -> np.ndarray:
        """(tasks, units) slice for one block, units in ascending order."""
        cols = self.columns(module, block)
        units = [self.neurons[j].unit for j in cols]
        return self.values[:, cols[np.argsort(units)]]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["module", "block", "unit"] + [f"task_{t}" for t in self.tasks])
            for j, n in enumerate(self.neurons):
                w.writerow([n.module, n.block, n.unit] + [f"{v:.17g}" for v in self.values[:, j]])

    @classmethod
    def from_csv(cls, path: str | Path, scoring_size: int = 0) -> "ScoreMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        tasks = [int(h.split("_", 1)[1]) for h in header[3:]]
        neurons = [NeuronId(r[0], int(r[1]), int(r[2])) for r in body]
        values = np.array([[float(x) for x in r[3:]] for r in body], dtype=np.float64).T
        return cls(tasks, neurons, values.reshape(len(tasks), len(neurons)), scoring_size)


def build_score_matrix(model: Model, tasks: list[TaskSpec], scoring_sets: list[list[Sample]],
                       kind: str = "translate", batch_size: int = 32) -> ScoreMatrix:
    if len(tasks) != len(scoring_sets):
        raise ValueError("need one scoring set per task")
    sizes = {len(s) for s in scoring_sets}
    if len(sizes) != 1:
        raise ValueError(f"scoring sets differ in size: {sorted(sizes)}")
    rows = [neuron_awareness(model, t, s, kind, batch_size) for t, s in zip(tasks, scoring_sets)]
    return ScoreMatrix([t.task_id for t in tasks], list_neurons(model), np.stack(rows), sizes.pop())


@dataclass
class LayerRelevance:
    raw: dict[tuple[str, int], float]
    normalized: dict[tuple[str, int], float]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["module", "block", "D", "D_hat"])
            for key in self.raw:
                w.writerow([key[0], key[1], f"{self.raw[key]:.17g}", f"{self.normalized[key]:.17g}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LayerRelevance":
        raw, norm = {}, {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["module"], int(row["block"]))
                raw[key], norm[key] = float(row["D"]), float(row["D_hat"])
        return cls(raw, norm)

    def module_scores(self, module: str) -> list[float]:
        keys = sorted(k for k in self.normalized if k[0] == module)
        return [self.normalized[k] for k in keys]


def layer_relevance(x: ScoreMatrix) -> LayerRelevance:
    """Per-block mean of task-averaged scores, normalized to sum to one within each module."""
    task_mean = x.values.mean(axis=0)
    raw: dict[tuple[str, int], float] = {}
    for j, n in enumerate(x.neurons):
        raw.setdefault((n.module, n.block), []).append(task_mean[j])
    raw = {k: float(np.mean(v)) for k, v in raw.items()}
    norm = {}
    for module in MODULES:
        keys = [k for k in raw if k[0] == module]
        total = sum(raw[k] for k in keys)
        for k in keys:
            norm[k] = raw[k] / total if total > 0 else 1.0 / len(keys)
    return LayerRelevance(raw, norm)


@dataclass(frozen=True)
class SelectedLayers:
    vision: tuple[int, ...]
    language: tuple[int, ...]
    k_vision: int
    k_llm: int

    def blocks(self, module: str) -> tuple[int, ...]:
        return self.vision if module == "vision" else self.language

    def pairs(self) -> list[tuple[str, int]]:
        return [("vision", b) for b in self.vision] + [("language", b) for b in self.language]

    def to_dict(self) -> dict:
        return {"vision": list(self.vision), "language": list(self.language),
                "k_vision": self.k_vision, "k_llm": self.k_llm}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectedLayers":
        return cls(tuple(d["vision"]), tuple(d["language"]), d["k_vision"], d["k_llm"])


def top_k_blocks(scores: list[float], k: int) -> tuple[int, ...]:
    """Indices of the k largest scores; ties go to the lower index. Returned sorted."""
    order = sorted(range(len(scores)), key=lambda b: (-scores[b], b))
    return tuple(sorted(order[:min(k, len(scores))]))


def select_layers(rel: LayerRelevance, k_vision: int, k_llm: int) -> SelectedLayers:
    if k_vision < 1 or k_llm < 1:
        raise ValueError("layer budgets must be >= 1")
    return SelectedLayers(top_k_blocks(rel.module_scores("vision"), k_vision),
                          top_k_blocks(rel.module_scores("language"), k_llm), k_vision, k_llm)


def ablation_deltas(model: Model, module: str, block: int, units, task: TaskSpec,
                    scoring_set: list[Sample], kind: str = "translate", batch_size: int = 64) -> np.ndarray:
    """Exact loss change for silencing each unit in ``units`` (one at a time)."""
    units = list(units)
    instr = instruction_tokens(task, kind)
    base_sum = 0.0
    deltas = np.zeros(len(units), dtype=np.float64)
    for chunk in _batches(scoring_set, batch_size):
        plan = build_plan(model, [s.v for s in chunk], [instr] * len(chunk),
                          [list(supervision_target(s, kind)) for s in chunk], reduction="sum")
        node = plan.ffn[(module, block)]
        _, base = run(model, plan)
        base_sum += base
        for j, u in enumerate(units):
            def silence(val, u=u):
                val = val.copy()
                val[..., u] = 0.0
                return val
            _, ablated = run(model, plan, interventions={node: silence})
            deltas[j] += ablated - base
    return deltas / len(scoring_set)


def exact_ablation(model: Model, neuron: NeuronId, task: TaskSpec, scoring_set: list[Sample],
                   kind: str = "translate") -> float:
    """Mean loss with the unit forced to zero at every position, minus the baseline mean loss."""
    cfg = model.config
    if not (neuron.module in MODULES and 0 <= neuron.block < cfg.blocks(neuron.module)
            and 0 <= neuron.unit < cfg.d_ffn):
        raise ValueError(f"invalid neuron {neuron}")
    return float(ablation_deltas(model, neuron.module, neuron.block, [neuron.unit], task,
                                 scoring_set, kind)[0])


def _block_slice(model: Model, module: str, block: int) -> slice:
    start = list_neurons(model).index(NeuronId(module, block, 0))
    return slice(start, start + model.config.d_ffn)


def saliency_fidelity(model: Model, task: TaskSpec, scoring_set: list[Sample], module: str, block: int,
                      kind: str = "translate", scale: float = 0.01, top: int = 10) -> dict:
    """Compare awareness scores of one block with exact single-unit ablation.

    Ranks the default scores against ``|dL|`` over every unit of the block
    (Spearman and top/bottom decile means). Then, on a copy with every parameter
    multiplied by ``scale``, checks the pointwise relative error of the
    first-order reduction for the ``top`` units it ranks highest; the
    position-mean error is reported alongside for reference.
    """
    units = range(model.config.d_ffn)
    cols = _block_slice(model, module, block)
    phi = neuron_awareness(model, task, scoring_set, kind)[cols]
    delta = np.abs(ablation_deltas(model, module, block, units, task, scoring_set, kind))
    rho = float(spearmanr(phi, delta).statistic)
    n_dec = max(1, int(round(len(phi) / 10)))
    order = np.argsort(-phi, kind="stable")
    top_mean = float(delta[order[:n_dec]].mean())
    bottom_mean = float(delta[order[-n_dec:]].mean())

    small = Model(model.config, {k: (v * np.float32(scale)).astype(np.float32) for k, v in model.params.items()})
    first = neuron_awareness(small, task, scoring_set, kind, reduction="first-order")[cols]
    pmean = neuron_awareness(small, task, scoring_set, kind)[cols]
    picked = [int(u) for u in np.argsort(-first, kind="stable")[:top]]
    exact = np.abs(ablation_deltas(small, module, block, picked, task, scoring_set, kind))
    denom = np.maximum(exact, 1e-8)
    fo_err = np.abs(first[picked] - exact) / denom
    picked_pm = [int(u) for u in np.argsort(-pmean, kind="stable")[:top]]
    exact_pm = np.abs(ablation_deltas(small, module, block, picked_pm, task, scoring_set, kind))
    pm_err = np.abs(pmean[picked_pm] - exact_pm) / np.maximum(exact_pm, 1e-8)
    return {
        "module": module, "block": block, "task": task.task_id, "units": len(phi),
        "spearman": rho,
        "decile_ratio": top_mean / bottom_mean if bottom_mean > 0 else float("inf"),
        "top_decile_mean": top_mean, "bottom_decile_mean": bottom_mean,
        "scale": scale, "top_units": picked,
        "first_order_max_rel_err": float(fo_err.max()),
        "position_mean_max_rel_err": float(pm_err.max()),
    }
