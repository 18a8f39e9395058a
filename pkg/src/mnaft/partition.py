"""Split units of the selected layers into general (low cross-task variance) and
task-specific sets."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neuronscore import ScoreMatrix, SelectedLayers


@dataclass
class LayerPartition:
    module: str
    block: int
    lam: float
    general: tuple[int, ...]
    specific: dict[int, tuple[int, ...]]

    @property
    def retained(self) -> set[int]:
        out = set(self.general)
        for units in self.specific.values():
            out |= set(units)
        return out

    def units_for(self, task_id: int) -> set[int]:
        return set(self.general) | set(self.specific.get(task_id, ()))


@dataclass
class NeuronPartition:
    epsilon: float
    rho: float
    layers: list[LayerPartition] = field(default_factory=list)

    def validate(self) -> None:
        for lp in self.layers:
            seen = set(lp.general)
            if len(seen) != len(lp.general):
                raise ValueError(f"duplicate general units in {lp.module}.{lp.block}")
            for t, units in lp.specific.items():
                overlap = seen & set(units)
                if overlap or len(set(units)) != len(units):
                    raise ValueError(f"unit sets overlap in {lp.module}.{lp.block} (task {t})")
                seen |= set(units)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "rho": self.rho,
            "layers": [{
                "module": lp.module,
                "block": lp.block,
                "lambda": lp.lam,
                "general": list(lp.general),
                "specific": {str(t): list(u) for t, u in sorted(lp.specific.items())},
            } for lp in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronPartition":
        layers = [LayerPartition(e["module"], int(e["block"]), float(e["lambda"]), tuple(e["general"]),
                                 {int(t): tuple(u) for t, u in e["specific"].items()})
                  for e in d["layers"]]
        part = cls(float(d["epsilon"]), float(d["rho"]), layers)
        part.validate()
        return part

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NeuronPartition":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def variance_by_neuron(x: ScoreMatrix, module: str, block: int) -> np.ndarray:
    """Population standard deviation across tasks for every unit of one block."""
    if len(x.tasks) < 2:
        raise ValueError("variance across tasks needs at least 2 tasks")
    return x.layer(module, block).std(axis=0, ddof=0)


def general_count(epsilon: float, p: int) -> int:
    return math.floor(epsilon * p)


def split_general_specific(sigma, epsilon: float, p: int | None = None,
                           units=None) -> tuple[list[int], list[int], float]:
    """Ascending-variance split: the first floor(epsilon*p) ranks are general.

    Returns (general units, specific units, threshold). ``units`` labels the
    entries of ``sigma`` (defaults to positions); rank ties go to the lower unit.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    sigma = np.asarray(sigma, dtype=np.float64)
    p = len(sigma) if p is None else p
    units = list(range(len(sigma))) if units is None else list(units)
    if p == 0:
        return [], [], 0.0
    order = sorted(range(p), key=lambda j: (sigma[j], units[j]))
    cut = general_count(epsilon, p)
    lam = float(sigma[order[min(cut, p - 1)]])
    general = sorted(units[j] for j in order[:cut])
    specific = sorted(units[j] for j in order[cut:])
    return general, specific, lam


def assign_specific_to_tasks(x: ScoreMatrix, module: str, block: int, specific) -> dict[int, tuple[int, ...]]:
    """Each specific unit goes to the task with the highest score (lowest task index on ties)."""
    layer = x.layer(module, block)
    out: dict[int, list[int]] = {t: [] for t in x.tasks}
    for u in specific:
        out[x.tasks[int(np.argmax(layer[:, u]))]].append(u)
    return {t: tuple(sorted(us)) for t, us in out.items()}


def build_partition(x: ScoreMatrix, selected: SelectedLayers, epsilon: float = 0.5,
                    rho: float = 1.0) -> NeuronPartition:
    if not (0.0 <= epsilon <= 1.0 and 0.0 <= rho <= 1.0):
        raise ValueError("epsilon and rho must lie in [0, 1]")
    layers = []
    for module, block in selected.pairs():
        layer = x.layer(module, block)
        n_units = layer.shape[1]
        keep = math.ceil(rho * n_units)
        importance = layer.mean(axis=0)
        retained = sorted(sorted(range(n_units), key=lambda u: (-importance[u], u))[:keep])
        sigma = variance_by_neuron(x, module, block)[retained]
        general, specific, lam = split_general_specific(sigma, epsilon, len(retained), retained)
        layers.append(LayerPartition(module, block, lam, tuple(general),
                                     assign_specific_to_tasks(x, module, block, specific)))
    part = NeuronPartition(epsilon, rho, layers)
    part.validate()
    return part
