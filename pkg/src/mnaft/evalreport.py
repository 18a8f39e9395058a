"""Translation metrics, forgetting analysis, activation profiles and neuron projections."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import MODULES, Model, build_plan, generate_batch, run
from .partition import NeuronPartition
from .synthtask import MAX_LEN, Sample, TaskSpec, instruction_tokens, supervision_target

MAX_ORDER = 4
CANVAS_W, CANVAS_H = 800, 500
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


# -- metrics ------------------------------------------------------------------

def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(candidates, references, max_order: int = MAX_ORDER) -> float:
    """Corpus BLEU with clipped n-gram precisions, uniform weights and brevity penalty. No smoothing."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_order + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def token_accuracy(candidates, references) -> float:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    hits = sum(sum(a == b for a, b in zip(c, r)) for c, r in zip(candidates, references))
    total = sum(len(r) for r in references)
    return hits / total if total else 0.0


def exact_match(candidates, references) -> float:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not references:
        return 0.0
    return sum(list(c) == list(r) for c, r in zip(candidates, references)) / len(references)


@dataclass
class EvalResult:
    task_id: int
    model_tag: str
    bleu: float
    token_accuracy: float
    exact_match: float
    samples: int


def evaluate(model: Model, task: TaskSpec, samples: list[Sample], tag: str = "",
             batch_size: int = 64, kind: str = "translate") -> EvalResult:
    if not samples:
        raise ValueError("evaluation set must be non-empty")
    instr = instruction_tokens(task, kind)
    cands = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        cands += generate_batch(model, [s.v for s in chunk], [instr] * len(chunk), MAX_LEN + 1)
    refs = [list(supervision_target(s, kind)) for s in samples]
    return EvalResult(task.task_id, tag, corpus_bleu(cands, refs), token_accuracy(cands, refs),
                      exact_match(cands, refs), len(samples))


@dataclass
class ForgettingReport:
    target: int
    target_before: float
    target_after: float
    others: dict[int, dict[str, float]] = field(default_factory=dict)

    @property
    def mean_delta(self) -> float:
        if not self.others:
            return 0.0
        return float(np.mean([o["delta"] for o in self.others.values()]))

    def to_dict(self) -> dict:
        return {"target": self.target, "target_before": self.target_before,
                "target_after": self.target_after,
                "others": {str(k): v for k, v in sorted(self.others.items())},
                "mean_non_target_delta": self.mean_delta}


def forgetting_from_results(before: dict[int, EvalResult], after: dict[int, EvalResult],
                            target: int) -> ForgettingReport:
    rep = ForgettingReport(target, before[target].bleu, after[target].bleu)
    for tid in sorted(before):
        if tid == target:
            continue
        b, a = before[tid].bleu, after[tid].bleu
        rep.others[tid] = {"before": b, "after": a, "delta": a - b}
    return rep


def forgetting_report(model_before: Model, model_after: Model, tasks: list[TaskSpec], target: int,
                      eval_sets: dict[int, list[Sample]]) -> ForgettingReport:
    before = {t.task_id: evaluate(model_before, t, eval_sets[t.task_id], "before") for t in tasks}
    after = {t.task_id: evaluate(model_after, t, eval_sets[t.task_id], "after") for t in tasks}
    return forgetting_from_results(before, after, target)


# -- activation profiles -----------------------------------------------------------

@dataclass
class ProfileTable:
    """Mean |activation| per (module, block, task), with block-to-block deltas."""

    rows: list[tuple[str, int, int, float]] = field(default_factory=list)

    def mean(self, module: str, block: int, task: int) -> float:
        for m, b, t, v in self.rows:
            if (m, b, t) == (module, block, task):
                return v
        raise KeyError((module, block, task))

    def deltas(self) -> list[tuple[str, int, int, float]]:
        lookup = {(m, b, t): v for m, b, t, v in self.rows}
        out = []
        for m, b, t, v in self.rows:
            if b > 0 and (m, b - 1, t) in lookup:
                out.append((m, b, t, v - lookup[(m, b - 1, t)]))
        return out

    def to_csv(self, path: str | Path) -> None:
        delta = {(m, b, t): d for m, b, t, d in self.deltas()}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["module", "block", "task", "mean_activation", "delta"])
            for m, b, t, v in self.rows:
                d = delta.get((m, b, t))
                w.writerow([m, b, t, f"{v:.17g}", "" if d is None else f"{d:.17g}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ProfileTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(r["module"], int(r["block"]), int(r["task"]), float(r["mean_activation"]))
                    for r in csv.DictReader(fh)]
        return cls(rows)


def _block_features(model: Model, task: TaskSpec, samples: list[Sample], kind: str, batch_size: int = 64):
    """Yield (plan, {(module, block): activation array}) per batch, forward only."""
    instr = instruction_tokens(task, kind)
    cfg = model.config
    keys = [(m, b) for m in MODULES for b in range(cfg.blocks(m))]
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        plan = build_plan(model, [s.v for s in chunk], [instr] * len(chunk),
                          [list(supervision_target(s, kind)) for s in chunk])
        taps = {k: ad.register_tap(plan.graph, plan.ffn[k]) for k in keys}
        run(model, plan)
        yield plan, {k: taps[k].activation for k in keys}


def activation_profiles(model: Model, tasks: list[TaskSpec], scoring_sets: list[list[Sample]],
                        kind: str = "translate") -> ProfileTable:
    cfg = model.config
    rows = []
    sums: dict[tuple[str, int, int], float] = {}
    for task, samples in zip(tasks, scoring_sets):
        if not samples:
            raise ValueError("profile sets must be non-empty")
        for plan, acts in _block_features(model, task, samples, kind):
            for (m, b), h in acts.items():
                lengths = plan.vis_len if m == "vision" else plan.dec_len
                for i, n in enumerate(lengths):
                    key = (m, b, task.task_id)
                    sums[key] = sums.get(key, 0.0) + float(np.abs(h[i, :n]).mean())
    for m in MODULES:
        for b in range(cfg.blocks(m)):
            for task, samples in zip(tasks, scoring_sets):
                rows.append((m, b, task.task_id, sums[(m, b, task.task_id)] / len(samples)))
    return ProfileTable(rows)


# -- projections --------------------------------------------------------------------

@dataclass
class Projection:
    points: np.ndarray  # (samples, 2)
    labels: list[int]
    directions: np.ndarray  # (features, 2)
    eigenvalues: np.ndarray  # all, descending
    module: str
    block: int
    group: str

    @property
    def explained(self) -> float:
        total = float(self.eigenvalues.sum())
        return float(self.eigenvalues[:2].sum() / total) if total > 0 else 0.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "task", "x", "y"])
            for i, (p, lab) in enumerate(zip(self.points, self.labels)):
                w.writerow([i, lab, f"{p[0]:.17g}", f"{p[1]:.17g}"])


def pca_2d(features: np.ndarray):
    """Top-2 principal directions of centered features.

    Directions are sign-fixed so their first nonzero coordinate is positive.
    Returns (points, directions, eigenvalues descending).
    """
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    cov = x.T @ x / max(len(x), 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    dirs = np.zeros((x.shape[1], 2))
    k = min(2, x.shape[1])
    dirs[:, :k] = vecs[:, :k]
    for j in range(k):
        nz = np.flatnonzero(np.abs(dirs[:, j]) > 1e-12)
        if len(nz) and dirs[nz[0], j] < 0:
            dirs[:, j] *= -1
    return x @ dirs, dirs, vals


def neuron_projection(model: Model, partition: NeuronPartition, tasks: list[TaskSpec],
                      scoring_sets: list[list[Sample]], group: str, module: str,
                      kind: str = "translate") -> Projection:
    layers = [lp for lp in partition.layers if lp.module == module]
    if not layers:
        raise ValueError(f"no selected {module} block in the partition")
    lp = max(layers, key=lambda l: l.block)
    if group == "general":
        units = sorted(lp.general)
    elif group == "specific":
        units = sorted(set().union(*map(set, lp.specific.values())) if lp.specific else set())
    else:
        raise ValueError(f"unknown group {group!r}")
    if not units:
        raise ValueError(f"empty {group} group in {module}.{lp.block}")
    feats, labels = [], []
    for task, samples in zip(tasks, scoring_sets):
        for plan, acts in _block_features(model, task, samples, kind):
            h = acts[(module, lp.block)]
            lengths = plan.vis_len if module == "vision" else plan.dec_len
            for i, n in enumerate(lengths):
                feats.append(h[i, :n][:, units].mean(axis=0))
                labels.append(task.task_id)
    points, dirs, vals = pca_2d(np.array(feats))
    return Projection(points, labels, dirs, vals, module, lp.block, group)


# -- output -------------------------------------------------------------------------

def _svg_open(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{CANVAS_W}" height="{CANVAS_H}" '
        f'viewBox="0 0 {CANVAS_W} {CANVAS_H}">',
        f'<rect x="0" y="0" width="{CANVAS_W}" height="{CANVAS_H}" fill="white"/>',
        f'<text x="{CANVAS_W // 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{title}</text>',
    ]


_LEFT, _RIGHT, _TOP, _BOTTOM = 70, 40, 50, 60


def _axes() -> list[str]:
    x0, y0 = _LEFT, CANVAS_H - _BOTTOM
    return [f'<line x1="{x0}" y1="{y0}" x2="{CANVAS_W - _RIGHT}" y2="{y0}" stroke="black"/>',
            f'<line x1="{x0}" y1="{_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>']


def _bars_svg(table: ProfileTable, title: str) -> str:
    out = _svg_open(title) + _axes()
    if table.rows:
        groups = list(dict.fromkeys((m, b) for m, b, _, _ in table.rows))
        tasks = list(dict.fromkeys(t for _, _, t, _ in table.rows))
        vals = [v for *_, v in table.rows]
        vmax, vmin = max(max(vals), 0.0), min(min(vals), 0.0)
        span = (vmax - vmin) or 1.0
        plot_w = CANVAS_W - _LEFT - _RIGHT
        plot_h = CANVAS_H - _TOP - _BOTTOM
        zero_y = _TOP + plot_h * vmax / span
        gw = plot_w / len(groups)
        bw = gw * 0.8 / len(tasks)
        lookup = {(m, b, t): v for m, b, t, v in table.rows}
        for gi, (m, b) in enumerate(groups):
            gx = _LEFT + gi * gw + gw * 0.1
            for ti, t in enumerate(tasks):
                v = lookup.get((m, b, t))
                if v is None:
                    continue
                h = plot_h * abs(v) / span
                y = zero_y - h if v >= 0 else zero_y
                out.append(f'<rect x="{gx + ti * bw:.2f}" y="{y:.2f}" width="{bw:.2f}" '
                           f'height="{h:.2f}" fill="{_PALETTE[ti % len(_PALETTE)]}"/>')
            out.append(f'<text x="{gx + gw * 0.4:.2f}" y="{CANVAS_H - _BOTTOM + 18}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="11">{m[:4]}.{b}</text>')
        out.append(f'<line x1="{_LEFT}" y1="{zero_y:.2f}" x2="{CANVAS_W - _RIGHT}" y2="{zero_y:.2f}" '
                   f'stroke="#888888"/>')
        out.append(f'<text x="{_LEFT - 6}" y="{_TOP + 4}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{vmax:.4g}</text>')
        for ti, t in enumerate(tasks):
            out.append(f'<rect x="{CANVAS_W - _RIGHT - 90}" y="{_TOP + ti * 16}" width="10" height="10" '
                       f'fill="{_PALETTE[ti % len(_PALETTE)]}"/>')
            out.append(f'<text x="{CANVAS_W - _RIGHT - 75}" y="{_TOP + ti * 16 + 9}" font-family="sans-serif" '
                       f'font-size="10">task {t}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _scatter_svg(proj: Projection, title: str) -> str:
    out = _svg_open(title) + _axes()
    pts = np.asarray(proj.points, dtype=np.float64)
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        plot_w = CANVAS_W - _LEFT - _RIGHT
        plot_h = CANVAS_H - _TOP - _BOTTOM
        tasks = sorted(set(proj.labels))
        for (px, py), lab in zip(pts, proj.labels):
            cx = _LEFT + 10 + (plot_w - 20) * (px - lo[0]) / span[0]
            cy = CANVAS_H - _BOTTOM - 10 - (plot_h - 20) * (py - lo[1]) / span[1]
            color = _PALETTE[tasks.index(lab) % len(_PALETTE)]
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}" fill-opacity="0.7"/>')
        for ti, t in enumerate(tasks):
            out.append(f'<circle cx="{CANVAS_W - _RIGHT - 85}" cy="{_TOP + ti * 16 + 5}" r="5" '
                       f'fill="{_PALETTE[ti % len(_PALETTE)]}"/>')
            out.append(f'<text x="{CANVAS_W - _RIGHT - 75}" y="{_TOP + ti * 16 + 9}" font-family="sans-serif" '
                       f'font-size="10">task {t}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(obj, path: str | Path, title: str = "") -> None:
    if isinstance(obj, ProfileTable):
        text = _bars_svg(obj, title or "Average activation")
    elif isinstance(obj, Projection):
        text = _scatter_svg(obj, title or f"{obj.group} neurons, {obj.module}.{obj.block}")
    else:
        raise TypeError(f"cannot render {type(obj).__name__} as SVG")
    Path(path).write_text(text, encoding="utf-8")


def emit_csv(obj, path: str | Path) -> None:
    obj.to_csv(path)


def result_dict(r: EvalResult) -> dict:
    return asdict(r)
