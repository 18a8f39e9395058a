"""Pipeline stages. Each stage reads declared artifacts from the run directory,
verifies them against upstream manifests, and writes its outputs plus a manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evalreport import (ProfileTable, activation_profiles, emit_csv, emit_svg, evaluate,
                         forgetting_from_results, neuron_projection, result_dict)
from .maskedft import FinetuneConfig, GradientMaskSet, TrainLog, ablation_mode_masks, finetune, frozen_violations
from .model import Model, init_model
from .neuronscore import (LayerRelevance, ScoreMatrix, SelectedLayers, build_score_matrix, layer_relevance,
                          saliency_fidelity, select_layers)
from .partition import NeuronPartition, build_partition
from .synthtask import (LanguageSpec, TaskSpec, dump_dataset, load_dataset, make_languages, make_tasks,
                        sample_dataset)

log = logging.getLogger("mnaft")

SPLIT_NAMES = ("train", "score", "eval")


class ManifestMismatch(ValueError):
    pass


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Paths and manifest bookkeeping for one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def data_file(self, task_id: int, split: str) -> Path:
        return self.path("data", f"task{task_id}_{split}.tsv")

    def ft_tag(self, mode: str, task: int) -> str:
        return f"{mode}_t{task}"

    def manifests(self) -> dict[str, dict]:
        out = {}
        mdir = self.path("manifests")
        if mdir.is_dir():
            for p in sorted(mdir.glob("*.json")):
                out[p.stem] = json.loads(p.read_text(encoding="utf-8"))
        return out

    def verify_inputs(self, inputs: list[Path]) -> dict[str, str]:
        """Hash inputs and check each against the manifest of the stage that produced it."""
        recorded = {}
        for m in self.manifests().values():
            recorded.update(m.get("outputs", {}))
        hashes = {}
        for p in inputs:
            if not p.exists():
                raise FileNotFoundError(f"missing input artifact {p}")
            rel = str(p.relative_to(self.root))
            h = sha256(p)
            if rel in recorded and recorded[rel] != h:
                raise ManifestMismatch(f"{rel} changed since it was produced (hash mismatch)")
            hashes[rel] = h
        return hashes

    def write_manifest(self, stage: str, inputs: dict[str, str], outputs: list[Path],
                       config_hash: str, started: float) -> None:
        manifest = {
            "stage": stage,
            "config_hash": config_hash,
            "inputs": inputs,
            "outputs": {str(p.relative_to(self.root)): sha256(p) for p in outputs},
            "started": started,
            "finished": time.time(),
        }
        mdir = self.path("manifests")
        mdir.mkdir(parents=True, exist_ok=True)
        (mdir / f"{stage}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                            encoding="utf-8")

    # -- shared loaders --
    def suite(self) -> tuple[list[LanguageSpec], list[TaskSpec]]:
        d = json.loads(self.path("data", "suite.json").read_text(encoding="utf-8"))
        langs = [LanguageSpec(l["lang_id"], tuple(l["surface"]), l["order_rule"]) for l in d["languages"]]
        return langs, make_tasks(langs, [tuple(p) for p in d["pairs"]])

    def split(self, task_id: int, split: str):
        return load_dataset(self.data_file(task_id, split))[2]


def _json_write(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def gen_data(cfg: RunConfig) -> dict:
    cfg.validate()
    run, started = Run(cfg), time.time()
    run.path("data").mkdir(parents=True, exist_ok=True)
    langs = make_languages(cfg.suite.languages, cfg.seed)
    pairs = [tuple(p) for p in cfg.suite.pairs] if cfg.suite.pairs else None
    tasks = make_tasks(langs, pairs)
    suite_path = run.path("data", "suite.json")
    _json_write(suite_path, {
        "languages": [{"lang_id": l.lang_id, "surface": list(l.surface), "order_rule": l.order_rule}
                      for l in langs],
        "pairs": [[t.source.lang_id, t.target.lang_id] for t in tasks],
    })
    outputs = [suite_path]
    sizes = {"train": cfg.suite.train, "score": cfg.suite.score, "eval": cfg.suite.eval}
    for task in tasks:
        for split in SPLIT_NAMES:
            path = run.data_file(task.task_id, split)
            samples = sample_dataset(task, sizes[split], cfg.seed, split, patch_cols=cfg.model.patch_cols)
            dump_dataset(path, task.task_id, split, samples)
            outputs.append(path)
    run.write_manifest("gen-data", {}, outputs, cfg.digest("seed", "suite", "model"), started)
    log.info("wrote %d dataset files for %d tasks", len(outputs) - 1, len(tasks))
    return {"stage": "gen-data", "tasks": len(tasks), "files": len(outputs) - 1}


def train_base(cfg: RunConfig) -> dict:
    cfg.validate()
    run, started = Run(cfg), time.time()
    _, tasks = _suite_checked(run)
    inputs = [run.path("data", "suite.json")] + [run.data_file(t.task_id, "train") for t in tasks]
    hashes = run.verify_inputs(inputs)
    dataset = [(s, t) for t in tasks for s in run.split(t.task_id, "train")]
    model = init_model(replace(cfg.model, init_seed=cfg.seed))
    ft = FinetuneConfig(mode="full", lr=cfg.base.lr, steps=cfg.base.steps, batch_size=cfg.base.batch_size,
                        seed=cfg.seed, optimizer=cfg.base.optimizer, precision=cfg.base.precision,
                        warmup=cfg.base.warmup, decay=cfg.base.decay)
    masks = ablation_mode_masks("full", None, None, model, -1)
    log.info("training base model: %d steps on %d samples", ft.steps, len(dataset))
    trained, tlog = finetune(model, dataset, ft, masks)
    ckpt, log_path = run.path("base.ckpt"), run.path("base_trainlog.csv")
    trained.save(ckpt)
    tlog.to_csv(log_path)
    run.write_manifest("train-base", hashes, [ckpt, log_path], cfg.digest("seed", "model", "base"), started)
    window = max(1, min(50, len(tlog.losses) // 4))
    summary = {"stage": "train-base", "steps": ft.steps,
               "initial_loss": float(np.mean(tlog.losses[:window])),
               "final_loss": float(np.mean(tlog.losses[-window:])),
               "seconds": round(tlog.seconds[-1], 2)}
    log.info("base loss %.4f -> %.4f", summary["initial_loss"], summary["final_loss"])
    return summary


def _suite_checked(run: Run):
    suite_path = run.path("data", "suite.json")
    if not suite_path.exists():
        raise FileNotFoundError(f"missing {suite_path}; run gen-data first")
    return run.suite()


def score(cfg: RunConfig, with_oracle: bool = False) -> dict:
    cfg.validate()
    run, started = Run(cfg), time.time()
    _, tasks = _suite_checked(run)
    inputs = [run.path("base.ckpt")] + [run.data_file(t.task_id, "score") for t in tasks]
    hashes = run.verify_inputs(inputs)
    model = Model.load(run.path("base.ckpt"))
    sets = [run.split(t.task_id, "score") for t in tasks]
    x = build_score_matrix(model, tasks, sets, cfg.scoring.kind, cfg.scoring.batch_size)
    rel = layer_relevance(x)
    sel = select_layers(rel, cfg.scoring.k_vision, cfg.scoring.k_llm)
    outputs = [run.path("scores.csv"), run.path("relevance.csv"), run.path("selected.json")]
    x.to_csv(outputs[0])
    rel.to_csv(outputs[1])
    _json_write(outputs[2], {**sel.to_dict(), "scoring_size": x.scoring_size, "kind": cfg.scoring.kind})
    summary = {"stage": "score", "shape": list(x.values.shape), "vision": list(sel.vision),
               "language": list(sel.language)}
    if with_oracle:
        lang = rel.module_scores("language")
        block = int(np.argmax(lang))
        target = next(t for t in tasks if t.task_id == cfg.finetune.target_task)
        report = saliency_fidelity(model, target, sets[tasks.index(target)], "language", block)
        oracle_path = run.path("oracle.json")
        _json_write(oracle_path, report)
        outputs.append(oracle_path)
        summary["oracle"] = {k: report[k] for k in ("spearman", "decile_ratio", "first_order_max_rel_err")}
    run.write_manifest("score", hashes, outputs, cfg.digest("scoring"), started)
    log.info("selected vision blocks %s, language blocks %s", sel.vision, sel.language)
    return summary


def partition(cfg: RunConfig) -> dict:
    cfg.validate()
    run, started = Run(cfg), time.time()
    inputs = [run.path("scores.csv"), run.path("selected.json")]
    hashes = run.verify_inputs(inputs)
    sel_d = json.loads(inputs[1].read_text(encoding="utf-8"))
    x = ScoreMatrix.from_csv(inputs[0], sel_d["scoring_size"])
    part = build_partition(x, SelectedLayers.from_dict(sel_d), cfg.partition.epsilon, cfg.partition.rho)
    out = run.path("partition.json")
    part.save(out)
    NeuronPartition.load(out)  # disjointness re-validated on load
    run.write_manifest("partition", hashes, [out], cfg.digest("partition"), started)
    return {"stage": "partition", "layers": [
        {"module": lp.module, "block": lp.block, "general": len(lp.general),
         "specific": {str(t): len(u) for t, u in sorted(lp.specific.items())}} for lp in part.layers]}


def finetune_stage(cfg: RunConfig, mode: str | None = None, task: int | None = None) -> dict:
    cfg.validate()
    ftc = replace(cfg.finetune, mode=mode or cfg.finetune.mode,
                  target_task=cfg.finetune.target_task if task is None else task, seed=cfg.seed)
    ftc.validate()
    run, started = Run(cfg), time.time()
    _, tasks = _suite_checked(run)
    if ftc.target_task not in [t.task_id for t in tasks]:
        raise ValueError(f"unknown target task {ftc.target_task}")
    target = next(t for t in tasks if t.task_id == ftc.target_task)
    inputs = [run.path("base.ckpt"), run.path("partition.json"), run.path("selected.json"),
              run.data_file(target.task_id, "train")]
    hashes = run.verify_inputs(inputs)
    base = Model.load(inputs[0])
    part = NeuronPartition.load(inputs[1])
    sel = SelectedLayers.from_dict(json.loads(inputs[2].read_text(encoding="utf-8")))
    masks = ablation_mode_masks(ftc.mode, part, sel, base, ftc.target_task, ftc.incoming_only)
    dataset = [(s, target) for s in run.split(target.task_id, "train")]
    log.info("fine-tuning mode=%s task=%d: %d trainable parameters", ftc.mode, ftc.target_task,
             masks.trainable_count())
    tuned, tlog = finetune(base, dataset, ftc, masks)
    violations = frozen_violations(base, tuned, masks)
    if violations:
        raise RuntimeError(f"{violations} frozen parameter elements changed")
    tag = run.ft_tag(ftc.mode, ftc.target_task)
    ckpt, mpath, lpath = run.path(f"ft_{tag}.ckpt"), run.path(f"masks_{tag}.mnaf"), run.path(f"trainlog_{tag}.csv")
    tuned.save(ckpt)
    masks.save(mpath)
    tlog.to_csv(lpath)
    run.write_manifest(f"finetune-{tag}", hashes, [ckpt, mpath, lpath], cfg.digest("finetune"), started)
    return {"stage": "finetune", "mode": ftc.mode, "task": ftc.target_task,
            "trainable": masks.trainable_count(), "frozen_violations": violations,
            "final_loss": float(np.mean(tlog.losses[-50:])), "seconds": round(tlog.seconds[-1], 2)}


def _checkpoints(run: Run) -> list[tuple[str, Path]]:
    out = [("base", run.path("base.ckpt"))]
    out += [(p.stem[3:], p) for p in sorted(run.root.glob("ft_*.ckpt"))]
    return out


def eval_stage(cfg: RunConfig) -> dict:
    cfg.validate()
    run, started = Run(cfg), time.time()
    _, tasks = _suite_checked(run)
    ckpts = _checkpoints(run)
    hashes = run.verify_inputs([p for _, p in ckpts] + [run.data_file(t.task_id, "eval") for t in tasks])
    eval_sets = {t.task_id: run.split(t.task_id, "eval") for t in tasks}
    results: dict[str, dict[int, object]] = {}
    for tag, path in ckpts:
        model = Model.load(path)
        results[tag] = {t.task_id: evaluate(model, t, eval_sets[t.task_id], tag) for t in tasks}
        log.info("%s: BLEU %s", tag, [round(100 * r.bleu, 1) for r in results[tag].values()])
    forgetting = {}
    for tag, _ in ckpts[1:]:
        target = int(tag.rsplit("_t", 1)[1])
        forgetting[tag] = forgetting_from_results(results["base"], results[tag], target).to_dict()
    out = run.path("eval.json")
    _json_write(out, {"results": [result_dict(r) for tag in results for r in results[tag].values()],
                      "forgetting": forgetting})
    run.write_manifest("eval", hashes, [out], cfg.digest(), started)
    return {"stage": "eval", "checkpoints": [t for t, _ in ckpts],
            "bleu": {tag: {str(k): round(100 * r.bleu, 2) for k, r in res.items()} for tag, res in results.items()}}


def report(cfg: RunConfig) -> dict:
    cfg.validate()
    run, started = Run(cfg), time.time()
    _, tasks = _suite_checked(run)
    inputs = [run.path("base.ckpt"), run.path("partition.json"), run.path("eval.json")]
    inputs += [run.data_file(t.task_id, "score") for t in tasks]
    hashes = run.verify_inputs(inputs)
    model = Model.load(inputs[0])
    part = NeuronPartition.load(inputs[1])
    sets = [run.split(t.task_id, "score") for t in tasks]
    rdir = run.path("report")
    rdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    prof = activation_profiles(model, tasks, sets)
    emit_csv(prof, rdir / "profiles.csv")
    emit_svg(prof, rdir / "profiles.svg", "Average activation per block")
    emit_svg(ProfileTable(prof.deltas()), rdir / "profile_deltas.svg", "Delta average activation")
    outputs += [rdir / "profiles.csv", rdir / "profiles.svg", rdir / "profile_deltas.svg"]
    explained = {}
    for module in ("vision", "language"):
        for group in ("general", "specific"):
            try:
                proj = neuron_projection(model, part, tasks, sets, group, module)
            except ValueError as exc:
                log.info("skipping %s/%s projection: %s", module, group, exc)
                continue
            stem = rdir / f"projection_{module}_{group}"
            emit_csv(proj, stem.with_suffix(".csv"))
            emit_svg(proj, stem.with_suffix(".svg"))
            outputs += [stem.with_suffix(".csv"), stem.with_suffix(".svg")]
            explained[f"{module}/{group}"] = round(proj.explained, 6)
    ev = json.loads(run.path("eval.json").read_text(encoding="utf-8"))
    summary_path = rdir / "summary.csv"
    lines = ["model,task,bleu_x100,token_accuracy,exact_match"]
    for r in ev["results"]:
        lines.append(f"{r['model_tag']},{r['task_id']},{100 * r['bleu']:.2f},"
                     f"{r['token_accuracy']:.4f},{r['exact_match']:.4f}")
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(summary_path)
    run.write_manifest("report", hashes, outputs, cfg.digest(), started)
    return {"stage": "report", "files": len(outputs), "explained_variance": explained}
