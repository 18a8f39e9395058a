"""Tiny multimodal transformer: patch vision encoder, linear connector, causal decoder.

Every FFN intermediate unit (post-GELU) of every block is an addressable neuron.
Linear weights are stored ``(out_features, in_features)``, so neuron ``i`` of a
block owns row ``i`` of ``ffn.w_in``, entry ``i`` of ``ffn.b_in`` and column ``i``
of ``ffn.w_out``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .synthtask import BOS, EOS, GLYPH_H, PAD, VOCAB_SIZE, PixelGrid

MODULES = ("vision", "language")
_NEG = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    vision_blocks: int = 2
    language_blocks: int = 2
    patch_rows: int = 7
    patch_cols: int = 6
    max_image_patches: int = 28
    vocab_size: int = VOCAB_SIZE
    max_seq: int = 48
    init_seed: int = 0

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "d_ffn", "patch_rows", "patch_cols",
                     "max_image_patches", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.vision_blocks < 0 or self.language_blocks < 0:
            raise ModelError("block counts must be non-negative")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < VOCAB_SIZE:
            raise ModelError(f"vocab_size must cover the {VOCAB_SIZE} assigned token ids")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_rows * self.patch_cols

    def blocks(self, module: str) -> int:
        return self.vision_blocks if module == "vision" else self.language_blocks

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class NeuronId(NamedTuple):
    module: str
    block: int
    unit: int


def block_prefix(module: str, block: int) -> str:
    return f"{'vis' if module == 'vision' else 'lang'}.{block}"


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        return checkpoint.encode(self.config.to_text(), self.params)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        header, tensors = checkpoint.decode(blob)
        config = ModelConfig.from_text(header)
        model = cls(config, tensors)
        expected = init_model(config, 0, zero=True).params
        if list(expected) != list(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
            raise checkpoint.CheckpointError("parameter table does not match the stored config")
        return model

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())

    def ffn_names(self, module: str, block: int) -> tuple[str, str, str]:
        p = block_prefix(module, block)
        return f"{p}.ffn.w_in", f"{p}.ffn.b_in", f"{p}.ffn.w_out"


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) in canonical order; kind is weight | bias | gain."""
    d, f = cfg.d_model, cfg.d_ffn
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("vis.patch_w", (d, cfg.patch_dim), "weight"),
        ("vis.patch_b", (d,), "bias"),
        ("vis.pos", (cfg.max_image_patches, d), "weight"),
    ]

    def block(prefix):
        out = [(f"{prefix}.ln1.g", (d,), "gain"), (f"{prefix}.ln1.b", (d,), "bias")]
        for m in ("q", "k", "v", "o"):
            out += [(f"{prefix}.attn.w{m}", (d, d), "weight"), (f"{prefix}.attn.b{m}", (d,), "bias")]
        out += [(f"{prefix}.ln2.g", (d,), "gain"), (f"{prefix}.ln2.b", (d,), "bias"),
                (f"{prefix}.ffn.w_in", (f, d), "weight"), (f"{prefix}.ffn.b_in", (f,), "bias"),
                (f"{prefix}.ffn.w_out", (d, f), "weight"), (f"{prefix}.ffn.b_out", (d,), "bias")]
        return out

    for b in range(cfg.vision_blocks):
        spec += block(f"vis.{b}")
    spec += [("vis.ln_f.g", (d,), "gain"), ("vis.ln_f.b", (d,), "bias"),
             ("conn.w", (d, d), "weight"), ("conn.b", (d,), "bias"),
             ("lang.tok_emb", (cfg.vocab_size, d), "weight"),
             ("lang.pos", (cfg.max_seq, d), "weight")]
    for b in range(cfg.language_blocks):
        spec += block(f"lang.{b}")
    spec += [("lang.ln_f.g", (d,), "gain"), ("lang.ln_f.b", (d,), "bias"),
             ("head.w", (cfg.vocab_size, d), "weight"), ("head.b", (cfg.vocab_size,), "bias")]
    return spec


def init_model(config: ModelConfig, seed: int | None = None, zero: bool = False) -> Model:
    """Xavier-uniform weights, zero biases, unit layernorm gains."""
    config.validate()
    seed = config.init_seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D4F444C]))
    params = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "gain":
            arr = np.ones(shape, dtype=np.float32)
        elif kind == "bias" or zero:
            arr = np.zeros(shape, dtype=np.float32)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = arr
    return Model(config, params)


def list_neurons(model: Model) -> list[NeuronId]:
    cfg = model.config
    return [NeuronId(module, b, u)
            for module in MODULES
            for b in range(cfg.blocks(module))
            for u in range(cfg.d_ffn)]


def grid_patches(grid: PixelGrid, config: ModelConfig) -> np.ndarray:
    """Non-overlapping ``patch_rows x patch_cols`` patches, flattened row-major."""
    if grid.height != config.patch_rows or grid.height != GLYPH_H:
        raise ModelError(f"grid height {grid.height} != {config.patch_rows}")
    if grid.width % config.patch_cols:
        raise ModelError(f"grid width {grid.width} is not a multiple of {config.patch_cols}")
    n = grid.width // config.patch_cols
    if n > config.max_image_patches:
        raise ModelError(f"grid too wide: {n} patches > max_image_patches={config.max_image_patches}")
    px = grid.pixels.astype(np.float64).reshape(config.patch_rows, n, config.patch_cols)
    return px.transpose(1, 0, 2).reshape(n, config.patch_dim)


@dataclass
class Plan:
    """A built graph plus the bookkeeping needed to read it."""

    graph: ad.Graph
    loss: int | None
    logits: int
    embeddings: int
    visual: int
    connector: int
    ffn: dict[tuple[str, int], int]
    vis_len: np.ndarray
    dec_len: np.ndarray
    pred_counts: np.ndarray


class _Builder:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.g = ad.Graph()

    def p(self, name):
        return self.g.input(name)

    def dense(self, x, w, b):
        g = self.g
        return g.add(g.matmul(x, g.transpose(self.p(w), (1, 0))), self.p(b))

    def block(self, x, prefix, mask, batch, seq):
        g, cfg = self.g, self.cfg
        h, dh = cfg.n_heads, cfg.head_dim
        a = g.layernorm(x, self.p(f"{prefix}.ln1.g"), self.p(f"{prefix}.ln1.b"))

        def heads(name):
            y = self.dense(a, f"{prefix}.attn.w{name}", f"{prefix}.attn.b{name}")
            return g.transpose(g.reshape(y, (batch, seq, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = g.softmax(g.add(scores, mask))
        ctx = g.reshape(g.transpose(g.matmul(probs, v), (0, 2, 1, 3)), (batch, seq, cfg.d_model))
        x = g.add(x, self.dense(ctx, f"{prefix}.attn.wo", f"{prefix}.attn.bo"))
        b = g.layernorm(x, self.p(f"{prefix}.ln2.g"), self.p(f"{prefix}.ln2.b"))
        act = g.gelu(self.dense(b, f"{prefix}.ffn.w_in", f"{prefix}.ffn.b_in"))
        x = g.add(x, self.dense(act, f"{prefix}.ffn.w_out", f"{prefix}.ffn.b_out"))
        return x, act


def _check_tokens(seq, cfg: ModelConfig, what: str) -> None:
    for tok in seq:
        if not 0 <= int(tok) < cfg.vocab_size:
            raise ModelError(f"unknown token id {tok} in {what}")


def build_plan(model: Model, grids: list[PixelGrid], instructions: list, targets: list,
               predict: str = "targets", reduction: str = "mean", loss_scale: float = 1.0) -> Plan:
    """Build the forward graph for a batch.

    ``predict="targets"``: one prediction row per target token plus the closing EOS,
    with a cross-entropy loss node. ``predict="next"``: a single row per sample at
    its last input position (used for greedy decoding); no loss.
    ``reduction`` is ``mean`` (per-sample mean, batch mean) or ``sum`` (per-sample
    mean, summed over the batch); ``loss_scale`` multiplies the loss.
    """
    cfg = model.config
    bsz = len(grids)
    if not (bsz == len(instructions) == len(targets)) or bsz == 0:
        raise ModelError("batch needs equal, non-zero numbers of grids, instructions and targets")
    patches = [grid_patches(gr, cfg) for gr in grids]
    vis_len = np.array([len(p) for p in patches])
    pmax = int(vis_len.max())
    dec_rows = []
    for i in range(bsz):
        _check_tokens(instructions[i], cfg, "instruction")
        _check_tokens(targets[i], cfg, "target")
        if predict == "targets" and len(targets[i]) == 0:
            raise ModelError("empty target")
        n = vis_len[i] + len(instructions[i]) + 1 + len(targets[i])
        if n > cfg.max_seq:
            raise ModelError(f"sequence overflow: {n} positions > max_seq={cfg.max_seq}")
        dec_rows.append(n)
    dec_len = np.array(dec_rows)
    smax = int(dec_len.max())
    d = cfg.d_model

    bld = _Builder(cfg)
    g = bld.g
    pix = np.zeros((bsz, pmax, cfg.patch_dim))
    for i, p in enumerate(patches):
        pix[i, :len(p)] = p
    emb = g.add(bld.dense(g.const(pix), "vis.patch_w", "vis.patch_b"),
                g.slice(bld.p("vis.pos"), (slice(0, pmax),)))
    vmask = np.where(np.arange(pmax)[None, :] < vis_len[:, None], 0.0, _NEG)[:, None, None, :]
    vmask_id = g.const(vmask)
    x = emb
    ffn = {}
    for b in range(cfg.vision_blocks):
        x, act = bld.block(x, f"vis.{b}", vmask_id, bsz, pmax)
        ffn[("vision", b)] = act
    x = g.layernorm(x, bld.p("vis.ln_f.g"), bld.p("vis.ln_f.b"))
    visual = x
    conn = bld.dense(x, "conn.w", "conn.b")

    # decoder input rows gathered from [connector rows ; token embedding table]
    table = g.concat([g.reshape(conn, (bsz * pmax, d)), bld.p("lang.tok_emb")], axis=0)
    tok_off = bsz * pmax
    idx = np.full((bsz, smax), tok_off + PAD, dtype=np.int64)
    pred_rows, pred_targets, pred_weights, pred_counts = [], [], [], []
    for i in range(bsz):
        pv = int(vis_len[i])
        text = list(instructions[i]) + [BOS] + list(targets[i])
        idx[i, :pv] = i * pmax + np.arange(pv)
        idx[i, pv:pv + len(text)] = tok_off + np.asarray(text, dtype=np.int64)
        bos_pos = pv + len(instructions[i])
        if predict == "targets":
            gold = list(targets[i]) + [EOS]
            rows = [i * smax + bos_pos + j for j in range(len(gold))]
            w = loss_scale / len(gold) / (bsz if reduction == "mean" else 1)
            pred_rows += rows
            pred_targets += gold
            pred_weights += [w] * len(gold)
            pred_counts.append(len(gold))
        else:
            pred_rows.append(i * smax + int(dec_len[i]) - 1)
            pred_counts.append(1)
    x = g.add(g.gather(table, idx), g.slice(bld.p("lang.pos"), (slice(0, smax),)))
    causal = np.tril(np.ones((smax, smax), dtype=bool))
    valid_k = np.arange(smax)[None, :] < dec_len[:, None]
    dmask = np.where(causal[None, :, :] & valid_k[:, None, :], 0.0, _NEG)[:, None, :, :]
    dmask_id = g.const(dmask)
    for b in range(cfg.language_blocks):
        x, act = bld.block(x, f"lang.{b}", dmask_id, bsz, smax)
        ffn[("language", b)] = act
    x = g.layernorm(x, bld.p("lang.ln_f.g"), bld.p("lang.ln_f.b"))
    rows = g.gather(g.reshape(x, (bsz * smax, d)), np.asarray(pred_rows, dtype=np.int64))
    logits = bld.dense(rows, "head.w", "head.b")
    loss = None
    if predict == "targets":
        loss = g.softmax_cross_entropy(logits, pred_targets, pred_weights)
    return Plan(g, loss, logits, emb, visual, conn, ffn, vis_len, dec_len, np.array(pred_counts))


def bindings(model: Model, trainable: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, trainable) for k, v in model.params.items()}


def run(model: Model, plan: Plan, interventions=None, trainable: bool = False,
        dtype=np.float64):
    """Forward pass over a plan; returns (tape, loss float or None)."""
    out_node = plan.loss if plan.loss is not None else plan.logits
    value, tape = ad.forward(plan.graph, bindings(model, trainable), output=out_node,
                             interventions=interventions, dtype=dtype)
    loss = float(value.data) if plan.loss is not None else None
    return tape, loss


def batch_loss_and_grads(model: Model, grids, instructions, targets, reduction: str = "mean",
                         dtype=np.float64):
    plan = build_plan(model, grids, instructions, targets, reduction=reduction)
    tape, loss = run(model, plan, trainable=True, dtype=dtype)
    grads = ad.backward(tape, plan.loss)
    return loss, {k: t.data for k, t in grads.items()}


def batch_loss(model: Model, grids, instructions, targets, reduction: str = "mean",
               interventions_fn=None, dtype=np.float64) -> float:
    plan = build_plan(model, grids, instructions, targets, reduction=reduction)
    interventions = interventions_fn(plan) if interventions_fn else None
    _, loss = run(model, plan, interventions, dtype=dtype)
    return loss


def encode_image(model: Model, grid: PixelGrid) -> np.ndarray:
    """Final vision-encoder states, shape (patches, d_model)."""
    plan = build_plan(model, [grid], [[]], [[EOS]])
    tape, _ = run(model, plan)
    n = int(plan.vis_len[0])
    return tape.values[plan.visual][0, :n].astype(np.float32)


def forward_it(model: Model, grid: PixelGrid, instruction, target) -> tuple[np.ndarray, float]:
    """Teacher-forced logits (len(target)+1, vocab) and mean per-token NLL."""
    plan = build_plan(model, [grid], [list(instruction)], [list(target)])
    tape, loss = run(model, plan)
    return tape.values[plan.logits].copy(), loss


def generate_batch(model: Model, grids, instructions, max_len: int,
                   dtype=np.float32) -> list[list[int]]:
    """Greedy decoding; ties go to the lowest token id (``argmax`` semantics)."""
    if max_len < 1:
        raise ModelError("max_len must be >= 1")
    outs: list[list[int]] = [[] for _ in grids]
    done = [False] * len(grids)
    for _ in range(max_len):
        plan = build_plan(model, grids, instructions, outs, predict="next")
        tape, _ = run(model, plan, dtype=dtype)
        nxt = np.argmax(tape.values[plan.logits], axis=-1)
        for i, tok in enumerate(nxt):
            if done[i]:
                continue
            if int(tok) == EOS:
                done[i] = True
            else:
                outs[i].append(int(tok))
            room = model.config.max_seq - (len(grids[i].pixels[0]) // model.config.patch_cols
                                           + len(instructions[i]) + 1 + len(outs[i]))
            if room < 1:
                done[i] = True
        if all(done):
            break
    return outs


def generate(model: Model, grid: PixelGrid, instruction, max_len: int) -> list[int]:
    return generate_batch(model, [grid], [list(instruction)], max_len)[0]
