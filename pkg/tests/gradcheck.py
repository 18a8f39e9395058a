"""Finite-difference checks shared by the unit and acceptance suites."""

from __future__ import annotations

import numpy as np

from mnaft import autodiff as ad
from mnaft.model import Model, ModelConfig, build_plan, init_model, run
from mnaft.synthtask import make_languages, make_tasks, instruction_tokens, sample_dataset

FD_STEP = 1e-5
TOL = 1e-3


def _case_inputs(rng, shapes):
    return {name: rng.standard_normal(shape).astype(np.float32) for name, shape in shapes.items()}


# name -> (input shapes, builder(graph, ids, rng) -> output node)
OP_CASES = {
    "matmul": ({"x": (3, 4), "w": (4, 2)}, lambda g, n, r: g.matmul(n["x"], n["w"])),
    "matmul_batched_weight": ({"x": (2, 3, 4), "w": (4, 5)}, lambda g, n, r: g.matmul(n["x"], n["w"])),
    "matmul_4d": ({"x": (2, 2, 3, 4), "y": (2, 2, 4, 3)}, lambda g, n, r: g.matmul(n["x"], n["y"])),
    "add": ({"x": (3, 4), "y": (3, 4)}, lambda g, n, r: g.add(n["x"], n["y"])),
    "add_broadcast": ({"x": (2, 3, 4), "b": (4,)}, lambda g, n, r: g.add(n["x"], n["b"])),
    "mul": ({"x": (3, 4), "y": (3, 4)}, lambda g, n, r: g.mul(n["x"], n["y"])),
    "mul_broadcast": ({"x": (3, 4), "y": (3, 1)}, lambda g, n, r: g.mul(n["x"], n["y"])),
    "scale": ({"x": (3, 4)}, lambda g, n, r: g.scale(n["x"], -1.7)),
    "concat": ({"x": (2, 3), "y": (4, 3)}, lambda g, n, r: g.concat([n["x"], n["y"]], axis=0)),
    "concat_axis1": ({"x": (2, 3), "y": (2, 2)}, lambda g, n, r: g.concat([n["x"], n["y"]], axis=1)),
    "slice": ({"x": (5, 4)}, lambda g, n, r: g.slice(n["x"], (slice(1, 4), slice(0, 2)))),
    "mean_all": ({"x": (3, 4)}, lambda g, n, r: g.mean(n["x"])),
    "mean_axis": ({"x": (3, 4, 2)}, lambda g, n, r: g.mean(n["x"], axis=1)),
    "layernorm": ({"x": (3, 6), "g": (6,), "b": (6,)},
                  lambda g, n, r: g.layernorm(n["x"], n["g"], n["b"])),
    "gelu": ({"x": (4, 5)}, lambda g, n, r: g.gelu(n["x"])),
    "gather": ({"t": (6, 3)}, lambda g, n, r: g.gather(n["t"], [[0, 2], [2, 5], [1, 1]])),
    "softmax": ({"x": (3, 5)}, lambda g, n, r: g.softmax(n["x"])),
    "transpose": ({"x": (2, 3, 4)}, lambda g, n, r: g.transpose(n["x"], (2, 0, 1))),
    "reshape": ({"x": (2, 3, 4)}, lambda g, n, r: g.reshape(n["x"], (6, 4))),
    "softmax_cross_entropy": ({"x": (4, 5)}, lambda g, n, r: g.softmax_cross_entropy(
        n["x"], r.integers(0, 5, size=4), r.uniform(0.1, 1.0, size=4))),
}


def op_case_error(case: str, seed: int) -> float:
    """Worst per-input relative error between backward and central differences."""
    shapes, build = OP_CASES[case]
    rng = np.random.default_rng(seed)
    values = _case_inputs(rng, shapes)
    g = ad.Graph()
    ids = {name: g.input(name) for name in shapes}
    out = build(g, ids, rng)
    # project non-scalar outputs onto a fixed random direction
    probe = g.nodes[out].kind != "softmax_cross_entropy"
    if probe:
        val, _ = ad.forward(g, {k: ad.Tensor(v) for k, v in values.items()}, output=out)
        r = g.const(rng.standard_normal(val.shape))
        out = g.scale(g.mean(g.mul(out, r)), float(np.prod(val.shape)))

    def loss(overrides):
        binds = {k: ad.Tensor(v.astype(np.float64)) for k, v in values.items()}
        binds.update(overrides)
        return float(ad.forward(g, binds, output=out)[0].data)

    _, tape = ad.forward(g, {k: ad.Tensor(v, trainable=True) for k, v in values.items()}, output=out)
    grads = ad.backward(tape, out)
    worst = 0.0
    for name in shapes:
        fd = ad.fd_gradient(lambda t, name=name: loss({name: t}), ad.Tensor(values[name].astype(np.float64)),
                            FD_STEP)
        worst = max(worst, ad.relative_error(grads[name].data, fd.data))
    return worst


TINY = ModelConfig(d_model=8, n_heads=2, d_ffn=8, vision_blocks=1, language_blocks=1,
                   max_image_patches=28, max_seq=48)


def forward_it_error(seed: int, coords_per_tensor: int = 3) -> float:
    """Relative error of the full teacher-forced loss gradient on sampled coordinates of every tensor."""
    rng = np.random.default_rng(seed)
    model = init_model(TINY, seed=seed)
    # random non-zero biases and gains so every path carries signal
    for k, v in model.params.items():
        if v.ndim == 1:
            model.params[k] = (v + 0.1 * rng.standard_normal(v.shape)).astype(np.float32)
    task = make_tasks(make_languages(3, seed))[seed % 3]
    sample = sample_dataset(task, 1, seed, "score")[0]
    plan = build_plan(model, [sample.v], [instruction_tokens(task, "translate")], [list(sample.t)])
    tape, _ = run(model, plan, trainable=True)
    grads = ad.backward(tape, plan.loss)

    picks = []
    for name, arr in model.params.items():
        flat = rng.choice(arr.size, size=min(coords_per_tensor, arr.size), replace=False)
        picks += [(name, int(j)) for j in flat]
    analytic = np.array([grads[n].data.reshape(-1)[j] for n, j in picks], dtype=np.float64)
    x0 = np.array([model.params[n].reshape(-1)[j] for n, j in picks], dtype=np.float64)

    def f(t):
        params = {k: v.astype(np.float64) for k, v in model.params.items()}
        for (n, j), val in zip(picks, t.data):
            params[n].reshape(-1)[j] = val
        return run(Model(model.config, params), plan)[1]

    fd = ad.fd_gradient(f, ad.Tensor(x0), FD_STEP)
    return ad.relative_error(analytic, fd.data)
