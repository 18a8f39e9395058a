import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mnaft.evalreport import (EvalResult, ProfileTable, Projection, activation_profiles, corpus_bleu,
                              emit_svg, evaluate, exact_match, forgetting_from_results, forgetting_report,
                              neuron_projection, pca_2d, token_accuracy)
from mnaft.maskedft import FinetuneConfig, ablation_mode_masks, finetune
from mnaft.model import ModelConfig, init_model
from mnaft.partition import LayerPartition, NeuronPartition
from mnaft.synthtask import make_languages, make_tasks, sample_dataset

SMALL = ModelConfig(d_model=16, n_heads=2, d_ffn=16, vision_blocks=2, language_blocks=2)


@pytest.fixture(scope="module")
def suite():
    tasks = make_tasks(make_languages(3, 0))
    return tasks, [sample_dataset(t, 10, 0, "score") for t in tasks]


def test_bleu_perfect_and_empty():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
    assert corpus_bleu(refs, refs) == 1.0
    assert corpus_bleu([[], []], refs) == 0.0
    assert corpus_bleu([], []) == 0.0


def test_bleu_short_mismatch_is_zero_without_smoothing():
    # no 3-gram or 4-gram matches
    assert corpus_bleu([[1, 2, 3]], [[1, 2, 4]]) == 0.0


def test_bleu_hand_values():
    # p1..p4 = 4/5, 3/4, 2/3, 1/2 -> geometric mean (1/5)^(1/4)
    assert abs(corpus_bleu([[1, 2, 3, 4, 5]], [[1, 2, 3, 4, 6]]) - 0.2 ** 0.25) <= 1e-9
    # all precisions 1, brevity penalty exp(1 - 6/4)
    assert abs(corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5, 6]]) - math.exp(-0.5)) <= 1e-9
    # clipping: repeated unigram counts once
    assert corpus_bleu([[1, 1, 1, 1]], [[1, 2, 3, 4]]) == 0.0


def test_bleu_is_corpus_level_and_order_invariant():
    cands = [[1, 2, 3, 4, 5], [9, 8, 7, 6], [1, 2, 3, 4]]
    refs = [[1, 2, 3, 4, 6], [9, 8, 7, 6], [1, 2, 3, 4, 5]]
    a = corpus_bleu(cands, refs)
    b = corpus_bleu(cands[::-1], refs[::-1])
    assert a == pytest.approx(b, abs=1e-15) and 0 < a < 1
    with pytest.raises(ValueError):
        corpus_bleu(cands, refs[:2])


def test_token_accuracy_and_exact_match():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[4, 5, 6]], [[1, 2, 3]]) == 0.0
    assert token_accuracy([[1, 2]], [[1, 2, 3, 4]]) == 0.5
    assert token_accuracy([[1, 2, 3, 4, 5, 6]], [[1, 2, 9]]) == pytest.approx(2 / 3)
    assert exact_match([[1, 2], [3]], [[1, 2], [4]]) == 0.5
    assert exact_match([[1, 2, 3]], [[1, 2]]) == 0.0


def test_evaluate_is_deterministic(suite):
    tasks, sets = suite
    m = init_model(SMALL, 0)
    a = evaluate(m, tasks[0], sets[0], "x", batch_size=4)
    b = evaluate(m, tasks[0], sets[0], "x", batch_size=10)
    assert a == b and a.samples == 10
    with pytest.raises(ValueError):
        evaluate(m, tasks[0], [])


def test_forgetting_identity_gives_zero_deltas(suite):
    tasks, sets = suite
    m = init_model(SMALL, 1)
    rep = forgetting_report(m, m.copy(), tasks, 1, {t.task_id: s for t, s in zip(tasks, sets)})
    assert rep.target_before == rep.target_after
    assert set(rep.others) == {0, 2}
    assert all(o["delta"] == 0.0 for o in rep.others.values()) and rep.mean_delta == 0.0


def test_forgetting_mean_delta():
    before = {t: EvalResult(t, "b", 0.5, 0, 0, 1) for t in range(3)}
    after = {0: EvalResult(0, "a", 0.9, 0, 0, 1), 1: EvalResult(1, "a", 0.4, 0, 0, 1),
             2: EvalResult(2, "a", 0.3, 0, 0, 1)}
    rep = forgetting_from_results(before, after, 0)
    assert rep.target_after == 0.9
    assert rep.mean_delta == pytest.approx(-0.15)
    assert rep.to_dict()["others"]["2"]["delta"] == pytest.approx(-0.2)


def test_profiles_zero_model(suite):
    tasks, sets = suite
    table = activation_profiles(init_model(SMALL, 0, zero=True), tasks, sets)
    assert len(table.rows) == 4 * 3
    assert all(v == 0.0 for *_, v in table.rows)


def test_profiles_deltas_telescope_and_csv(suite, tmp_path):
    tasks, sets = suite
    table = activation_profiles(init_model(SMALL, 2), tasks, sets)
    assert all(v > 0 for *_, v in table.rows)
    deltas = {(m, b, t): d for m, b, t, d in table.deltas()}
    assert set(deltas) == {(m, 1, t) for m in ("vision", "language") for t in range(3)}
    for t in range(3):
        d = deltas[("language", 1, t)]
        assert d == pytest.approx(table.mean("language", 1, t) - table.mean("language", 0, t), abs=1e-15)
    table.to_csv(tmp_path / "p.csv")
    back = ProfileTable.from_csv(tmp_path / "p.csv")
    assert back.rows == table.rows


def test_pca_identical_samples_collapse_to_origin():
    points, dirs, vals = pca_2d(np.tile([1.0, -2.0, 3.0], (6, 1)))
    assert np.all(points == 0.0) and np.all(vals == 0.0)


def test_pca_matches_covariance_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 5)) @ rng.standard_normal((5, 5))
    points, dirs, vals = pca_2d(x)
    cov = np.cov(x, rowvar=False, bias=True)
    oracle = np.sort(np.linalg.eigvalsh(cov))[::-1]
    np.testing.assert_allclose(vals, oracle, atol=1e-6)
    np.testing.assert_allclose(dirs.T @ dirs, np.eye(2), atol=1e-9)
    np.testing.assert_allclose(points.var(axis=0), oracle[:2], rtol=1e-6)
    proj = Projection(points, [0] * 50, dirs, vals, "language", 0, "general")
    assert proj.explained == pytest.approx(oracle[:2].sum() / oracle.sum(), abs=1e-6)


def test_neuron_projection(suite):
    tasks, sets = suite
    part = NeuronPartition(0.25, 1.0, [LayerPartition("language", 1, 0.0, (0, 1, 2, 3),
                                                      {0: (4, 5), 1: (6,), 2: ()})])
    m = init_model(SMALL, 3)
    proj = neuron_projection(m, part, tasks, sets, "general", "language")
    assert proj.points.shape == (30, 2) and proj.labels == [0] * 10 + [1] * 10 + [2] * 10
    with pytest.raises(ValueError):
        neuron_projection(m, part, tasks, sets, "general", "vision")
    with pytest.raises(ValueError):
        neuron_projection(m, part, tasks, sets, "shared", "language")


def test_svg_output_deterministic_and_valid(tmp_path, suite):
    tasks, sets = suite
    table = activation_profiles(init_model(SMALL, 2), tasks, sets)
    emit_svg(table, tmp_path / "a.svg")
    emit_svg(table, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    root = ET.parse(tmp_path / "a.svg").getroot()
    assert root.tag.endswith("svg") and len(root.findall("{http://www.w3.org/2000/svg}rect")) > 12


def test_svg_empty_inputs_still_valid(tmp_path):
    emit_svg(ProfileTable([]), tmp_path / "e.svg")
    ET.parse(tmp_path / "e.svg")
    emit_svg(Projection(np.zeros((0, 2)), [], np.zeros((3, 2)), np.zeros(3), "vision", 0, "specific"),
             tmp_path / "p.svg")
    ET.parse(tmp_path / "p.svg")
    with pytest.raises(TypeError):
        emit_svg(object(), tmp_path / "x.svg")


def test_zero_mask_finetune_reports_no_forgetting(suite):
    tasks, sets = suite
    m = init_model(SMALL, 4)
    zero = ablation_mode_masks("mnaft", NeuronPartition(0.5, 1.0, []), None, m, 0)
    tuned, _ = finetune(m, [(s, tasks[0]) for s in sets[0]], FinetuneConfig(steps=3, batch_size=4), zero)
    rep = forgetting_report(m, tuned, tasks, 0, {t.task_id: s for t, s in zip(tasks, sets)})
    assert rep.target_after == rep.target_before and rep.mean_delta == 0.0


def test_constant_profile_has_zero_deltas():
    table = ProfileTable([("vision", b, t, 0.25) for b in range(3) for t in range(2)])
    assert [d for *_, d in table.deltas()] == [0.0] * 4


def test_projection_is_idempotent_in_its_plane():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 4))
    points, dirs, _ = pca_2d(x)
    again = points @ dirs.T @ dirs
    np.testing.assert_allclose(again, points, atol=1e-9)
    shifted, _, _ = pca_2d(x + 3.0)
    np.testing.assert_allclose(shifted, points, atol=1e-9)
