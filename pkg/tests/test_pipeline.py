import random
from dataclasses import replace

import numpy as np
import pytest

from sar import cas as cas_mod
from sar import pipeline, ve
from sar.captions import StrategyPlan
from sar.config import CasParams, QtdParams, VeParams
from sar.errors import ConfigError, ValidationError
from sar.experiment import build_world, fit_cas, fit_qtd, fit_ve
from sar.qtd import NPrimePolicy
from sar.synthworld import NON_YES_NO, YES_NO, DatasetSplit, WorldConfig

RTOC = StrategyPlan("R", "C")
N = 8


@pytest.fixture(scope="module")
def system():
    world = build_world(WorldConfig(seed=5, num_images=150))
    cas_model = fit_cas(world, CasParams(epochs=10))
    ve_model, _ = fit_ve(world, cas_model, VeParams(epochs=2, warmup_epochs=2, d=16, hidden=16), N, "R")
    qtd_model, _ = fit_qtd(world, QtdParams(folds=2, epochs=3))
    from sar.captions import build_category_dict

    return world, cas_model, ve_model, qtd_model, build_category_dict(world.split("train"))


def _cas_top1(cas_model, examples, feats):
    S = cas_mod.predict_scores_batch(cas_model, examples, feats)
    return [cas_model.answer_vocabulary[i] for i in cas_mod.select_topn(S, 1)[:, 0]]


def test_vqa_accuracy_lookup():
    from sar.synthworld import VqaExample

    ex = VqaExample("e", "i", ("what", "color"), {"red": 1.0, "blue": 0.6}, "what color", NON_YES_NO)
    assert pipeline.vqa_accuracy("red", ex) == 1.0
    assert pipeline.vqa_accuracy("blue", ex) == 0.6
    assert pipeline.vqa_accuracy("green", ex) == 0.0


def test_gap_convention():
    # published in-distribution 70.63, shifted 65.44, gap 5.19
    assert pipeline.gap(70.63, 65.44) == pytest.approx(5.19, abs=1e-9)
    assert pipeline.gap(None, 0.5) is None


@pytest.mark.parametrize("with_ve", [False, True])
def test_policy_one_one_is_cas_top1(system, with_ve):
    world, cas_model, ve_model, _, cdict = system
    test = world.split("test_shifted")
    preds = pipeline.predict(cas_model, ve_model if with_ve else None, None, cdict, RTOC, NPrimePolicy(1, 1),
                             test.examples, world.features)
    assert [p.chosen_answer for p in preds] == _cas_top1(cas_model, test.examples, world.features)
    assert all(p.n_prime_used == 1 for p in preds)


def black_scorer(token_vocab, feature_dim=24):
    """Every weight zero except a path that lights up on the token "black"."""
    arch = ve.VeArch(d=4, heads=2, hidden=2, feature_dim=feature_dim)
    params = {k: np.zeros(s) for k, s in ve.param_shapes(arch, len(token_vocab)).items()}
    params["emb"][token_vocab.index["black"], 0] = 1.0
    params["head_w1"][0, 0] = 1.0
    params["head_w2"][0, 0] = 1.0
    return ve.VeModel(arch, token_vocab, params, train_n=20)


def test_hand_built_scorer_picks_black(system):
    world, cas_model, ve_model, _, cdict = system
    model = black_scorer(ve_model.token_vocab)
    colour_qs = [ex for ex in world.split("test_shifted").examples if ex.question_category == "what color"]
    preds = pipeline.predict(cas_model, model, None, cdict, RTOC, NPrimePolicy(20, 20), colour_qs, world.features)
    assert colour_qs and all(p.chosen_answer == "black" for p in preds)
    assert all(p.chosen_caption.tokens[0] == "black" for p in preds)


def test_equal_scores_fall_back_to_cas_rank(system):
    world, cas_model, ve_model, _, cdict = system
    flat = ve_model.copy()
    flat.params["head_w2"] = np.zeros_like(flat.params["head_w2"])
    flat.params["head_b2"] = np.zeros_like(flat.params["head_b2"])
    test = world.split("test_shifted")
    preds = pipeline.predict(cas_model, flat, None, cdict, RTOC, NPrimePolicy(N, N), test.examples, world.features)
    assert [p.chosen_answer for p in preds] == _cas_top1(cas_model, test.examples, world.features)


def test_batching_independence(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    examples = world.split("test_shifted").examples
    pol = NPrimePolicy(2, N)
    batched = pipeline.predict(cas_model, ve_model, qtd_model, cdict, RTOC, pol, examples, world.features)
    single = [pipeline.infer_answer(cas_model, ve_model, qtd_model, cdict, RTOC, pol, ex, world.features) for ex in examples]
    for a, b in zip(batched, single):
        assert a.chosen_answer == b.chosen_answer and a.n_prime_used == b.n_prime_used
        assert [x for x, _ in a.candidate_scores] == [x for x, _ in b.candidate_scores]
        np.testing.assert_allclose([s for _, s in a.candidate_scores], [s for _, s in b.candidate_scores], rtol=1e-12)


def test_prediction_invariants(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    preds = pipeline.predict(cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(2, N),
                             world.split("val_iid").examples, world.features)
    for p in preds:
        scores = [s for _, s in p.candidate_scores]
        assert len(scores) == p.n_prime_used
        assert p.chosen_answer == p.candidate_scores[int(np.argmax(scores))][0]


def test_equal_policy_bypasses_qtd(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    test = world.split("test_shifted")
    a = pipeline.evaluate(cas_model, ve_model, None, cdict, RTOC, NPrimePolicy(N, N), test, world.features)
    b = pipeline.evaluate(cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(N, N), test, world.features)
    assert a.to_dict() == b.to_dict()


def test_policy_checks(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    ex = world.split("test_shifted").examples[:3]
    with pytest.raises(ConfigError, match="exceeds the N=8"):
        pipeline.predict(cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(2, 9), ex, world.features)
    with pytest.raises(ConfigError, match="needs a VE"):
        pipeline.predict(cas_model, None, None, cdict, RTOC, NPrimePolicy(2, 2), ex, world.features)
    with pytest.raises(ConfigError, match="QTD"):
        pipeline.predict(cas_model, ve_model, None, cdict, RTOC, NPrimePolicy(1, 4), ex, world.features)
    with pytest.raises(ValidationError, match="no features"):
        pipeline.predict(cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(2, 4), ex, {})


def test_evaluate_is_order_invariant(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    test = world.split("test_shifted")
    shuffled = list(test.examples)
    random.Random(0).shuffle(shuffled)
    args = (cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(2, N))
    a = pipeline.evaluate(*args, test, world.features, iid_split=world.split("val_iid"))
    b = pipeline.evaluate(*args, replace(test, examples=shuffled), world.features, iid_split=world.split("val_iid"))
    assert a.to_dict() == b.to_dict()


def test_report_fields_and_recall_bound(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    test = world.split("test_shifted")
    pol = NPrimePolicy(2, 5)
    rep = pipeline.evaluate(cas_model, ve_model, qtd_model, cdict, RTOC, pol, test, world.features,
                            iid_split=world.split("val_iid"))
    assert rep.gap == pytest.approx(rep.accuracy_iid - rep.accuracy_all, abs=1e-15)
    counts = {t: sum(ex.question_type == t for ex in test.examples) for t in (YES_NO, NON_YES_NO)}
    combined = (rep.accuracy_yes_no * counts[YES_NO] + rep.accuracy_non_yes_no * counts[NON_YES_NO]) / len(test)
    assert rep.accuracy_all == pytest.approx(combined, abs=1e-12)
    assert sum(v["count"] for v in rep.per_category_breakdown.values()) == len(test)
    # the reranker cannot recover an answer CAS did not select
    S = cas_mod.predict_scores_batch(cas_model, test.examples, world.features)
    top = cas_mod.select_topn(S, 5)
    for qtype, n, acc in ((YES_NO, 2, rep.accuracy_yes_no), (NON_YES_NO, 5, rep.accuracy_non_yes_no)):
        hits = [cas_model.answer_vocabulary.index(ex.best_answer) in top[i][:n]
                for i, ex in enumerate(test.examples) if ex.question_type == qtype]
        assert acc <= np.mean(hits) + 1e-12
    no_iid = pipeline.evaluate(cas_model, ve_model, qtd_model, cdict, RTOC, pol, test, world.features)
    assert no_iid.gap is None and no_iid.accuracy_iid is None


def test_perfect_predictions_score_one(system):
    world, *_ = system
    test = world.split("test_shifted")
    preds = [pipeline.Prediction(ex.example_id, ex.best_answer, None, ((ex.best_answer, 1.0),), 1) for ex in test.examples]
    assert pipeline.summarize(test.name, test.examples, preds).accuracy_all == 1.0


def test_empty_split_rejected(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    with pytest.raises(ValidationError, match="empty"):
        pipeline.evaluate(cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(1, 1),
                          DatasetSplit("test_shifted", [], ()), world.features)


def test_ablation_table_deltas(system):
    world, cas_model, ve_model, qtd_model, cdict = system
    test = world.split("test_shifted")
    base = pipeline.evaluate(cas_model, None, None, cdict, RTOC, NPrimePolicy(1, 1), test, world.features)
    sar = pipeline.evaluate(cas_model, ve_model, qtd_model, cdict, RTOC, NPrimePolicy(2, N), test, world.features)
    rows = pipeline.ablation_table([("CAS-only", base), ("SAR", sar)])
    assert rows[0]["delta_vs_cas_only"] == 0.0
    assert rows[1]["delta_vs_cas_only"] == sar.accuracy_all - base.accuracy_all
    assert base.accuracy_all == cas_mod.accuracy(cas_model, test, world.features)
    with pytest.raises(ConfigError):
        pipeline.ablation_table([("SAR", sar)])
    csv = pipeline.rows_to_csv(rows, ["name", "gap"])
    assert csv.splitlines() == ["name,gap", "CAS-only,", "SAR,"]


def test_sweep_shape_and_first_point(system):
    world, cas_model, ve_model, _, cdict = system
    test = world.split("test_shifted")
    rows = pipeline.sweep_n_prime(cas_model, ve_model, cdict, RTOC, test, world.features, [1, 2], range(1, N + 1))
    assert len(rows) == 2 + N
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)
    top1 = dict(zip((ex.example_id for ex in test.examples), _cas_top1(cas_model, test.examples, world.features)))
    for qtype in (YES_NO, NON_YES_NO):
        exs = [ex for ex in test.examples if ex.question_type == qtype]
        want = np.mean([pipeline.vqa_accuracy(top1[ex.example_id], ex) for ex in exs])
        got = next(r for r in rows if r["type"] == qtype and r["n_prime"] == 1)
        assert got["accuracy"] == pytest.approx(want, abs=1e-15) and got["count"] == len(exs)
    with pytest.raises(ConfigError):
        pipeline.sweep_n_prime(cas_model, ve_model, cdict, RTOC, test, world.features, [1], [N + 1])
