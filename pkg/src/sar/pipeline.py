"""Select-and-rerank inference and the evaluation protocol."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cas as cas_mod
from . import qtd as qtd_mod
from . import ve as ve_mod
from .captions import caption_for
from .errors import ConfigError, ValidationError
from .synthworld import NON_YES_NO, YES_NO

SCORE_CHUNK = 512


@dataclass(frozen=True)
class Prediction:
    example_id: str
    chosen_answer: str
    chosen_caption: object  # DenseCaption, or None when no scorer was used
    candidate_scores: tuple  # ((answer, score), ...) in CAS rank order
    n_prime_used: int


@dataclass
class EvalReport:
    split: str
    n_examples: int
    accuracy_all: float
    accuracy_yes_no: float | None
    accuracy_non_yes_no: float | None
    gap: float | None
    topn_recall_curve: dict
    per_category_breakdown: dict
    accuracy_iid: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["topn_recall_curve"] = {str(k): v for k, v in sorted(self.topn_recall_curve.items())}
        return d


def vqa_accuracy(prediction, example):
    """Soft target of the chosen answer, capped at 1; 0 when absent."""
    answer = prediction.chosen_answer if isinstance(prediction, Prediction) else prediction
    return min(1.0, float(example.answer_targets.get(answer, 0.0)))


def gap(accuracy_iid, accuracy_shifted):
    """In-distribution minus shifted accuracy; positive means prior-dependent."""
    if accuracy_iid is None or accuracy_shifted is None:
        return None
    return accuracy_iid - accuracy_shifted


def _mean(values):
    values = list(values)
    # fsum is exact, so the mean does not depend on example order
    return math.fsum(values) / len(values) if values else None


def _n_primes(qtd_model, policy, examples):
    if policy.n_prime_yes_no == policy.n_prime_other:
        return [policy.n_prime_yes_no] * len(examples)
    if qtd_model is None:
        raise ConfigError("a QTD model is required when the N' policy differs per question type")
    types = qtd_mod.classify_types(qtd_model, [ex.question_tokens for ex in examples])
    return [policy.for_type(t) for t in types]


def _check_policy(policy, ve_model, num_answers):
    train_n = ve_model.train_n if ve_model is not None else 1
    policy.validate()
    top = max(policy.n_prime_yes_no, policy.n_prime_other)
    if ve_model is None and top > 1:
        raise ConfigError("N' > 1 needs a VE model")
    if ve_model is not None and top > train_n:
        raise ConfigError(f"N'={top} exceeds the N={train_n} the VE model was trained with")
    if top > num_answers:
        raise ConfigError(f"N'={top} exceeds the answer vocabulary size {num_answers}")


def _score_pairs(ve_model, images, captions, chunk):
    out = np.empty(len(captions))
    for s in range(0, len(captions), chunk):
        out[s : s + chunk] = ve_mod.score_batch(ve_model, np.stack(images[s : s + chunk]), captions[s : s + chunk])
    return out


def predict(cas_model, ve_model, qtd_model, cdict, plan, policy, examples, features, chunk=SCORE_CHUNK):
    """Predictions for many examples; VE scoring is batched across examples."""
    examples = list(examples)
    _check_policy(policy, ve_model, cas_model.num_answers)
    if not examples:
        return []
    for ex in examples:
        if ex.image_id not in features:
            raise ValidationError(f"no features for image {ex.image_id!r} (example {ex.example_id})")
    n_primes = _n_primes(qtd_model, policy, examples)
    S = cas_mod.predict_scores_batch(cas_model, examples, features)
    top = cas_mod.select_topn(S, max(n_primes))
    vocab = cas_model.answer_vocabulary
    strategy = plan.for_phase("test")

    cand, caps, imgs = [], [], []
    for ex, n, row in zip(examples, n_primes, top):
        answers = [vocab[j] for j in row[:n]]
        cand.append(answers)
        if ve_model is not None:
            for a in answers:
                caps.append(caption_for(ex, a, strategy, cdict, use_annotation=False)[0])
                imgs.append(features[ex.image_id].vectors)
    scores = _score_pairs(ve_model, imgs, caps, chunk) if ve_model is not None else None

    preds, pos = [], 0
    for i, (ex, answers) in enumerate(zip(examples, cand)):
        n = len(answers)
        if ve_model is None:
            s = np.array([S[i, j] for j in top[i][:n]])
            chosen_caption = None
        else:
            s = scores[pos : pos + n]
        # argmax returns the first maximum, i.e. the better CAS rank wins ties
        best = int(np.argmax(s))
        if ve_model is not None:
            chosen_caption = caps[pos + best]
            pos += n
        preds.append(
            Prediction(ex.example_id, answers[best], chosen_caption, tuple(zip(answers, map(float, s))), n)
        )
    return preds


def infer_answer(cas_model, ve_model, qtd_model, cdict, plan, policy, example, features):
    """Single-example inference; scores the candidates one at a time."""
    return predict(cas_model, ve_model, qtd_model, cdict, plan, policy, [example], features, chunk=1)[0]


def _type_of(ex):
    return ex.question_type


def summarize(split_name, examples, predictions, iid_accuracy=None, recall=None):
    by_id = {p.example_id: p for p in predictions}
    acc = {ex.example_id: vqa_accuracy(by_id[ex.example_id], ex) for ex in examples}
    overall = _mean(acc.values())
    per_type = {t: _mean(acc[ex.example_id] for ex in examples if _type_of(ex) == t) for t in (YES_NO, NON_YES_NO)}
    cats = {}
    for ex in examples:
        cats.setdefault(ex.question_category, []).append(acc[ex.example_id])
    breakdown = {c: {"accuracy": _mean(v), "count": len(v)} for c, v in sorted(cats.items())}
    return EvalReport(
        split=split_name,
        n_examples=len(examples),
        accuracy_all=overall,
        accuracy_yes_no=per_type[YES_NO],
        accuracy_non_yes_no=per_type[NON_YES_NO],
        gap=gap(iid_accuracy, overall),
        topn_recall_curve=dict(recall or {}),
        per_category_breakdown=breakdown,
        accuracy_iid=iid_accuracy,
    )


def evaluate(cas_model, ve_model, qtd_model, cdict, plan, policy, split, features, iid_split=None, recall_ns=None):
    """Accuracy report on ``split``; ``gap`` is filled only when ``iid_split`` is given."""
    if not split.examples:
        raise ValidationError(f"split {split.name!r} is empty")
    preds = predict(cas_model, ve_model, qtd_model, cdict, plan, policy, split.examples, features)
    iid_acc = None
    if iid_split is not None:
        iid_preds = predict(cas_model, ve_model, qtd_model, cdict, plan, policy, iid_split.examples, features)
        iid_acc = _mean(vqa_accuracy(p, ex) for p, ex in zip(iid_preds, iid_split.examples))
    if recall_ns is None:
        recall_ns = range(1, cas_model.num_answers + 1)
    recall = cas_mod.topn_recall(cas_model, split, features, list(recall_ns))
    return summarize(split.name, split.examples, preds, iid_acc, recall)


def ablation_table(rows, baseline="CAS-only"):
    """Rows of ``(name, EvalReport)`` -> list of dicts with deltas against ``baseline``."""
    reports = dict(rows)
    if baseline not in reports:
        raise ConfigError(f"ablation needs a {baseline!r} row")
    base = reports[baseline].accuracy_all
    out = []
    for name, rep in rows:
        out.append(
            {
                "name": name,
                "accuracy_all": rep.accuracy_all,
                "accuracy_yes_no": rep.accuracy_yes_no,
                "accuracy_non_yes_no": rep.accuracy_non_yes_no,
                "accuracy_iid": rep.accuracy_iid,
                "gap": rep.gap,
                "delta_vs_cas_only": rep.accuracy_all - base,
            }
        )
    return out


def sweep_n_prime(cas_model, ve_model, cdict, plan, split, features, range_yes_no, range_other):
    """Accuracy per (question type, N'), grouping examples by their annotated type.

    Candidates are scored once at the largest N' and the prefix argmax is
    taken for every smaller value, which is what separate runs would pick.
    """
    range_yes_no, range_other = list(range_yes_no), list(range_other)
    hi = max(range_yes_no + range_other)
    lo = min(range_yes_no + range_other)
    if lo < 1 or hi > ve_model.train_n:
        raise ConfigError(f"N' range must lie within [1, {ve_model.train_n}]")
    from .qtd import NPrimePolicy

    preds = predict(cas_model, ve_model, None, cdict, plan, NPrimePolicy(hi, hi), split.examples, features)
    rows = []
    for qtype, values in ((YES_NO, range_yes_no), (NON_YES_NO, range_other)):
        pairs = [(ex, p) for ex, p in zip(split.examples, preds) if ex.question_type == qtype]
        for n in values:
            accs = []
            for ex, p in pairs:
                s = np.array([sc for _, sc in p.candidate_scores[:n]])
                accs.append(vqa_accuracy(p.candidate_scores[int(np.argmax(s))][0], ex))
            rows.append({"type": qtype, "n_prime": n, "accuracy": _mean(accs) if accs else None, "count": len(accs)})
    return rows


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()
