"""Candidate Answer Selector: a linear |A|-way scorer plus top-N extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .artifacts import check_vocab, load_artifact, save_artifact, vocab_hash
from .errors import ConfigError, TrainingError, ValidationError
from .text import TokenVocab, normalize


@dataclass
class CasModel:
    """Linear scorer over [bag-of-tokens(question) | mean-pooled image features]."""

    token_vocab: TokenVocab
    answer_vocabulary: tuple
    weights: np.ndarray  # (n_tokens + D, |A|)
    bias: np.ndarray  # (|A|,)
    loss_history: list = field(default_factory=list)

    @property
    def num_answers(self):
        return len(self.answer_vocabulary)


@dataclass(frozen=True)
class CandidateSet:
    example_id: str
    entries: tuple  # ((answer_label, cas_score), ...) best first

    @property
    def answers(self):
        return [a for a, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def _question_vector(vocab, tokens):
    v = np.zeros(len(vocab))
    for i in vocab.encode(tokens):
        v[i] = 1.0
    return v


def featurize(model_or_vocab, example, features):
    vocab = model_or_vocab.token_vocab if isinstance(model_or_vocab, CasModel) else model_or_vocab
    if example.image_id not in features:
        raise ValidationError(f"unknown image_id {example.image_id!r} for example {example.example_id}")
    img = features[example.image_id].vectors.mean(axis=0)
    return np.concatenate([_question_vector(vocab, example.question_tokens), img])


def _target_matrix(split, answer_index):
    Y = np.zeros((len(split.examples), len(answer_index)))
    for i, ex in enumerate(split.examples):
        for a, t in ex.answer_targets.items():
            Y[i, answer_index[a]] = t
    return Y / Y.sum(axis=1, keepdims=True)


def _softmax_ce(logits, Y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(Y * logp).sum(axis=1).mean(), np.exp(logp)


def train_cas(train_split, features, epochs=30, lr=0.5, seed=0, batch_size=32):
    """Minibatch gradient descent on soft-target cross-entropy.

    The returned model's ``loss_history`` holds the full-split loss before
    training and after every epoch.
    """
    if not train_split.examples:
        raise ConfigError("train_cas needs a non-empty split")
    rng = np.random.default_rng([seed, 101])
    vocab = TokenVocab(t for ex in train_split.examples for t in normalize(ex.question_tokens))
    X = np.stack([featurize(vocab, ex, features) for ex in train_split.examples])
    Y = _target_matrix(train_split, train_split.answer_index())
    W = rng.uniform(-0.01, 0.01, (X.shape[1], Y.shape[1]))
    b = np.zeros(Y.shape[1])
    history = [_softmax_ce(X @ W + b, Y)[0]]
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, P = _softmax_ce(X[idx] @ W + b, Y[idx])
            G = (P - Y[idx]) / len(idx)
            W = W - lr * (X[idx].T @ G)
            b = b - lr * G.sum(axis=0)
        loss = _softmax_ce(X @ W + b, Y)[0]
        if not np.isfinite(loss):
            raise TrainingError(f"CAS loss became non-finite at epoch {len(history)}")
        history.append(loss)
    return CasModel(vocab, tuple(train_split.answer_vocabulary), W, b, history)


def predict_scores(model, example, features):
    """Raw scores over the whole answer vocabulary."""
    return featurize(model, example, features) @ model.weights + model.bias


def predict_scores_batch(model, examples, features):
    if not examples:
        return np.zeros((0, model.num_answers))
    X = np.stack([featurize(model, ex, features) for ex in examples])
    return X @ model.weights + model.bias


def select_topn(scores, n):
    """Indices of the ``n`` best scores, descending; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= n <= scores.shape[-1]:
        raise ConfigError(f"N must lie in [1, {scores.shape[-1]}], got {n}")
    return K.topn_rows(scores, n)


def candidate_set(model, example, features, n, scores=None):
    if scores is None:
        scores = predict_scores(model, example, features)
    idx = select_topn(scores, n)
    entries = tuple((model.answer_vocabulary[i], float(scores[i])) for i in idx)
    return CandidateSet(example.example_id, entries)


def candidate_sets(model, split, features, n):
    S = predict_scores_batch(model, split.examples, features)
    if len(S) == 0:
        return {}
    top = select_topn(S, n)
    vocab = model.answer_vocabulary
    return {
        ex.example_id: CandidateSet(ex.example_id, tuple((vocab[j], float(S[i, j])) for j in top[i]))
        for i, ex in enumerate(split.examples)
    }


def accuracy(model, split, features):
    S = predict_scores_batch(model, split.examples, features)
    vocab = model.answer_vocabulary
    pred = select_topn(S, 1)[:, 0]
    return float(np.mean([vocab[p] == ex.best_answer for p, ex in zip(pred, split.examples)]))


def topn_recall(model, split, features, n_values):
    """Fraction of examples whose best-target answer is among the top N, per N."""
    A = model.num_answers
    for n in n_values:
        if not 1 <= n <= A:
            raise ConfigError(f"N must lie in [1, {A}], got {n}")
    S = predict_scores_batch(model, split.examples, features)
    index = {a: i for i, a in enumerate(model.answer_vocabulary)}
    gold = np.array([index[ex.best_answer] for ex in split.examples])
    order = np.argsort(-S, axis=1, kind="stable")
    rank = np.argmax(order == gold[:, None], axis=1)
    return {int(n): float(np.mean(rank < n)) for n in n_values}


def save_cas(model, path, *, seed, config):
    save_artifact(
        path,
        "cas",
        {
            "answer_vocabulary": list(model.answer_vocabulary),
            "vocab_hash": vocab_hash(model.answer_vocabulary),
            "token_vocabulary": model.token_vocab.tokens,
            "weights": model.weights.tolist(),
            "bias": model.bias.tolist(),
            "loss_history": [float(x) for x in model.loss_history],
        },
        seed=seed,
        config=config,
    )


def load_cas(path, vocab=None):
    doc = load_artifact(path, "cas")
    if vocab is not None:
        check_vocab(doc, vocab, f"CAS model {path}")
    return CasModel(
        TokenVocab.from_list(doc["token_vocabulary"]),
        tuple(doc["answer_vocabulary"]),
        np.array(doc["weights"], dtype=np.float64),
        np.array(doc["bias"], dtype=np.float64),
        list(doc["loss_history"]),
    )
