"""Question Type Discriminator: a small gated recurrent binary classifier.

It decides yes/no versus non-yes/no from the question tokens alone and is
used only at test time to pick how many candidates the scorer reranks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import autograd as ag
from .artifacts import load_artifact, save_artifact
from .errors import ConfigError
from .optim import Adam
from .synthworld import NON_YES_NO, YES_NO
from .text import UNK, TokenVocab, normalize

INIT_RANGE = 0.08


@dataclass
class QtdModel:
    token_vocab: TokenVocab
    params: dict
    emb_dim: int = 16
    hidden: int = 32


@dataclass(frozen=True)
class NPrimePolicy:
    n_prime_yes_no: int
    n_prime_other: int

    def validate(self, train_n=None):
        for name, v in (("n_prime_yes_no", self.n_prime_yes_no), ("n_prime_other", self.n_prime_other)):
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
            if train_n is not None and v > train_n:
                raise ConfigError(f"{name}={v} exceeds the N={train_n} used at training")
        return self

    def for_type(self, question_type):
        return self.n_prime_yes_no if question_type == YES_NO else self.n_prime_other


def _init(vocab_size, emb_dim, hidden, rng):
    shapes = {
        "emb": (vocab_size, emb_dim),
        "w_z": (emb_dim, hidden),
        "u_z": (hidden, hidden),
        "b_z": (hidden,),
        "w_r": (emb_dim, hidden),
        "u_r": (hidden, hidden),
        "b_r": (hidden,),
        "w_h": (emb_dim, hidden),
        "u_h": (hidden, hidden),
        "b_h": (hidden,),
        "out_w": (hidden, 1),
        "out_b": (1,),
    }
    params = {k: rng.uniform(-INIT_RANGE, INIT_RANGE, s) for k, s in shapes.items()}
    for k in ("b_z", "b_r", "b_h", "out_b"):
        params[k] = np.zeros(shapes[k])
    return params


def _encode(vocab, questions):
    rows = [vocab.encode(q) or [vocab.index[UNK]] for q in questions]
    L = max(len(r) for r in rows)
    ids = np.zeros((len(rows), L), dtype=np.int64)
    mask = np.zeros((len(rows), L))
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def _logits(params, ids, mask, hidden):
    """GRU over the padded batch; padded steps carry the state through unchanged."""
    B, L = ids.shape
    x = ag.gather_rows(params["emb"], ids)
    h = ag.Tensor(np.zeros((B, hidden)))
    for t in range(L):
        xt = ag.take(x, t, axis=1)
        z = ag.sigmoid(ag.matmul(xt, params["w_z"]) + ag.matmul(h, params["u_z"]) + params["b_z"])
        r = ag.sigmoid(ag.matmul(xt, params["w_r"]) + ag.matmul(h, params["u_r"]) + params["b_r"])
        cand = ag.tanh(ag.matmul(xt, params["w_h"]) + ag.matmul(ag.mul(r, h), params["u_h"]) + params["b_h"])
        new = h + ag.mul(z, cand - h)
        m = mask[:, t : t + 1]
        h = ag.mul(new, m) + ag.mul(h, 1.0 - m)
    return ag.reshape(ag.matmul(h, params["out_w"]) + params["out_b"], (B,))


def _fit(questions, labels, vocab, seed, epochs, lr, batch_size, unk_rate, emb_dim, hidden):
    rng = np.random.default_rng([seed, 606])
    params = {k: ag.Tensor(v, requires_grad=True) for k, v in _init(len(vocab), emb_dim, hidden, rng).items()}
    opt = Adam(params, lr=lr)
    ids, mask = _encode(vocab, questions)
    y = np.asarray(labels, dtype=np.float64)
    unk = vocab.index[UNK]
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            b = order[start : start + batch_size]
            bids = ids[b].copy()
            # word dropout teaches the model to read unseen words as <unk>
            drop = (rng.random(bids.shape) < unk_rate) & (mask[b] > 0)
            bids[drop] = unk
            loss = ag.bce_with_logits_mean(_logits(params, bids, mask[b], hidden), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return QtdModel(vocab, {k: p.data for k, p in params.items()}, emb_dim, hidden)


def _labels(split):
    return [1.0 if ex.question_type == YES_NO else 0.0 for ex in split.examples]


def fold_indices(n, folds, seed):
    """Shuffled partition of ``range(n)`` into ``folds`` held-out index arrays."""
    if not 2 <= folds <= n:
        raise ConfigError(f"folds must lie in [2, {n}], got {folds}")
    order = np.random.default_rng([seed, 607]).permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def predict_proba(model, questions):
    ids, mask = _encode(model.token_vocab, questions)
    params = {k: ag.Tensor(v) for k, v in model.params.items()}
    return K.sigmoid(_logits(params, ids, mask, model.hidden).data)


def train_qtd(train_split, folds=5, seed=0, epochs=8, lr=0.01, batch_size=64, unk_rate=0.15, emb_dim=16, hidden=32):
    """Cross-validate, then fit on the whole split.

    Returns ``(model, cv_accuracy)``; the accuracy is the mean held-out
    accuracy over the ``folds`` folds.
    """
    labels = _labels(train_split)
    if len(set(labels)) < 2:
        raise ConfigError("train_qtd needs both yes/no and non-yes/no questions")
    questions = [ex.question_tokens for ex in train_split.examples]
    vocab = TokenVocab(t for q in questions for t in normalize(q))
    y = np.array(labels)
    hp = dict(epochs=epochs, lr=lr, batch_size=batch_size, unk_rate=unk_rate, emb_dim=emb_dim, hidden=hidden)
    accs = []
    for k, held in enumerate(fold_indices(len(y), folds, seed)):
        keep = np.setdiff1d(np.arange(len(y)), held)
        m = _fit([questions[i] for i in keep], y[keep], vocab, seed + 1000 * (k + 1), **hp)
        pred = predict_proba(m, [questions[i] for i in held]) >= 0.5
        accs.append(float(np.mean(pred == (y[held] > 0.5))))
    return _fit(questions, y, vocab, seed, **hp), float(np.mean(accs))


def classify_type(model, question_tokens):
    p = predict_proba(model, [list(question_tokens)])[0]
    return YES_NO if p >= 0.5 else NON_YES_NO


def classify_types(model, questions):
    return [YES_NO if p >= 0.5 else NON_YES_NO for p in predict_proba(model, questions)]


def n_prime_for(model, question_tokens, policy):
    policy.validate()
    if policy.n_prime_yes_no == policy.n_prime_other:
        return policy.n_prime_yes_no
    return policy.for_type(classify_type(model, question_tokens))


def save_qtd(model, path, *, seed, config, cv_accuracy=None):
    save_artifact(
        path,
        "qtd",
        {
            "token_vocabulary": model.token_vocab.tokens,
            "emb_dim": model.emb_dim,
            "hidden": model.hidden,
            "cv_accuracy": cv_accuracy,
            "params": {k: v.tolist() for k, v in sorted(model.params.items())},
        },
        seed=seed,
        config=config,
    )


def load_qtd(path):
    doc = load_artifact(path, "qtd")
    return QtdModel(
        TokenVocab.from_list(doc["token_vocabulary"]),
        {k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()},
        int(doc["emb_dim"]),
        int(doc["hidden"]),
    )
