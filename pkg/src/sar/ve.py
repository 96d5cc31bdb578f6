"""Visual-entailment scorer.

Two streams: caption tokens go through one self-attention block, object
features through a linear projection.  Each caption token then cross-attends
to the objects plus one learned null slot (so "nothing matches" is
representable), a tanh feed-forward layer follows, tokens are mean-pooled
and a one-hidden-layer tanh head emits the scalar entailment logit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import autograd as ag
from .artifacts import check_vocab, load_artifact, save_artifact, vocab_hash
from .errors import ConfigError, TrainingError, ValidationError
from .text import UNK, TokenVocab, normalize

INIT_RANGE = 0.08
EMB_RANGE = math.sqrt(3.0)  # unit-variance embeddings
HEAD_PARAMS = ("head_w1", "head_b1", "head_w2", "head_b2")


@dataclass(frozen=True)
class VeArch:
    d: int = 32
    heads: int = 2
    hidden: int = 32
    feature_dim: int = 24

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.hidden < 1 or self.feature_dim < 1:
            raise ConfigError("hidden and feature_dim must be positive")

    @property
    def head_dim(self):
        return self.d // self.heads


@dataclass
class VeModel:
    arch: VeArch
    token_vocab: TokenVocab
    params: dict  # name -> np.ndarray
    answer_vocabulary: tuple = ()
    train_n: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self):
        return VeModel(
            self.arch,
            self.token_vocab,
            {k: v.copy() for k, v in self.params.items()},
            self.answer_vocabulary,
            self.train_n,
            dict(self.meta),
        )


@dataclass(frozen=True)
class VeTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    alpha: float = 1.0
    ssl_enabled: bool = False

    def validate(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.ssl_enabled and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when SSL is enabled")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be non-negative; batch_size must be >= 1")
        return self


def param_shapes(arch, vocab_size):
    d, H, dh, D, h = arch.d, arch.heads, arch.head_dim, arch.feature_dim, arch.hidden
    return {
        "emb": (vocab_size, d),
        "sa_q": (H, d, dh),
        "sa_k": (H, d, dh),
        "sa_v": (H, d, dh),
        "sa_o": (H, dh, d),
        "img_w": (D, d),
        "img_b": (d,),
        "ca_q": (H, d, dh),
        "ca_k": (H, d, dh),
        "ca_v": (H, d, dh),
        "ca_o": (H, dh, d),
        "ca_null_k": (H, 1, dh),
        "ca_null_v": (H, 1, dh),
        "ff_w1": (d, 2 * d),
        "ff_b1": (2 * d,),
        "ff_w2": (2 * d, d),
        "head_w1": (d, h),
        "head_b1": (h,),
        "head_w2": (h, 1),
        "head_b2": (1,),
    }


def init_model(arch, token_vocab, seed=0, zero_head=False):
    """Weights uniform(-0.08, 0.08), embeddings unit-variance uniform, biases zero.

    ``zero_head`` zeroes the output layer so every score starts at exactly 0.5.
    """
    rng = np.random.default_rng([seed, 303])
    shapes = param_shapes(arch, len(token_vocab))
    params = {}
    for k, shape in shapes.items():
        bound = EMB_RANGE if k == "emb" else INIT_RANGE
        params[k] = rng.uniform(-bound, bound, shape)
    for k in ("img_b", "ff_b1", "head_b1", "head_b2"):
        params[k] = np.zeros(shapes[k])
    if zero_head:
        params["head_w2"] = np.zeros(shapes["head_w2"])
    return VeModel(arch, token_vocab, params)


def _heads(x, w):
    """(B, L, d) @ (H, d, dh) -> (B, H, L, dh)."""
    B, L, d = x.shape
    return ag.matmul(ag.reshape(x, (B, 1, L, d)), w)


def _attend(q, k, v, wo, key_mask):
    dh = q.shape[-1]
    s = ag.scale(ag.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(dh))
    a = ag.softmax(s, key_mask)
    return ag.sum_axis(ag.matmul(ag.matmul(a, v), wo), axis=1)


def forward(model, token_ids, token_mask, images, params=None):
    """Entailment logits (the ``Trm`` output) for a padded batch.

    ``token_ids``/``token_mask``: (B, L); ``images``: (B, K, D).
    ``params`` maps names to Tensors (defaults to constants from ``model``).
    """
    if params is None:
        params = {k: ag.Tensor(v) for k, v in model.params.items()}
    B, L = token_ids.shape
    token_mask = np.asarray(token_mask, dtype=bool)
    x = ag.gather_rows(params["emb"], token_ids)
    key_mask = token_mask[:, None, None, :]
    x = x + _attend(
        _heads(x, params["sa_q"]), _heads(x, params["sa_k"]), _heads(x, params["sa_v"]), params["sa_o"], key_mask
    )

    v = ag.matmul(ag.as_tensor(images), params["img_w"]) + params["img_b"]
    H, dh = model.arch.heads, model.arch.head_dim
    keys = ag.concat([_heads(v, params["ca_k"]), ag.broadcast_to(params["ca_null_k"], (B, H, 1, dh))], axis=2)
    vals = ag.concat([_heads(v, params["ca_v"]), ag.broadcast_to(params["ca_null_v"], (B, H, 1, dh))], axis=2)
    x = x + _attend(_heads(x, params["ca_q"]), keys, vals, params["ca_o"], None)
    ff = ag.tanh(ag.matmul(x, params["ff_w1"]) + params["ff_b1"])
    x = x + ag.matmul(ff, params["ff_w2"])

    weights = token_mask / token_mask.sum(axis=1, keepdims=True)
    pooled = ag.sum_axis(ag.mul(x, weights[:, :, None]), axis=1)
    hid = ag.tanh(ag.matmul(pooled, params["head_w1"]) + params["head_b1"])
    z = ag.matmul(hid, params["head_w2"]) + params["head_b2"]
    return ag.reshape(z, (B,))


def _caption_tokens(item):
    if hasattr(item, "caption"):
        return item.caption.tokens
    if hasattr(item, "tokens"):
        return item.tokens
    return item


def encode_captions(model, captions):
    """Pad caption token ids to a (B, L) matrix plus validity mask.

    Tokens the scorer never saw in training carry no learned meaning and are
    masked out, unless a caption consists of nothing else.
    """
    vocab = model.token_vocab if hasattr(model, "token_vocab") else model
    unk = vocab.index[UNK]
    ids = []
    for cap in captions:
        tokens = _caption_tokens(cap)
        if len(tokens) == 0:
            raise ValidationError("cannot score an empty caption")
        ids.append(vocab.encode(tokens))
    L = max(len(i) for i in ids)
    out = np.zeros((len(ids), L), dtype=np.int64)
    mask = np.zeros((len(ids), L), dtype=bool)
    for r, row in enumerate(ids):
        out[r, : len(row)] = row
        known = np.array([t != unk for t in row])
        mask[r, : len(row)] = known if known.any() else True
    return out, mask


def logits(model, images, captions):
    ids, mask = encode_captions(model, captions)
    return forward(model, ids, mask, np.asarray(images, dtype=np.float64)).data


def score_batch(model, images, captions):
    """sigmoid(Trm(image, caption)) for aligned lists of images and captions."""
    return K.sigmoid(logits(model, images, captions))


def score(model, image, caption):
    vec = image.vectors if hasattr(image, "vectors") else np.asarray(image)
    return float(score_batch(model, vec[None], [caption])[0])


# -- losses ------------------------------------------------------------------


def _check_targets(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
        raise ValidationError("soft targets must lie in [0, 1]")
    return t


def loss_ve(z, t):
    """Multi-label soft loss on pre-sigmoid scores ``z`` (any shape, e.g. M x N)."""
    z = np.asarray(z, dtype=np.float64)
    t = _check_targets(t)
    if z.shape != t.shape:
        raise ValidationError(f"score shape {z.shape} does not match target shape {t.shape}")
    return float(K.bce_logits(z, t).mean())


def loss_ssl(p_irrelevant, alpha=1.0):
    """``alpha`` times the mean relevance score of mismatched image-caption pairs."""
    p = np.asarray(p_irrelevant, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValidationError("irrelevant-pair scores must lie in [0, 1]")
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    return float(alpha * p.mean()) if p.size else 0.0


def loss_total(l_ve, l_ssl=None):
    if l_ssl is None:
        return float(l_ve)
    if not (np.isfinite(l_ve) and np.isfinite(l_ssl)):
        raise ValidationError("loss terms must be finite")
    return float(l_ve) + float(l_ssl)


def irrelevant_partners(image_ids):
    """Cyclic in-batch shift: slot i takes the next slot holding a different image."""
    n = len(image_ids)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        j = (i + 1) % n
        for k in range(1, n):
            if image_ids[(i + k) % n] != image_ids[i]:
                j = (i + k) % n
                break
        out[i] = j
    return out


def batch_loss(model, params, ids, mask, images, targets, partners=None, alpha=0.0):
    """Differentiable total loss for one batch; returns (loss, ve, ssl) Tensors."""
    z = forward(model, ids, mask, images, params)
    l_ve = ag.bce_with_logits_mean(z, targets)
    if partners is None:
        return l_ve, l_ve, None
    z_irr = forward(model, ids, mask, images[partners], params)
    l_ssl = ag.scale(ag.mean(ag.sigmoid(z_irr)), alpha)
    return l_ve + l_ssl, l_ve, l_ssl


# -- training ------------------------------------------------------------------


def build_token_vocab(*record_lists):
    """Token vocabulary over every caption (or description) in the given lists."""
    return TokenVocab(t for records in record_lists for r in records for t in normalize(_caption_tokens(r)))


def _encode_dataset(model, records, features):
    missing = sorted({r.image_id for r in records} - set(features))
    if missing:
        raise ValidationError(f"no features for image {missing[0]!r}")
    ids, mask = encode_captions(model, records)
    image_ids = sorted({r.image_id for r in records})
    slot = {k: i for i, k in enumerate(image_ids)}
    bank = np.stack([features[k].vectors for k in image_ids])
    img_idx = np.array([slot[r.image_id] for r in records], dtype=np.int64)
    targets = np.array([r.target for r in records], dtype=np.float64)
    return ids, mask, bank, img_idx, targets


def train_ve(model, dataset, features, cfg):
    """Adam on the soft loss (plus the SSL term when enabled).

    ``dataset`` holds caption records or plain descriptions, anything with
    ``image_id``, ``target`` and tokens.  Returns ``(model, curve)`` where
    ``curve[e]`` is the mean batch loss of epoch ``e``.  The input model is
    not modified.
    """
    from .optim import Adam

    cfg.validate()
    records = dataset.records if hasattr(dataset, "records") else list(dataset)
    if not records:
        raise ConfigError("train_ve needs a non-empty caption dataset")
    ids, mask, bank, img_idx, targets = _encode_dataset(model, records, features)
    model = model.copy()
    params = {k: ag.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 404])
    curve = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(records))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            bmask = mask[b]
            width = int(np.max(np.nonzero(bmask.any(axis=0))[0])) + 1
            partners = None
            if cfg.ssl_enabled and len(b) > 1:
                partners = irrelevant_partners(img_idx[b])
            loss, _, _ = batch_loss(
                model, params, ids[b, :width], bmask[:, :width], bank[img_idx[b]], targets[b], partners, cfg.alpha
            )
            if not np.isfinite(loss.data):
                norm = math.sqrt(sum(float((p.data**2).sum()) for p in params.values()))
                raise TrainingError(f"non-finite loss at step {step} (parameter norm {norm:.6g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            step += 1
        curve.append(float(np.mean(losses)))
    model.params = {k: p.data for k, p in params.items()}
    return model, curve


def warm_up(model, descriptions, features, epochs=10, batch_size=64, lr=3e-3, seed=0):
    """Image-text matching on attribute phrases before training on captions.

    The phrases carry no answer prior, so the scorer learns which words name
    which feature blocks before it ever sees a question.
    """
    cfg = VeTrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed, ssl_enabled=False)
    return train_ve(model, descriptions, features, cfg)


def grad_check(model, batch, epsilon=1e-4, tensors=None, per_tensor=20, alpha=1.0, ssl=True, seed=0):
    """Max relative error between reverse-mode and central-difference gradients.

    ``batch`` is ``(ids, mask, images, targets)``.  Up to ``per_tensor``
    entries are sampled from each checked tensor (all entries if smaller).
    Relative error is ``|a - n| / max(|a|, |n|, 1e-7)``.
    """
    ids, mask, images, targets = batch
    partners = irrelevant_partners(list(range(len(ids)))) if ssl else None
    names = list(tensors) if tensors is not None else list(model.params)
    base = {k: v.copy() for k, v in model.params.items()}

    params = {k: ag.Tensor(v.copy(), requires_grad=k in names) for k, v in base.items()}
    loss, _, _ = batch_loss(model, params, ids, mask, images, targets, partners, alpha)
    loss.backward()
    analytic = {k: params[k].grad if params[k].grad is not None else np.zeros_like(base[k]) for k in names}

    def loss_at(k, flat_i, delta):
        p = {n: ag.Tensor(v) for n, v in base.items()}
        arr = base[k].copy()
        arr.reshape(-1)[flat_i] += delta
        p[k] = ag.Tensor(arr)
        return float(batch_loss(model, p, ids, mask, images, targets, partners, alpha)[0].data)

    rng = np.random.default_rng([seed, 505])
    worst = 0.0
    details = {}
    for k in names:
        size = base[k].size
        picks = np.arange(size) if size <= per_tensor else rng.choice(size, per_tensor, replace=False)
        tensor_worst = 0.0
        for i in picks:
            num = (loss_at(k, i, epsilon) - loss_at(k, i, -epsilon)) / (2 * epsilon)
            ana = float(analytic[k].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-7)
            tensor_worst = max(tensor_worst, err)
        details[k] = tensor_worst
        worst = max(worst, tensor_worst)
    grad_check.last_details = details
    return worst


# -- persistence ---------------------------------------------------------------


def save_ve(model, path, *, seed, config):
    save_artifact(
        path,
        "ve",
        {
            "arch": model.arch.__dict__.copy(),
            "answer_vocabulary": list(model.answer_vocabulary),
            "vocab_hash": vocab_hash(model.answer_vocabulary),
            "token_vocabulary": model.token_vocab.tokens,
            "train_n": model.train_n,
            "meta": model.meta,
            "params": {k: v.tolist() for k, v in sorted(model.params.items())},
        },
        seed=seed,
        config=config,
    )


def load_ve(path, vocab=None):
    doc = load_artifact(path, "ve")
    if vocab is not None:
        check_vocab(doc, vocab, f"VE model {path}")
    return VeModel(
        VeArch(**doc["arch"]),
        TokenVocab.from_list(doc["token_vocabulary"]),
        {k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()},
        tuple(doc["answer_vocabulary"]),
        int(doc["train_n"]),
        doc.get("meta", {}),
    )
