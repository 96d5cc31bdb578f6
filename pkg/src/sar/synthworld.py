"""Synthetic visual-QA world with a controllable answer-prior shift.

Each image is a set of ``K`` objects.  An object's feature row is

    one-hot(type) | one-hot(color) | x, y | uniform noise in [0, 0.05]

with ``(x, y)`` the centre of a distinct cell of a coarse square grid.

Questions are generated from five templates whose first one or two tokens
form the question category.  For every split the answer distribution of a
category is ``skew * onehot(majority) + (1 - skew) * uniform``; the train
and val_iid splits share the majority answer while test_shifted uses a
different one.  Answers are drawn by quota (largest remainder), so the
realised histograms track the target distribution up to rounding.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

SPLIT_NAMES = ("train", "test_shifted", "val_iid")
YES_NO = "yes_no"
NON_YES_NO = "non_yes_no"

TEMPLATES = {
    "what color": "what color is the {obj} ?",
    "how many": "how many {obj} are there ?",
    "is there": "is there a {color} {obj} ?",
    "is this": "is this {obj} {color} ?",
    "are there": "are there any {obj} ?",
}
CATEGORY_TYPE = {
    "what color": NON_YES_NO,
    "how many": NON_YES_NO,
    "is there": YES_NO,
    "is this": YES_NO,
    "are there": YES_NO,
}
SOFT_LEVELS = (0.3, 0.6, 0.9, 1.0)
NOISE_HIGH = 0.05


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    num_images: int = 1700
    objects_per_image: int = 6
    feature_dim: int = 24
    object_types: tuple = ("cube", "sphere", "cylinder", "cone", "torus", "ring", "star", "disk")
    colors: tuple = ("red", "blue", "green", "yellow", "black", "white", "purple", "orange")
    max_count: int = 9
    prior_skew: float = 0.8
    questions_per_image: int = 2
    split_fractions: tuple = (0.6, 0.2, 0.2)
    soft_targets: bool = False

    def __post_init__(self):
        object.__setattr__(self, "object_types", tuple(self.object_types))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))

    @property
    def count_range(self):
        """Counts a layout can realise: 0 .. min(max_count, K - q + 1)."""
        hi = min(self.max_count, self.objects_per_image - self.questions_per_image + 1)
        return tuple(range(0, hi + 1))

    def validate(self):
        K, D = self.objects_per_image, self.feature_dim
        if K < 1:
            raise ConfigError(f"objects_per_image must be >= 1, got {K}")
        need = len(self.object_types) + len(self.colors) + 2
        if D < need:
            raise ConfigError(
                f"feature_dim must be >= |object_types| + |colors| + 2 = {need}, got {D}"
            )
        if not 0.0 <= self.prior_skew <= 1.0:
            raise ConfigError(f"prior_skew must lie in [0, 1], got {self.prior_skew}")
        if self.num_images < len(SPLIT_NAMES):
            raise ConfigError(f"num_images must be >= {len(SPLIT_NAMES)}, got {self.num_images}")
        if not 1 <= self.questions_per_image <= len(TEMPLATES):
            raise ConfigError(
                f"questions_per_image must lie in [1, {len(TEMPLATES)}], got {self.questions_per_image}"
            )
        if self.questions_per_image > K:
            raise ConfigError("questions_per_image must be <= objects_per_image")
        if len(self.object_types) < self.questions_per_image + 1:
            raise ConfigError("need more object_types than questions_per_image")
        if len(self.colors) < 2:
            raise ConfigError("need at least 2 colors")
        if self.max_count < 1:
            raise ConfigError(f"max_count must be >= 1, got {self.max_count}")
        if len(set(self.object_types)) != len(self.object_types) or len(set(self.colors)) != len(
            self.colors
        ):
            raise ConfigError("object_types and colors must be distinct")
        if len(self.split_fractions) != 3 or min(self.split_fractions) <= 0:
            raise ConfigError("split_fractions needs three positive entries")
        return self

    def to_dict(self):
        d = asdict(self)
        for k in ("object_types", "colors", "split_fractions"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown world config key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    image_id: str
    vectors: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ImageFeatures):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.vectors.shape == other.vectors.shape
            and bool(np.array_equal(self.vectors, other.vectors))
        )

    __hash__ = None


@dataclass(frozen=True)
class VqaExample:
    example_id: str
    image_id: str
    question_tokens: tuple
    answer_targets: dict
    question_category: str
    question_type: str

    @property
    def best_answer(self):
        """The answer with the highest target score (first in key order on ties)."""
        return max(self.answer_targets, key=lambda a: self.answer_targets[a])

    def target(self, answer):
        return self.answer_targets.get(answer, 0.0)


@dataclass
class DatasetSplit:
    name: str
    examples: list
    answer_vocabulary: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.examples)

    def answer_index(self):
        return {a: i for i, a in enumerate(self.answer_vocabulary)}


def answer_vocabulary(cfg):
    """Shared label order: yes, no, the colors, then every count 0 .. max_count."""
    return ("yes", "no") + tuple(cfg.colors) + tuple(str(n) for n in range(cfg.max_count + 1))


def category_answers(cfg, category):
    if CATEGORY_TYPE[category] == YES_NO:
        return ("yes", "no")
    if category == "what color":
        return tuple(cfg.colors)
    return tuple(str(n) for n in cfg.count_range)


def _quota(probs, total):
    """Integer allocation of ``total`` draws proportional to ``probs`` (largest remainder)."""
    raw = np.asarray(probs, dtype=np.float64) * total
    base = np.floor(raw).astype(int)
    rest = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


def split_distributions(cfg):
    """Target answer distribution per (split, category).

    Returns ``{split: {category: (answers, probs)}}``.
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    out = {s: {} for s in SPLIT_NAMES}
    for cat in TEMPLATES:
        answers = category_answers(cfg, cat)
        n = len(answers)
        train_major = int(rng.integers(n))
        test_major = int((train_major + 1 + rng.integers(n - 1)) % n)
        for split, major in (("train", train_major), ("val_iid", train_major), ("test_shifted", test_major)):
            p = np.full(n, (1.0 - cfg.prior_skew) / n)
            p[major] += cfg.prior_skew
            out[split][cat] = (answers, p)
    return out


def _split_sizes(cfg):
    return _quota(np.asarray(cfg.split_fractions) / sum(cfg.split_fractions), cfg.num_images)


def _soft_targets(rng, answer, family):
    """Simulate 10 annotators; score of an answer is min(0.3 * votes, 1)."""
    others = [a for a in family if a != answer]
    votes = {answer: 0}
    for _ in range(10):
        if rng.random() < 0.75 or not others:
            votes[answer] += 1
        else:
            a = others[int(rng.integers(len(others)))]
            votes[a] = votes.get(a, 0) + 1
    targets = {}
    for a, v in votes.items():
        if v > 0:
            targets[a] = SOFT_LEVELS[min(v, len(SOFT_LEVELS)) - 1]
    # The true answer holds the most votes under p=0.75 in all but rare draws;
    # enforce it so the ground truth stays the argmax.
    top = max(targets.values())
    targets[answer] = max(targets[answer], top)
    return targets


def _build_image(rng, cfg, specs):
    """Lay out objects satisfying every (category, answer, subject, color) spec."""
    T, C = len(cfg.object_types), len(cfg.colors)
    objs = []  # (type_idx, color_idx)
    subjects = {s["subject"] for s in specs}
    for s in specs:
        cat, ans, x = s["category"], s["answer"], s["subject"]
        if cat == "what color":
            objs.append((x, cfg.colors.index(ans)))
        elif cat == "how many":
            objs.extend((x, int(rng.integers(C))) for _ in range(int(ans)))
        elif cat in ("is there", "is this"):
            c = s["color"]
            if ans == "yes":
                objs.append((x, c))
            else:
                other = int((c + 1 + rng.integers(C - 1)) % C)
                objs.append((x, other))
        elif cat == "are there":
            if ans == "yes":
                objs.append((x, int(rng.integers(C))))
    fillers = [t for t in range(T) if t not in subjects]
    while len(objs) < cfg.objects_per_image:
        objs.append((fillers[int(rng.integers(len(fillers)))], int(rng.integers(C))))
    objs = [objs[i] for i in rng.permutation(len(objs))]
    K, D = cfg.objects_per_image, cfg.feature_dim
    g = grid_size(K)
    cells = rng.choice(g * g, size=K, replace=False)
    vec = np.zeros((K, D))
    for k, (t, c) in enumerate(objs):
        vec[k, t] = 1.0
        vec[k, T + c] = 1.0
        vec[k, T + C : T + C + 2] = ((cells[k] % g) + 0.5) / g, ((cells[k] // g) + 0.5) / g
        vec[k, T + C + 2 :] = rng.uniform(0.0, NOISE_HIGH, D - T - C - 2)
    return vec


def grid_size(k):
    """Side of the square placement grid: the smallest g >= 3 with g * g >= k."""
    return max(3, int(np.ceil(np.sqrt(k))))


def _question(cfg, spec):
    text = TEMPLATES[spec["category"]].format(
        obj=cfg.object_types[spec["subject"]],
        color=cfg.colors[spec["color"]] if spec["color"] is not None else "",
    )
    return tuple(text.split())


def generate_world(cfg):
    """Generate images and the three splits.

    Returns ``(features, train, test_shifted, val_iid)`` where ``features`` is a
    list of :class:`ImageFeatures` covering all splits.
    """
    cfg.validate()
    dists = split_distributions(cfg)
    vocab = answer_vocabulary(cfg)
    cats = tuple(TEMPLATES)
    q = cfg.questions_per_image
    features, splits = [], {}
    image_counter = 0
    for code, (name, n_img) in enumerate(zip(SPLIT_NAMES, _split_sizes(cfg))):
        alloc = np.random.default_rng([cfg.seed, code, 1])
        # distinct categories per image keeps every layout within K slots
        img_cats = [
            [cats[i] for i in sorted(alloc.choice(len(cats), size=q, replace=False))]
            for _ in range(n_img)
        ]
        pools = {}
        for cat in cats:
            n_cat = sum(c.count(cat) for c in img_cats)
            answers, p = dists[name][cat]
            counts = _quota(p, n_cat)
            pool = [a for a, n in zip(answers, counts) for _ in range(n)]
            pools[cat] = [pool[i] for i in alloc.permutation(len(pool))]
        examples = []
        for i in range(n_img):
            rng = np.random.default_rng([cfg.seed, code, 2, i])
            image_id = f"img{image_counter:06d}"
            image_counter += 1
            subj = rng.choice(len(cfg.object_types), size=q, replace=False)
            specs = []
            for cat, x in zip(img_cats[i], subj):
                ans = pools[cat].pop()
                color = int(rng.integers(len(cfg.colors))) if cat in ("is there", "is this") else None
                specs.append({"category": cat, "answer": ans, "subject": int(x), "color": color})
            features.append(ImageFeatures(image_id, _build_image(rng, cfg, specs)))
            for j, s in enumerate(specs):
                family = category_answers(cfg, s["category"])
                if cfg.soft_targets:
                    targets = _soft_targets(rng, s["answer"], family)
                else:
                    targets = {s["answer"]: 1.0}
                examples.append(
                    VqaExample(
                        example_id=f"{name}-{i:06d}-{j}",
                        image_id=image_id,
                        question_tokens=_question(cfg, s),
                        answer_targets=targets,
                        question_category=s["category"],
                        question_type=CATEGORY_TYPE[s["category"]],
                    )
                )
        splits[name] = DatasetSplit(name, examples, vocab)
    return features, splits["train"], splits["test_shifted"], splits["val_iid"]


def decode_objects(cfg, vectors):
    """Recover ``[(type, color)]`` from a feature matrix (used by consistency checks)."""
    T, C = len(cfg.object_types), len(cfg.colors)
    out = []
    for row in vectors:
        out.append((cfg.object_types[int(np.argmax(row[:T]))], cfg.colors[int(np.argmax(row[T : T + C]))]))
    return out


@dataclass(frozen=True)
class Description:
    """An attribute-object phrase paired with an image; ``target`` is 1 when it holds."""

    image_id: str
    tokens: tuple
    target: float


def description_corpus(cfg, features, image_ids, seed=0):
    """Prior-free image-text matching data for the scorer's grounding warm-up.

    Each image contributes one "<color> <type>" phrase per distinct object it
    contains (target 1) and as many phrases naming absent combinations
    (target 0), so every phrase is true exactly half the time.
    """
    by_id = features if isinstance(features, dict) else {f.image_id: f for f in features}
    combos = [(t, c) for t in cfg.object_types for c in cfg.colors]
    out = []
    for n, image_id in enumerate(sorted(set(image_ids))):
        present = sorted(set(decode_objects(cfg, by_id[image_id].vectors)))
        absent = [tc for tc in combos if tc not in set(present)]
        rng = np.random.default_rng([seed, 4, n])
        picks = rng.choice(len(absent), size=min(len(present), len(absent)), replace=False)
        out += [Description(image_id, (c, t), 1.0) for t, c in present]
        out += [Description(image_id, (absent[k][1], absent[k][0]), 0.0) for k in sorted(picks)]
    return out


def answer_from_image(cfg, example, vectors):
    """Answer a generated question directly from decoded objects."""
    objs = decode_objects(cfg, vectors)
    toks = example.question_tokens
    cat = example.question_category
    if cat == "what color":
        matches = [c for t, c in objs if t == toks[4]]
        return matches[0] if len(matches) == 1 else None
    if cat == "how many":
        return str(sum(t == toks[2] for t, _ in objs))
    if cat == "is there":
        return "yes" if (toks[4], toks[3]) in objs else "no"
    if cat == "is this":
        return "yes" if (toks[2], toks[3]) in objs else "no"
    if cat == "are there":
        return "yes" if any(t == toks[3] for t, _ in objs) else "no"
    return None


def answer_histograms(split):
    """``{category: {answer: fraction}}`` using each example's best answer."""
    counts = {}
    for ex in split.examples:
        c = counts.setdefault(ex.question_category, {})
        a = ex.best_answer
        c[a] = c.get(a, 0) + 1
    return {
        cat: {a: n / sum(h.values()) for a, n in sorted(h.items())} for cat, h in sorted(counts.items())
    }


def total_variation(h1, h2):
    keys = set(h1) | set(h2)
    return 0.5 * sum(abs(h1.get(k, 0.0) - h2.get(k, 0.0)) for k in keys)


# -- file formats ------------------------------------------------------------

SPLIT_FORMAT = "sar-split/1"
FEATURES_FORMAT = "sar-features/1"
FEATURES_FILE = "features.jsonl"


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def example_to_record(ex):
    return {
        "example_id": ex.example_id,
        "image_id": ex.image_id,
        "question": list(ex.question_tokens),
        "answer_targets": dict(sorted(ex.answer_targets.items())),
        "question_category": ex.question_category,
        "question_type": ex.question_type,
    }


def example_from_record(rec):
    return VqaExample(
        example_id=str(rec["example_id"]),
        image_id=str(rec["image_id"]),
        question_tokens=tuple(str(t) for t in rec["question"]),
        answer_targets={str(k): float(v) for k, v in rec["answer_targets"].items()},
        question_category=str(rec["question_category"]),
        question_type=str(rec["question_type"]),
    )


def validate_example(ex, vocab_set):
    if not ex.answer_targets or not any(t > 0 for t in ex.answer_targets.values()):
        raise ValidationError(f"example {ex.example_id}: needs at least one target with t > 0")
    for a, t in ex.answer_targets.items():
        if a not in vocab_set:
            raise ValidationError(f"example {ex.example_id}: unknown answer label {a!r}")
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"example {ex.example_id}: target {a!r}={t} outside [0, 1]")
    if ex.question_type not in (YES_NO, NON_YES_NO):
        raise ValidationError(f"example {ex.example_id}: bad question_type {ex.question_type!r}")
    cat = ex.question_category.split()
    if [t.lower() for t in ex.question_tokens[: len(cat)]] != cat:
        raise ValidationError(
            f"example {ex.example_id}: category {ex.question_category!r} is not a prefix of the question"
        )


def write_split(split, path):
    path = Path(path)
    lines = [_dumps({"format": SPLIT_FORMAT, "split": split.name, "answer_vocabulary": list(split.answer_vocabulary)})]
    lines += [_dumps(example_to_record(ex)) for ex in split.examples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_jsonl(path):
    text = Path(path).read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        # a complete file always ends in a newline
        n = text.count("\n") + 1
        raise ParseError(path, n, "truncated record (missing trailing newline)")
    for i, line in enumerate(text.splitlines(), start=1):
        try:
            yield i, json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(path, i, f"invalid JSON: {exc.msg}") from None


def read_split(path):
    header, examples = None, []
    for i, rec in _read_jsonl(path):
        if i == 1:
            if not isinstance(rec, dict) or rec.get("format") != SPLIT_FORMAT:
                raise ParseError(path, i, f"expected {SPLIT_FORMAT} header")
            header = rec
            continue
        try:
            examples.append(example_from_record(rec))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ParseError(path, i, f"malformed example: {exc!r}") from None
    if header is None:
        raise ParseError(path, 1, "empty file")
    if header.get("split") not in SPLIT_NAMES:
        raise ParseError(path, 1, f"unknown split name {header.get('split')!r}")
    vocab = tuple(header["answer_vocabulary"])
    vocab_set = set(vocab)
    for ex in examples:
        validate_example(ex, vocab_set)
    return DatasetSplit(header["split"], examples, vocab)


def write_features(features, path):
    path = Path(path)
    lines = [_dumps({"format": FEATURES_FORMAT})]
    for f in features:
        lines.append(_dumps({"image_id": f.image_id, "vectors": f.vectors.tolist()}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features(path):
    out = {}
    shape = None
    for i, rec in _read_jsonl(path):
        if i == 1:
            if not isinstance(rec, dict) or rec.get("format") != FEATURES_FORMAT:
                raise ParseError(path, i, f"expected {FEATURES_FORMAT} header")
            continue
        try:
            vec = np.array(rec["vectors"], dtype=np.float64)
            image_id = str(rec["image_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, i, f"malformed feature record: {exc!r}") from None
        if vec.ndim != 2:
            raise ParseError(path, i, "vectors must be a K x D matrix")
        if shape is not None and vec.shape != shape:
            raise ParseError(path, i, f"inconsistent feature shape {vec.shape}, expected {shape}")
        shape = vec.shape
        out[image_id] = ImageFeatures(image_id, vec)
    return out


def write_dataset(split, features, directory):
    """Write ``<dir>/<split>.jsonl`` and ``<dir>/features.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_split(split, directory / f"{split.name}.jsonl")
    feats = features.values() if isinstance(features, dict) else features
    write_features(list(feats), directory / FEATURES_FILE)


def read_dataset(path):
    """Read a split file and the ``features.jsonl`` next to it."""
    path = Path(path)
    split = read_split(path)
    return split, read_features(path.parent / FEATURES_FILE)


DESCRIPTIONS_FORMAT = "sar-descriptions/1"
DESCRIPTIONS_FILE = "descriptions.jsonl"


def write_descriptions(records, path):
    lines = [_dumps({"format": DESCRIPTIONS_FORMAT})]
    lines += [_dumps({"image_id": r.image_id, "tokens": list(r.tokens), "t": r.target}) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_descriptions(path):
    out = []
    for i, rec in _read_jsonl(path):
        if i == 1:
            if not isinstance(rec, dict) or rec.get("format") != DESCRIPTIONS_FORMAT:
                raise ParseError(path, i, f"expected {DESCRIPTIONS_FORMAT} header")
            continue
        try:
            out.append(Description(str(rec["image_id"]), tuple(rec["tokens"]), float(rec["t"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, i, f"malformed description record: {exc!r}") from None
    return out


def write_world(cfg, features, splits, directory):
    """Write features, every split, the train-image description corpus and ``world.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_features(features, directory / FEATURES_FILE)
    for s in splits:
        write_split(s, directory / f"{s.name}.jsonl")
        if s.name == "train":
            corpus = description_corpus(cfg, features, [ex.image_id for ex in s.examples], cfg.seed)
            write_descriptions(corpus, directory / DESCRIPTIONS_FILE)
    (directory / "world.json").write_text(_dumps({"world": cfg.to_dict()}) + "\n", encoding="utf-8")


def load_world(directory):
    """Load ``(features, {split_name: split})`` from a generated data directory."""
    directory = Path(directory)
    features = read_features(directory / FEATURES_FILE)
    splits = {}
    for name in SPLIT_NAMES:
        p = directory / f"{name}.jsonl"
        if p.exists():
            splits[name] = read_split(p)
    return features, splits
