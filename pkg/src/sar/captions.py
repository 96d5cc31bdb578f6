"""Question categories, forward maximum matching and question+answer fusion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ParseError, ValidationError

R_TRIM = 15
C_TRIM = 18
STRATEGIES = ("R", "C")


@dataclass(frozen=True)
class DenseCaption:
    tokens: tuple
    strategy: str
    source_answer: str
    trimmed_to: int

    @property
    def text(self):
        return " ".join(self.tokens)


@dataclass(frozen=True)
class CategoryDict:
    entries: frozenset  # of token tuples, lowercase

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("category dictionary must not be empty")

    @property
    def max_len(self):
        return max(len(e) for e in self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, category):
        key = tuple(category.split()) if isinstance(category, str) else tuple(category)
        return key in self.entries

    def sorted_strings(self):
        return sorted(" ".join(e) for e in self.entries)

    @classmethod
    def from_strings(cls, categories):
        return cls(frozenset(tuple(c.lower().split()) for c in categories if c.strip()))

    def save(self, path):
        Path(path).write_text("\n".join(self.sorted_strings()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_strings(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class StrategyPlan:
    train_strategy: str
    test_strategy: str

    def __post_init__(self):
        pair = (self.train_strategy, self.test_strategy)
        if self.train_strategy not in STRATEGIES or self.test_strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy pair {pair}")
        if pair == ("C", "R"):
            raise ConfigError("strategy plan C->R is not allowed (use R, C or RtoC)")

    @property
    def name(self):
        if self.train_strategy == self.test_strategy:
            return self.train_strategy
        return "RtoC"

    @classmethod
    def parse(cls, name):
        key = name.strip().replace("→", "to").replace("->", "to")
        if key.lower() == "rtoc":
            return cls("R", "C")
        if key in STRATEGIES:
            return cls(key, key)
        if key.lower() == "ctor":
            return cls("C", "R")  # raises
        raise ConfigError(f"unknown strategy {name!r}; expected R, C or RtoC")

    def for_phase(self, phase):
        if phase not in ("train", "test"):
            raise ConfigError(f"phase must be 'train' or 'test', got {phase!r}")
        return self.train_strategy if phase == "train" else self.test_strategy


def build_category_dict(split):
    if not split.examples:
        raise ConfigError("cannot build a category dictionary from an empty split")
    return CategoryDict.from_strings({ex.question_category for ex in split.examples})


def fmm_match(cdict, question_tokens):
    """Longest dictionary category that is a token prefix of the question, else None."""
    lowered = tuple(t.lower() for t in question_tokens)
    for n in range(min(cdict.max_len, len(lowered)), 0, -1):
        if lowered[:n] in cdict.entries:
            return " ".join(lowered[:n])
    return None


def _strip_question_mark(tokens):
    if not tokens:
        return tokens
    last = tokens[-1]
    if last == "?":
        return tokens[:-1]
    if last.endswith("?"):
        return tokens[:-1] + [last[:-1]]
    return tokens


def combine_r(question_tokens, category, answer_label, trim=R_TRIM):
    """Replace the category prefix with the answer; drops the question mark."""
    cat = category.lower().split()
    q = list(question_tokens)
    if [t.lower() for t in q[: len(cat)]] != cat:
        raise ValidationError(f"category {category!r} is not a prefix of {' '.join(q)!r}")
    tokens = answer_label.split() + _strip_question_mark(q[len(cat) :])
    return DenseCaption(tuple(tokens[:trim]), "R", answer_label, trim)


def combine_c(question_tokens, answer_label, trim=C_TRIM):
    """Prepend the answer to the question, so end-trimming never removes it."""
    tokens = answer_label.split() + list(question_tokens)
    return DenseCaption(tuple(tokens[:trim]), "C", answer_label, trim)


@dataclass(frozen=True)
class CaptionRecord:
    example_id: str
    image_id: str
    caption: DenseCaption
    target: float
    cas_rank: int


@dataclass
class CaptionDataset:
    records: list
    fallbacks: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)


def caption_for(example, answer, strategy, cdict=None, use_annotation=True):
    """Build one caption; returns ``(caption, fell_back)``.

    With strategy R, the category comes from the example annotation when
    ``use_annotation`` is set (training) and from FMM otherwise (testing).
    When FMM finds nothing the caption is built with C instead.
    """
    if strategy == "C":
        return combine_c(example.question_tokens, answer), False
    if use_annotation:
        category = example.question_category
    else:
        category = fmm_match(cdict, example.question_tokens) if cdict is not None else None
    if category is None:
        return combine_c(example.question_tokens, answer), True
    return combine_r(example.question_tokens, category, answer), False


def build_captions(split, candidates, plan, phase, cdict):
    """Expand every example into one (image, caption, target) triple per candidate."""
    strategy = plan.for_phase(phase)
    records, fallbacks = [], 0
    for ex in split.examples:
        if ex.example_id not in candidates:
            raise ValidationError(f"no candidate set for example {ex.example_id}")
        for rank, answer in enumerate(candidates[ex.example_id].answers):
            cap, fell_back = caption_for(ex, answer, strategy, cdict, use_annotation=(phase == "train"))
            fallbacks += fell_back
            records.append(CaptionRecord(ex.example_id, ex.image_id, cap, ex.target(answer), rank))
    return CaptionDataset(records, fallbacks, {"strategy": strategy, "phase": phase, "plan": plan.name})


CAPTIONS_FORMAT = "sar-captions/1"


def write_captions(dataset, path):
    lines = [json.dumps({"format": CAPTIONS_FORMAT, "fallbacks": dataset.fallbacks, **dataset.meta}, sort_keys=True)]
    for r in dataset.records:
        lines.append(
            json.dumps(
                {
                    "example_id": r.example_id,
                    "image_id": r.image_id,
                    "caption": list(r.caption.tokens),
                    "strategy": r.caption.strategy,
                    "source_answer": r.caption.source_answer,
                    "trimmed_to": r.caption.trimmed_to,
                    "t": r.target,
                    "cas_rank": r.cas_rank,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_captions(path):
    text = Path(path).read_text(encoding="utf-8")
    records, header = [], None
    for i, line in enumerate(text.splitlines(), start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(path, i, f"invalid JSON: {exc.msg}") from None
        if i == 1:
            if rec.get("format") != CAPTIONS_FORMAT:
                raise ParseError(path, i, f"expected {CAPTIONS_FORMAT} header")
            header = rec
            continue
        try:
            cap = DenseCaption(tuple(rec["caption"]), rec["strategy"], rec["source_answer"], int(rec["trimmed_to"]))
            records.append(CaptionRecord(rec["example_id"], rec["image_id"], cap, float(rec["t"]), int(rec["cas_rank"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, i, f"malformed caption record: {exc!r}") from None
    if header is None:
        raise ParseError(path, 1, "empty file")
    meta = {k: v for k, v in header.items() if k not in ("format", "fallbacks")}
    return CaptionDataset(records, int(header.get("fallbacks", 0)), meta)
