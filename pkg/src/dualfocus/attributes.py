"""Attribute table, caption analysis and prompt rendering.

Captions are scanned against a fixed table of attribute phrases. A phrase
counts as asserted unless one of the negation words {no, not, without}
appears within the two words before it; attributes never mentioned count
as absent. Each detected/absent attribute is rendered into a short
positive/negative prompt sentence through per-attribute templates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .vocab import Vocabulary

__all__ = [
    "AttributeEntry",
    "AttributeTable",
    "AttributeAnnotation",
    "PromptSet",
    "extract_attributes",
    "render_prompts",
    "gamma",
    "default_attribute_table",
    "load_attribute_table",
    "save_attribute_table",
]

NEGATION_WORDS = frozenset({"no", "not", "without"})
NEGATION_WINDOW = 2
SLOT = "{}"


@dataclass(frozen=True)
class AttributeEntry:
    attribute_id: int
    phrase: tuple[str, ...]
    positive_template: tuple[str, ...]
    negative_template: tuple[str, ...]


@dataclass(frozen=True)
class AttributeTable:
    """Ordered attribute entries with ids 0..K-1."""

    entries: tuple[AttributeEntry, ...]

    def __post_init__(self):
        ids = [e.attribute_id for e in self.entries]
        if ids != list(range(len(self.entries))):
            raise ValueError("attribute ids must be 0..K-1 without gaps")
        phrases = [e.phrase for e in self.entries]
        if len(set(phrases)) != len(phrases):
            raise ValueError("attribute phrases must be unique")
        for e in self.entries:
            for tpl in (e.positive_template, e.negative_template):
                if sum(1 for w in tpl if w == SLOT) != 1:
                    raise ValueError(
                        f"template for attribute {e.attribute_id} needs exactly one slot"
                    )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def all_ids(self) -> set[int]:
        return set(range(len(self.entries)))

    def words(self) -> set[str]:
        """Every word the table can emit (phrases plus template glue)."""
        out: set[str] = set()
        for e in self.entries:
            out.update(e.phrase)
            out.update(w for w in e.positive_template if w != SLOT)
            out.update(w for w in e.negative_template if w != SLOT)
        return out

    def render(self, attribute_id: int, positive: bool) -> list[str]:
        e = self.entries[attribute_id]
        tpl = e.positive_template if positive else e.negative_template
        out: list[str] = []
        for w in tpl:
            if w == SLOT:
                out.extend(e.phrase)
            else:
                out.append(w)
        return out

    def table_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(_table_to_obj(self), sort_keys=True).encode()
        ).hexdigest()


@dataclass(frozen=True)
class AttributeAnnotation:
    """Disjoint present/absent attribute-id partition for one sample."""

    positive_ids: frozenset[int]
    negative_ids: frozenset[int]

    def __post_init__(self):
        if self.positive_ids & self.negative_ids:
            raise ValueError("positive and negative attribute ids overlap")

    def validate_against(self, table: AttributeTable) -> None:
        ids = self.positive_ids | self.negative_ids
        if not ids <= table.all_ids:
            raise ValueError(f"annotation ids {ids - table.all_ids} not in table")


@dataclass(frozen=True)
class PromptSet:
    """Rendered prompt token ids, one per annotated attribute."""

    positive_prompts: tuple[tuple[int, tuple[int, ...]], ...]
    negative_prompts: tuple[tuple[int, tuple[int, ...]], ...]


def mentioned_attributes(caption: list[str], table: AttributeTable) -> set[int]:
    """Attribute ids whose phrase literally occurs in the caption."""
    out: set[int] = set()
    for e in table.entries:
        n = len(e.phrase)
        for start in range(0, len(caption) - n + 1):
            if tuple(caption[start:start + n]) == e.phrase:
                out.add(e.attribute_id)
                break
    return out


def extract_attributes(caption: list[str], table: AttributeTable) -> AttributeAnnotation:
    """Partition the table's attributes into asserted vs absent for a caption.

    An attribute is positive iff its phrase occurs with no negation word in
    the 2 words before the phrase start; it is negative if every occurrence
    is negated or the phrase never occurs. Empty captions yield an all-
    negative annotation.
    """
    positive: set[int] = set()
    for e in table.entries:
        n = len(e.phrase)
        for start in range(0, len(caption) - n + 1):
            if tuple(caption[start:start + n]) != e.phrase:
                continue
            window = caption[max(0, start - NEGATION_WINDOW):start]
            if not any(w in NEGATION_WORDS for w in window):
                positive.add(e.attribute_id)
                break
    negative = table.all_ids - positive
    return AttributeAnnotation(frozenset(positive), frozenset(negative))


def render_prompts(ann: AttributeAnnotation, table: AttributeTable,
                   vocab: Vocabulary) -> PromptSet:
    """Render one tokenised prompt per annotated attribute id."""
    ann.validate_against(table)
    pos = tuple(
        (a, tuple(vocab.encode(table.render(a, positive=True))))
        for a in sorted(ann.positive_ids)
    )
    neg = tuple(
        (a, tuple(vocab.encode(table.render(a, positive=False))))
        for a in sorted(ann.negative_ids)
    )
    return PromptSet(pos, neg)


def gamma(pos_count: int, neg_count: int) -> float:
    """Positive/negative balance factor; 1.0 whenever a count is zero."""
    if pos_count < 0 or neg_count < 0:
        raise ValueError("prompt counts must be non-negative")
    if pos_count == 0 or neg_count == 0:
        return 1.0
    return pos_count / neg_count


# -- default table and JSON round trip ---------------------------------------

_DEFAULT_SPEC = [
    ("hat", ("wearing", "a"), ("not", "wearing")),
    ("glasses", ("wearing", "a"), ("without", "any")),
    ("backpack", ("carrying", "a"), ("carrying", "no")),
    ("jacket", ("wearing", "a"), ("wearing", "no")),
    ("scarf", ("with", "a"), ("with", "no")),
    ("gloves", ("wearing", "a"), ("not", "wearing")),
    ("boots", ("wearing", "a"), ("without", "any")),
    ("watch", ("wearing", "a"), ("with", "no")),
    ("skirt", ("wearing", "a"), ("wearing", "no")),
    ("beard", ("with", "a"), ("with", "no")),
    ("ponytail", ("with", "a"), ("without", "any")),
    ("camera", ("holding", "a"), ("holding", "no")),
]


def default_attribute_table(num_attributes: int = 12) -> AttributeTable:
    """Person-attribute table; ids beyond the built-in 12 get generic items.

    Every template renders to exactly three words so prompt and caption
    clauses all share one length.
    """
    entries = []
    for k in range(num_attributes):
        if k < len(_DEFAULT_SPEC):
            word, pos_prefix, neg_prefix = _DEFAULT_SPEC[k]
        else:
            word = f"item{k}"
            pos_prefix, neg_prefix = ("with", "a"), ("with", "no")
        entries.append(
            AttributeEntry(
                attribute_id=k,
                phrase=(word,),
                positive_template=pos_prefix + (SLOT,),
                negative_template=neg_prefix + (SLOT,),
            )
        )
    return AttributeTable(tuple(entries))


def _table_to_obj(table: AttributeTable) -> list[dict]:
    return [
        {
            "id": e.attribute_id,
            "phrase": " ".join(e.phrase),
            "pos": " ".join(e.positive_template),
            "neg": " ".join(e.negative_template),
        }
        for e in table.entries
    ]


def save_attribute_table(table: AttributeTable, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_table_to_obj(table), indent=2) + "\n")


def load_attribute_table(path: str | Path) -> AttributeTable:
    obj = json.loads(Path(path).read_text())
    entries = tuple(
        AttributeEntry(
            attribute_id=int(item["id"]),
            phrase=tuple(item["phrase"].split()),
            positive_template=tuple(item["pos"].split()),
            negative_template=tuple(item["neg"].split()),
        )
        for item in obj
    )
    return AttributeTable(entries)


def build_vocabulary(table: AttributeTable) -> Vocabulary:
    """Vocabulary covering the table's words (captions reuse the same stock)."""
    return Vocabulary.from_words(table.words())
