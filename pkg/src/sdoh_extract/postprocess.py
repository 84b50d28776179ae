"""Split category strings into segments and route segments to subtypes by keyword."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .corpus import GoldAnnotation
from .extraction import ExtractionRecord
from .schema import Category, Subtype, cell_sort_key

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Segment:
    text: str
    source_category: Category
    char_range: tuple[int, int]


@dataclass(frozen=True)
class SubtypedConcept:
    note_id: str
    category: Category
    subtypes: frozenset[Subtype]
    text: str

    def __post_init__(self) -> None:
        for s in self.subtypes:
            if s.category is not self.category:
                raise ValueError(f"subtype {s.value} is not valid for {self.category.value}")

    @property
    def cells(self) -> list[tuple[Category, Optional[Subtype]]]:
        if not self.category.has_subtypes:
            return [(self.category, None)]
        return sorted(((self.category, s) for s in self.subtypes), key=cell_sort_key)


@dataclass(frozen=True)
class Lexicon:
    subtype: Subtype
    keywords: frozenset[str]

    def __post_init__(self) -> None:
        if not self.keywords:
            raise ValueError(f"lexicon for {self.subtype.value} is empty")
        if any(k != k.lower() or not k.strip() for k in self.keywords):
            raise ValueError(f"lexicon for {self.subtype.value} must hold lowercase keywords")

    @property
    def category(self) -> Category:
        return self.subtype.category

    @cached_property
    def pattern(self) -> re.Pattern:
        # keywords match at a word start and may continue (stems: "smok" -> "smoker")
        alts = "|".join(re.escape(k) for k in sorted(self.keywords, key=lambda k: (-len(k), k)))
        return re.compile(rf"(?<!\w)(?:{alts})")

    def matches(self, text: str) -> bool:
        return self.pattern.search(text.casefold()) is not None


DEFAULT_KEYWORDS: Mapping[Subtype, tuple[str, ...]] = {
    Subtype.EMPLOYMENT_STATUS: ("employ", "unemploy", "work", "job", "occupation", "retired", "disability"),
    Subtype.ALCOHOL_USE: ("alcohol", "drink", "etoh", "beer", "wine", "sober"),
    Subtype.TOBACCO_USE: ("smok", "tobacco", "cigarette", "nicotine", "vap"),
    Subtype.DRUG_USE: ("drug", "substance", "marijuana", "cocaine", "opioid", "heroin", "illicit"),
    Subtype.EDUCATION_STATUS: ("school", "college", "university", "graduate", "degree"),
    Subtype.LIVING_STATUS: ("lives", "living", "alone", "homeless", "spouse", "family", "home", "shelter"),
    Subtype.OBSERVATION: ("history", "cancer", "disease", "diabetes", "stroke", "heart", "hypertension"),
    Subtype.VITAL: ("died", "deceased", "alive", "living", "passed"),
}


def validate_lexicons(lexicons: Sequence[Lexicon]) -> None:
    seen: dict[tuple[Category, str], Subtype] = {}
    subtypes = set()
    for lex in lexicons:
        if lex.subtype in subtypes:
            raise ValueError(f"duplicate lexicon for {lex.subtype.value}")
        subtypes.add(lex.subtype)
        for kw in lex.keywords:
            other = seen.setdefault((lex.category, kw), lex.subtype)
            if other is not lex.subtype:
                raise ValueError(
                    f"keyword {kw!r} appears in both {other.value} and {lex.subtype.value}"
                )


def default_lexicons() -> list[Lexicon]:
    lexicons = [Lexicon(s, frozenset(kws)) for s, kws in DEFAULT_KEYWORDS.items()]
    validate_lexicons(lexicons)
    return lexicons


def parse_lexicons(text: str, source: str = "<lexicons>") -> list[Lexicon]:
    """Parse ``category.subtype<TAB>keyword`` lines; ``#`` starts a comment."""
    table: dict[Subtype, set[str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        try:
            key, keyword = line.split("\t")
            cat_name, sub_name = key.strip().split(".")
            category = Category.parse(cat_name)
            subtype = Subtype.parse(sub_name)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad lexicon line {line!r} ({exc})") from None
        if subtype.category is not category:
            raise ValueError(f"{source}:{lineno}: {subtype.value} is not under {category.value}")
        keyword = keyword.strip().lower()
        if not keyword:
            raise ValueError(f"{source}:{lineno}: empty keyword")
        table.setdefault(subtype, set()).add(keyword)
    lexicons = [Lexicon(s, frozenset(kws)) for s, kws in sorted(table.items(), key=lambda kv: list(Subtype).index(kv[0]))]
    validate_lexicons(lexicons)
    return lexicons


def load_lexicons(path: Union[str, Path]) -> list[Lexicon]:
    path = Path(path)
    return parse_lexicons(path.read_text(encoding="utf-8"), str(path))


def format_lexicons(lexicons: Iterable[Lexicon]) -> str:
    lines = []
    for lex in sorted(lexicons, key=lambda l: list(Subtype).index(l.subtype)):
        for kw in sorted(lex.keywords):
            lines.append(f"{lex.category.value}.{lex.subtype.value}\t{kw}")
    return "\n".join(lines) + "\n"


def lexicon_hash(lexicons: Iterable[Lexicon]) -> str:
    return hashlib.sha256(format_lexicons(lexicons).encode("utf-8")).hexdigest()


# -- segmentation -------------------------------------------------------------

_DELIMITERS = ",;."


def segment(category_text: str, category: Category) -> list[Segment]:
    """Split on commas, semicolons and periods outside parentheses.

    A period between two digits ("1.5 packs") is not treated as a delimiter.
    """
    segments: list[Segment] = []
    depth = 0
    start = 0
    n = len(category_text)

    def flush(end: int) -> None:
        piece = category_text[start:end]
        stripped = piece.strip()
        if stripped:
            lead = len(piece) - len(piece.lstrip())
            s = start + lead
            segments.append(Segment(stripped, category, (s, s + len(stripped))))

    for i, ch in enumerate(category_text):
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth = max(0, depth - 1)
        elif ch in _DELIMITERS and depth == 0:
            if ch == "." and 0 < i < n - 1 and category_text[i - 1].isdigit() and category_text[i + 1].isdigit():
                continue
            flush(i)
            start = i + 1
    flush(n)
    return segments


def categorize(seg: Segment, lexicons: Sequence[Lexicon], note_id: str = "") -> SubtypedConcept:
    hits = frozenset(
        lex.subtype
        for lex in lexicons
        if lex.category is seg.source_category and lex.matches(seg.text)
    )
    return SubtypedConcept(note_id=note_id, category=seg.source_category, subtypes=hits, text=seg.text)


def postprocess_record(record: ExtractionRecord, lexicons: Optional[Sequence[Lexicon]] = None) -> list[SubtypedConcept]:
    """Turn one parsed reply into concepts.

    Demographic fields pass through whole. Social and family history are
    segmented, and each segment gets every subtype whose lexicon it hits.
    Segments hitting no lexicon come back with an empty subtype set.
    """
    lexicons = default_lexicons() if lexicons is None else lexicons
    concepts: list[SubtypedConcept] = []
    for category in Category:
        value = getattr(record, category.value)
        if value is None or not value.strip():
            continue
        if not category.has_subtypes:
            concepts.append(SubtypedConcept(record.note_id, category, frozenset(), value.strip()))
            continue
        for seg in segment(value, category):
            concept = categorize(seg, lexicons, record.note_id)
            if len(concept.subtypes) > 1:
                log.debug("note %s: segment %r assigned to %s", record.note_id, seg.text,
                          sorted(s.value for s in concept.subtypes))
            concepts.append(concept)
    return concepts


def multi_assigned(concepts: Iterable[SubtypedConcept]) -> list[SubtypedConcept]:
    return [c for c in concepts if len(c.subtypes) > 1]


def uncategorized(concepts: Iterable[SubtypedConcept]) -> list[SubtypedConcept]:
    return [c for c in concepts if c.category.has_subtypes and not c.subtypes]


def gold_from_text(
    note_id: str,
    category: Category,
    text: str,
    lexicons: Optional[Sequence[Lexicon]] = None,
) -> list[GoldAnnotation]:
    """Route an unsplit category string into per-subtype gold annotations.

    Useful when gold is only available as one string per category. Segments
    hitting no lexicon are dropped.
    """
    record = ExtractionRecord(note_id=note_id, **{category.value: text})
    gold = []
    for concept in postprocess_record(record, lexicons):
        for cat, sub in concept.cells:
            gold.append(GoldAnnotation(note_id, cat, sub, concept.text))
    return gold
