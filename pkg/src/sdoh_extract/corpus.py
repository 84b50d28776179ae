"""Note and gold-annotation loading, PHI residue scrubbing, corpus counts.

Both files are JSON Lines. Notes carry ``note_id`` and ``text``; gold records
carry ``note_id``, ``category``, optional ``subtype`` and ``span_text``.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .schema import CELL_ORDER, Category, Cell, Subtype, subtypes_of, validate_pairing

PathLike = Union[str, Path]


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""

    def __init__(self, message: str, path: Optional[PathLike] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ClinicalNote:
    note_id: str
    text: str

    def __post_init__(self) -> None:
        if not isinstance(self.note_id, str) or not self.note_id:
            raise ValueError("note_id must be a non-empty string")
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError(f"note {self.note_id!r} has empty text")


@dataclass(frozen=True)
class GoldAnnotation:
    note_id: str
    category: Category
    subtype: Optional[Subtype]
    span_text: str

    def __post_init__(self) -> None:
        validate_pairing(self.category, self.subtype)
        if not self.span_text or not self.span_text.strip():
            raise ValueError("span_text must be non-empty")

    @property
    def cell(self) -> Cell:
        return (self.category, self.subtype)

    def to_dict(self) -> dict:
        record = {"note_id": self.note_id, "category": self.category.value}
        if self.subtype is not None:
            record["subtype"] = self.subtype.value
        record["span_text"] = self.span_text
        return record


def _iter_json_lines(path: PathLike) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(record, dict):
                raise CorpusError("record is not an object", path, lineno)
            yield lineno, record


def load_corpus(path: PathLike) -> list[ClinicalNote]:
    notes: list[ClinicalNote] = []
    seen: set[str] = set()
    for lineno, record in _iter_json_lines(path):
        try:
            note = ClinicalNote(note_id=record["note_id"], text=record["text"])
        except KeyError as exc:
            raise CorpusError(f"missing field {exc.args[0]!r}", path, lineno) from None
        except ValueError as exc:
            raise CorpusError(str(exc), path, lineno) from None
        if note.note_id in seen:
            raise CorpusError(f"duplicate note_id {note.note_id!r}", path, lineno)
        seen.add(note.note_id)
        notes.append(note)
    return notes


def dump_corpus(notes: Iterable[ClinicalNote], path: PathLike) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for note in notes:
            handle.write(json.dumps({"note_id": note.note_id, "text": note.text}, ensure_ascii=False))
            handle.write("\n")


def gold_from_dict(record: dict) -> GoldAnnotation:
    category = Category.parse(record["category"])
    raw_subtype = record.get("subtype")
    subtype = Subtype.parse(raw_subtype) if raw_subtype not in (None, "") else None
    return GoldAnnotation(
        note_id=record["note_id"],
        category=category,
        subtype=subtype,
        span_text=record["span_text"],
    )


def load_gold(path: PathLike) -> list[GoldAnnotation]:
    gold = []
    for lineno, record in _iter_json_lines(path):
        try:
            gold.append(gold_from_dict(record))
        except KeyError as exc:
            raise CorpusError(f"missing field {exc.args[0]!r}", path, lineno) from None
        except ValueError as exc:
            raise CorpusError(str(exc), path, lineno) from None
    return gold


def serialize_gold(gold: Iterable[GoldAnnotation]) -> str:
    return "".join(json.dumps(g.to_dict(), ensure_ascii=False) + "\n" for g in gold)


def dump_gold(gold: Iterable[GoldAnnotation], path: PathLike) -> None:
    Path(path).write_text(serialize_gold(gold), encoding="utf-8")


# -- PHI residue scrubbing ----------------------------------------------------

_MONTHS = (
    r"(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|Jun(?:e)?|Jul(?:y)?"
    r"|Aug(?:ust)?|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)"
)

# (kind, pattern, group holding the PHI). Earlier entries win on overlap.
_PHI_PATTERNS: tuple[tuple[str, re.Pattern, int], ...] = (
    ("MRN", re.compile(r"\b(?:MRN|medical record (?:number|no\.?|#))[\s:#]*(\d{4,})\b", re.I), 1),
    ("PHONE", re.compile(r"(?<!\d)\(\d{3}\)\s*\d{3}[-.\s]\d{4}\b"), 0),
    ("PHONE", re.compile(r"\b\d{3}[-.]\d{3}[-.]\d{4}\b"), 0),
    ("DATE", re.compile(r"\b\d{1,2}[/-]\d{1,2}[/-](?:\d{4}|\d{2})\b"), 0),
    ("DATE", re.compile(r"\b\d{4}-\d{1,2}-\d{1,2}\b"), 0),
    ("DATE", re.compile(rf"\b{_MONTHS}\.?\s+\d{{1,2}}(?:st|nd|rd|th)?,?\s+\d{{4}}\b", re.I), 0),
    ("DATE", re.compile(rf"\b\d{{1,2}}\s+{_MONTHS}\.?,?\s+\d{{4}}\b", re.I), 0),
    # bare long digit runs: record numbers and the like
    ("MRN", re.compile(r"\b\d{7,}\b"), 0),
)


@dataclass(frozen=True)
class PhiFinding:
    kind: str
    offset: int
    length: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "offset": self.offset, "length": self.length}


def scrub_phi(text: str) -> tuple[str, list[PhiFinding]]:
    """Replace date, phone and MRN-like residue with ``[DATE]``/``[PHONE]``/``[MRN]``.

    Offsets in the findings refer to the original text. The matched strings
    themselves are not retained.
    """
    claimed: list[tuple[int, int, str]] = []
    for kind, pattern, group in _PHI_PATTERNS:
        for match in pattern.finditer(text):
            start, end = match.span(group)
            if any(start < c_end and c_start < end for c_start, c_end, _ in claimed):
                continue
            claimed.append((start, end, kind))
    claimed.sort()

    pieces: list[str] = []
    findings: list[PhiFinding] = []
    cursor = 0
    for start, end, kind in claimed:
        pieces.append(text[cursor:start])
        pieces.append(f"[{kind}]")
        findings.append(PhiFinding(kind, start, end - start))
        cursor = end
    pieces.append(text[cursor:])
    return "".join(pieces), findings


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    counts: dict[Cell, int] = field(default_factory=dict)

    def __getitem__(self, cell: Cell) -> int:
        return self.counts.get(cell, 0)

    def category_total(self, category: Category) -> int:
        if category.has_subtypes:
            return sum(self[(category, s)] for s in subtypes_of(category))
        return self[(category, None)]

    def to_rows(self) -> list[dict]:
        return [
            {
                "category": c.value,
                "subtype": s.value if s else None,
                "count": self[(c, s)],
            }
            for c, s in CELL_ORDER
        ]


def corpus_stats(gold: Iterable[GoldAnnotation]) -> CorpusStats:
    tally = Counter(g.cell for g in gold)
    return CorpusStats({cell: tally.get(cell, 0) for cell in CELL_ORDER})
