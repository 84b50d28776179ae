"""Relaxed word-overlap matching with precision, recall and F1.

Every gold span and every predicted concept is reduced to a set of
case-folded words. Per note and cell, words on both sides are true
positives, words only predicted are false positives, and words only in gold
are false negatives.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Literal, Optional

from .corpus import GoldAnnotation
from .postprocess import SubtypedConcept
from .schema import Cell, cell_sort_key

Pooling = Literal["micro", "macro"]

# word characters minus the underscore; everything else separates tokens
_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize_words(text: str) -> frozenset[str]:
    return frozenset(_TOKEN_RE.findall(text.casefold()))


@dataclass(frozen=True)
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def count_matches(gold: frozenset[str], predicted: frozenset[str]) -> MatchCounts:
    return MatchCounts(
        tp=len(gold & predicted),
        fp=len(predicted - gold),
        fn=len(gold - predicted),
    )


def compute_prf(counts: MatchCounts) -> PRF:
    """P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R).

    Zero denominators: an empty side scores 1 only if the other side is
    empty too (nothing expected, nothing produced), otherwise 0.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
    if tp:
        # 2PR/(P+R) reduced to counts: one rounding instead of four
        f1 = 2 * tp / (2 * tp + fp + fn)
    else:
        f1 = 1.0 if precision == recall == 1.0 else 0.0
    return PRF(precision, recall, f1)


def _cell_bags(
    gold: Iterable[GoldAnnotation], concepts: Iterable[SubtypedConcept]
) -> tuple[dict[Cell, dict[str, set[str]]], dict[Cell, dict[str, set[str]]]]:
    gold_bags: dict[Cell, dict[str, set[str]]] = defaultdict(lambda: defaultdict(set))
    pred_bags: dict[Cell, dict[str, set[str]]] = defaultdict(lambda: defaultdict(set))
    for g in gold:
        gold_bags[g.cell][g.note_id] |= tokenize_words(g.span_text)
    for c in concepts:
        words = tokenize_words(c.text)
        for cell in c.cells:
            pred_bags[cell][c.note_id] |= words
    return gold_bags, pred_bags


def evaluate_ner(
    gold: Iterable[GoldAnnotation],
    concepts: Iterable[SubtypedConcept],
    pooling: Pooling = "micro",
    cells: Optional[Iterable[Cell]] = None,
) -> dict[Cell, PRF]:
    """Score every cell present in gold (or the given ``cells``).

    Micro pooling sums counts over notes, then computes P/R/F1 once. Macro
    averages per-note scores over notes where gold or prediction is
    non-empty for the cell. Predictions in cells outside the scored set and
    concepts with no subtype are not scored.
    """
    if pooling not in ("micro", "macro"):
        raise ValueError(f"unknown pooling {pooling!r}; expected 'micro' or 'macro'")
    gold_bags, pred_bags = _cell_bags(gold, concepts)
    scored = sorted(set(cells) if cells is not None else set(gold_bags), key=cell_sort_key)

    results: dict[Cell, PRF] = {}
    for cell in scored:
        g_notes, p_notes = gold_bags.get(cell, {}), pred_bags.get(cell, {})
        per_note = [
            count_matches(frozenset(g_notes.get(n, ())), frozenset(p_notes.get(n, ())))
            for n in sorted(set(g_notes) | set(p_notes))
        ]
        if pooling == "micro":
            results[cell] = compute_prf(sum(per_note, MatchCounts()))
        else:
            results[cell] = _macro(per_note)
    return results


def _macro(per_note: list[MatchCounts]) -> PRF:
    live = [compute_prf(c) for c in per_note if c.tp or c.fp or c.fn]
    if not live:
        return PRF(1.0, 1.0, 1.0)
    n = len(live)
    return PRF(
        sum(p.precision for p in live) / n,
        sum(p.recall for p in live) / n,
        sum(p.f1 for p in live) / n,
    )
