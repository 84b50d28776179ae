"""Results-table assembly and rendering (CSV, JSON, Markdown)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from . import __version__
from .corpus import CorpusStats
from .eval_ner import PRF
from .eval_semantic import SemanticScores
from .schema import Category, Cell, Subtype, cell_name, cell_sort_key

CSV_HEADER = ("category", "subtype", "precision", "recall", "f1", "avg_s", "acc_080", "acc_090", "support")

AGGREGATION_NOTE = (
    "Overall figures are the unweighted mean of the per-row scores within each group."
)

GROUPS: tuple[tuple[str, tuple[Category, ...]], ...] = (
    ("demographics", (Category.AGE, Category.GENDER, Category.ETHNICITY)),
    ("social_history", (Category.SOCIAL_HISTORY,)),
    ("family_history", (Category.FAMILY_HISTORY,)),
)


class ReportConsistencyError(ValueError):
    pass


def round_half_up(x: float, places: int = 3) -> Decimal:
    """Round to ``places`` decimals, halves away from zero.

    The float is first fixed at 12 decimals so that values like
    0.7215 (stored as 0.72149999...) round the way they read.
    """
    d = Decimal(f"{x:.12f}").quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)
    return d.copy_abs() if d.is_zero() else d


def fmt(x: float) -> str:
    return str(round_half_up(x))


@dataclass(frozen=True)
class MetricRow:
    category: Category
    subtype: Optional[Subtype]
    p: float
    r: float
    f1: float
    avg_s: float
    acc_080: float
    acc_090: float
    support: int

    @property
    def cell(self) -> Cell:
        return (self.category, self.subtype)

    @property
    def label(self) -> str:
        return self.subtype.label if self.subtype else self.category.label


@dataclass(frozen=True)
class RunManifest:
    model_id: str = ""
    prompt_hash: str = ""
    lexicon_hash: str = ""
    corpus_hashes: dict[str, str] = field(default_factory=dict)
    embedding_model_id: str = ""
    pooling: str = "micro"
    thresholds: tuple[float, ...] = (0.8, 0.9)
    timestamp: str = ""
    toolkit_version: str = __version__

    def to_dict(self, include_timestamp: bool = True) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        if not include_timestamp:
            d.pop("timestamp")
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        d = dict(d)
        d["thresholds"] = tuple(d.get("thresholds", (0.8, 0.9)))
        return cls(**d)


def sha256_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def assemble(
    ner: Mapping[Cell, PRF],
    semantic: Mapping[Cell, SemanticScores],
    stats: CorpusStats,
    thresholds: Sequence[float] = (0.8, 0.9),
) -> list[MetricRow]:
    """Join the two metric families cell by cell, in results-table order."""
    for cell in set(ner) ^ set(semantic):
        side = "NER" if cell in ner else "semantic"
        raise ReportConsistencyError(f"cell {cell_name(cell)} present only in {side} results")
    lo, hi = thresholds[0], thresholds[-1]
    rows = []
    for cell in sorted(ner, key=cell_sort_key):
        prf, sem = ner[cell], semantic[cell]
        rows.append(
            MetricRow(
                category=cell[0],
                subtype=cell[1],
                p=prf.precision,
                r=prf.recall,
                f1=prf.f1,
                avg_s=sem.avg_s,
                acc_080=sem.acc_at[lo],
                acc_090=sem.acc_at[hi],
                support=stats[cell],
            )
        )
    return rows


def aggregate_overall(rows: Sequence[MetricRow]) -> dict[str, PRF]:
    """Unweighted mean P, R and F1 per group (demographics, social, family)."""
    if not rows:
        raise ValueError("no rows to aggregate")
    out = {}
    for name, categories in GROUPS:
        members = [r for r in rows if r.category in categories]
        if not members:
            continue
        n = len(members)
        out[name] = PRF(
            sum(r.p for r in members) / n,
            sum(r.r for r in members) / n,
            sum(r.f1 for r in members) / n,
        )
    return out


# -- rendering ----------------------------------------------------------------


def _render_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(
            [
                r.category.value,
                r.subtype.value if r.subtype else "",
                *(fmt(v) for v in (r.p, r.r, r.f1, r.avg_s, r.acc_080, r.acc_090)),
                r.support,
            ]
        )
    return buf.getvalue()


def _row_dict(r: MetricRow) -> dict:
    return {
        "category": r.category.value,
        "subtype": r.subtype.value if r.subtype else None,
        "precision": float(round_half_up(r.p)),
        "recall": float(round_half_up(r.r)),
        "f1": float(round_half_up(r.f1)),
        "avg_s": float(round_half_up(r.avg_s)),
        "acc_080": float(round_half_up(r.acc_080)),
        "acc_090": float(round_half_up(r.acc_090)),
        "support": r.support,
    }


def _render_json(rows: Sequence[MetricRow], manifest: RunManifest) -> str:
    overall = aggregate_overall(rows) if rows else {}
    doc = {
        "manifest": manifest.to_dict(include_timestamp=False),
        "rows": [_row_dict(r) for r in rows],
        "overall": {
            k: {
                "precision": float(round_half_up(v.precision)),
                "recall": float(round_half_up(v.recall)),
                "f1": float(round_half_up(v.f1)),
            }
            for k, v in overall.items()
        },
        "aggregation": AGGREGATION_NOTE,
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _render_markdown(rows: Sequence[MetricRow], manifest: RunManifest) -> str:
    lo, hi = manifest.thresholds[0], manifest.thresholds[-1]
    lines = [
        "# Performance per entity type",
        "",
        "NER columns use relaxed word overlap; semantic columns use embedding cosine similarity.",
        "",
        f"| Entity type | NER P | NER R | NER F1 | Sem. Ave (s) | Sem. Acc (θ={lo:g}) | Sem. Acc (θ={hi:g}) | Support |",
        "|---|---:|---:|---:|---:|---:|---:|---:|",
    ]
    blank = " | ".join([""] * 7)
    current_section = None
    for r in rows:
        if r.category.has_subtypes and r.category is not current_section:
            lines.append(f"| **{r.category.label}** | {blank} |")
        current_section = r.category if r.category.has_subtypes else None
        label = f"&nbsp;&nbsp;{r.label}" if r.subtype else r.label
        nums = " | ".join(fmt(v) for v in (r.p, r.r, r.f1, r.avg_s, r.acc_080, r.acc_090))
        lines.append(f"| {label} | {nums} | {r.support} |")

    if rows:
        lines += ["", "## Overall", "", "| Group | P | R | F1 |", "|---|---:|---:|---:|"]
        for name, prf in aggregate_overall(rows).items():
            lines.append(f"| {name} | {fmt(prf.precision)} | {fmt(prf.recall)} | {fmt(prf.f1)} |")

    lines += [
        "",
        f"_{AGGREGATION_NOTE}_",
        "",
        "## Run",
        "",
        f"- model: `{manifest.model_id}`",
        f"- embedding model: `{manifest.embedding_model_id}`",
        f"- pooling: {manifest.pooling}",
        f"- prompt sha256: `{manifest.prompt_hash}`",
        f"- lexicon sha256: `{manifest.lexicon_hash}`",
    ]
    for name, digest in sorted(manifest.corpus_hashes.items()):
        lines.append(f"- {name} sha256: `{digest}`")
    lines.append(f"- toolkit version: {manifest.toolkit_version}")
    return "\n".join(lines) + "\n"


def render(rows: Sequence[MetricRow], manifest: RunManifest, format: str = "csv") -> str:
    """Render rows. Output depends only on the inputs; the manifest
    timestamp is deliberately left out so reruns are byte-identical."""
    if format == "csv":
        return _render_csv(rows)
    if format == "json":
        return _render_json(rows, manifest)
    if format in ("markdown", "md"):
        return _render_markdown(rows, manifest)
    raise ValueError(f"unknown report format {format!r}; expected csv, json or markdown")


def parse_csv(text: str) -> list[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(
            MetricRow(
                category=Category.parse(rec["category"]),
                subtype=Subtype.parse(rec["subtype"]) if rec["subtype"] else None,
                p=float(rec["precision"]),
                r=float(rec["recall"]),
                f1=float(rec["f1"]),
                avg_s=float(rec["avg_s"]),
                acc_080=float(rec["acc_080"]),
                acc_090=float(rec["acc_090"]),
                support=int(rec["support"]),
            )
        )
    return rows
