"""Command-line driver: scrub, extract, evaluate, stats, report.

Exit codes: 0 success, 1 run finished below the success threshold,
2 usage / input error, 3 backend authentication failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence
from urllib.parse import quote

from . import __version__
from .corpus import CorpusError, corpus_stats, dump_corpus, load_corpus, load_gold, scrub_phi, ClinicalNote
from .eval_ner import evaluate_ner
from .eval_semantic import (
    DEFAULT_EMBED_MODEL,
    Embedder,
    EmbeddingCache,
    HTTPEmbedder,
    SemanticEvalConfig,
    SentenceTransformerEmbedder,
    StubEmbedder,
    evaluate_semantic,
)
from .extraction import (
    DEFAULT_API_KEY_ENV,
    DEFAULT_ENDPOINT,
    DEFAULT_MODEL,
    DEFAULT_SYSTEM_PROMPT,
    AuthenticationError,
    BackendConfig,
    ExtractionRecord,
    HTTPChatBackend,
    MockBackend,
    run_extraction,
)
from .postprocess import default_lexicons, lexicon_hash, load_lexicons, postprocess_record, uncategorized
from .report import RunManifest, assemble, parse_csv, render, sha256_file, sha256_text

log = logging.getLogger("sdoh_extract")

EXIT_OK, EXIT_BELOW_THRESHOLD, EXIT_USAGE, EXIT_AUTH = 0, 1, 2, 3

EXTRACTIONS_FILE = "extractions.jsonl"
FAILURES_FILE = "failures.jsonl"
EXTRACT_META_FILE = "extract_meta.json"
REPORT_FILES = {"csv": "report.csv", "json": "report.json", "markdown": "report.md"}


class UsageError(Exception):
    pass


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {p}")
    return p


def _out_dir(path: Optional[str]) -> Path:
    if not path:
        raise UsageError("--out-dir is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


# -- commands -----------------------------------------------------------------


def cmd_scrub(args: argparse.Namespace) -> int:
    notes_path = _require_file(args.notes, "--notes")
    notes = load_corpus(notes_path)
    out = _out_dir(args.out_dir)
    scrubbed, findings = [], []
    for note in notes:
        text, found = scrub_phi(note.text)
        scrubbed.append(ClinicalNote(note.note_id, text))
        findings.extend({"note_id": note.note_id, **f.to_dict()} for f in found)
    dump_corpus(scrubbed, out / "notes.scrubbed.jsonl")
    _write_jsonl(out / "scrub_findings.jsonl", findings)
    print(f"scrubbed {len(notes)} notes, {len(findings)} replacements -> {out}")
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    notes_path = _require_file(args.notes, "--notes")
    mock_path = _require_file(args.mock_backend, "--mock-backend") if args.mock_backend else None
    system_prompt = DEFAULT_SYSTEM_PROMPT
    if args.prompt_file:
        system_prompt = _require_file(args.prompt_file, "--prompt-file").read_text(encoding="utf-8")
    notes = load_corpus(notes_path)
    out = _out_dir(args.out_dir)

    config = BackendConfig(
        endpoint_url=args.backend_url,
        api_key_env_name=args.api_key_env,
        timeout=args.timeout,
        max_retries=args.max_retries,
        backoff_base=args.backoff_base,
    )
    backend = MockBackend.from_fixture(mock_path) if mock_path else HTTPChatBackend(config)

    try:
        outcomes = run_extraction(
            notes,
            backend,
            model_id=args.model,
            temperature=args.temperature,
            system_prompt=system_prompt,
            max_retries=config.max_retries,
            backoff_base=config.backoff_base,
            parallel=args.parallel,
        )
    except AuthenticationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUTH

    raw_dir = out / "raw"
    raw_dir.mkdir(exist_ok=True)
    for o in outcomes:
        if o.raw is not None:
            (raw_dir / f"{quote(o.note_id, safe='')}.txt").write_text(o.raw.raw_text, encoding="utf-8")
    _write_jsonl(out / EXTRACTIONS_FILE, (o.record.to_dict() for o in outcomes if o.ok))
    _write_jsonl(
        out / FAILURES_FILE,
        ({"note_id": o.note_id, "error": o.error} for o in outcomes if not o.ok),
    )
    meta = {
        "model_id": args.model,
        "temperature": args.temperature,
        "prompt_sha256": sha256_text(system_prompt),
        "notes_sha256": sha256_file(notes_path),
        "backend": "mock" if mock_path else config.endpoint_url,
    }
    (out / EXTRACT_META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    ok = sum(o.ok for o in outcomes)
    fraction = ok / len(outcomes) if outcomes else 1.0
    print(f"extracted {ok}/{len(outcomes)} notes -> {out}")
    for o in outcomes:
        if not o.ok:
            print(f"  failed {o.note_id}: {o.error}", file=sys.stderr)
    return EXIT_OK if fraction >= args.min_success else EXIT_BELOW_THRESHOLD


def _build_embedder(args: argparse.Namespace, out: Path) -> Embedder:
    if args.stub_embedder is not None:
        provider = StubEmbedder(seed=args.stub_embedder)
    elif args.embed_url:
        provider = HTTPEmbedder(args.embed_url, model_id=args.embed_model, api_key_env_name=args.api_key_env)
    else:
        provider = SentenceTransformerEmbedder(args.embed_model)
    return Embedder(provider, EmbeddingCache(out / "embeddings.json"))


def cmd_evaluate(args: argparse.Namespace) -> int:
    gold_path = _require_file(args.gold, "--gold")
    out = _out_dir(args.out_dir)
    extractions_path = Path(args.extractions) if args.extractions else out / EXTRACTIONS_FILE
    if not extractions_path.is_file():
        raise UsageError(f"no extraction output at {extractions_path}; run `extract` first")
    lexicons = load_lexicons(_require_file(args.lexicons, "--lexicons")) if args.lexicons else default_lexicons()
    sem_config = SemanticEvalConfig(thresholds=args.thresholds, model_id=args.embed_model, mode=args.align_mode)
    if len(sem_config.thresholds) != 2:
        raise UsageError("--thresholds takes exactly two values (e.g. 0.8,0.9)")

    gold = load_gold(gold_path)
    with extractions_path.open(encoding="utf-8") as handle:
        records = [ExtractionRecord.from_dict(json.loads(line)) for line in handle if line.strip()]
    concepts = [c for rec in records for c in postprocess_record(rec, lexicons)]

    embedder = _build_embedder(args, out)
    ner = evaluate_ner(gold, concepts, pooling=args.pooling)
    semantic = evaluate_semantic(gold, concepts, embedder, sem_config)
    embedder.cache.save()
    rows = assemble(ner, semantic, corpus_stats(gold), sem_config.thresholds)

    meta = {}
    meta_path = extractions_path.parent / EXTRACT_META_FILE
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    corpus_hashes = {"gold": sha256_file(gold_path)}
    if "notes_sha256" in meta:
        corpus_hashes["notes"] = meta["notes_sha256"]
    manifest = RunManifest(
        model_id=meta.get("model_id", ""),
        prompt_hash=meta.get("prompt_sha256", ""),
        lexicon_hash=lexicon_hash(lexicons),
        corpus_hashes=corpus_hashes,
        embedding_model_id=embedder.model_id,
        pooling=args.pooling,
        thresholds=sem_config.thresholds,
        timestamp=_timestamp(),
    )
    for fmt_name, filename in REPORT_FILES.items():
        (out / filename).write_text(render(rows, manifest, fmt_name), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_jsonl(
        out / "uncategorized.jsonl",
        ({"note_id": c.note_id, "category": c.category.value, "text": c.text} for c in uncategorized(concepts)),
    )
    print(render(rows, manifest, args.format), end="")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    gold = load_gold(_require_file(args.gold, "--gold"))
    stats = corpus_stats(gold)
    rows = stats.to_rows()
    if args.out_dir:
        out = _out_dir(args.out_dir)
        (out / "stats.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    width = max(len(f"{r['category']}.{r['subtype']}") for r in rows)
    for r in rows:
        name = r["category"] if r["subtype"] is None else f"{r['category']}.{r['subtype']}"
        print(f"{name:<{width}}  {r['count']}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if not args.out_dir:
        raise UsageError("--out-dir is required")
    out = Path(args.out_dir)
    csv_path = _require_file(str(out / REPORT_FILES["csv"]), "report.csv")
    rows = parse_csv(csv_path.read_text(encoding="utf-8"))
    manifest = RunManifest()
    if (out / "manifest.json").is_file():
        manifest = RunManifest.from_dict(json.loads((out / "manifest.json").read_text(encoding="utf-8")))
    print(render(rows, manifest, args.format), end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdoh-extract",
        description="Zero-shot clinical extraction of demographics, social and family history, and its evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of default option values (flags override)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scrub", help="replace residual dates, phone numbers and MRNs")
    p.add_argument("--notes")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_scrub)

    p = sub.add_parser("extract", help="prompt the chat backend for every note")
    p.add_argument("--notes")
    p.add_argument("--out-dir")
    p.add_argument("--backend-url", default=DEFAULT_ENDPOINT)
    p.add_argument("--api-key-env", default=DEFAULT_API_KEY_ENV, help="name of the env var holding the API key")
    p.add_argument("--model", default=DEFAULT_MODEL)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--parallel", type=int, default=4)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--backoff-base", type=float, default=1.0)
    p.add_argument("--min-success", type=float, default=1.0, help="fraction of notes that must succeed")
    p.add_argument("--prompt-file", help="replace the default system prompt")
    p.add_argument("--mock-backend", metavar="FIXTURE", help="JSONL of canned replies instead of a live backend")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score extractions against gold")
    p.add_argument("--gold")
    p.add_argument("--notes", help="accepted for symmetry; not required")
    p.add_argument("--out-dir")
    p.add_argument("--extractions", help="defaults to <out-dir>/extractions.jsonl")
    p.add_argument("--lexicons")
    p.add_argument("--pooling", choices=("micro", "macro"), default="micro")
    p.add_argument("--thresholds", type=_parse_thresholds, default=(0.8, 0.9))
    p.add_argument("--align-mode", choices=("span", "concat"), default="span")
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")
    p.add_argument("--stub-embedder", type=int, metavar="SEED")
    p.add_argument("--embed-url")
    p.add_argument("--embed-model", default=DEFAULT_EMBED_MODEL)
    p.add_argument("--api-key-env", default=DEFAULT_API_KEY_ENV)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="count gold annotations per category and subtype")
    p.add_argument("--gold")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="re-render a finished evaluation")
    p.add_argument("--out-dir")
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise UsageError(f"--config: no such file: {path}")
    values = {k.replace("-", "_"): v for k, v in json.loads(path.read_text(encoding="utf-8")).items()}
    if "thresholds" in values and not isinstance(values["thresholds"], (list, tuple)):
        values["thresholds"] = _parse_thresholds(values["thresholds"])
    for action in parser._subparsers._group_actions:
        for subparser in action.choices.values():
            subparser.set_defaults(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
