"""Command-line interface.

Subcommands: synth, propose, infer, align, eval, gradcheck. Exit codes:
0 success, 1 failed check, 2 usage error, 3 data error. Set FORMGRAPH_LOG to a
level name (e.g. DEBUG) to adjust logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .constants import EDIT_THRESHOLDS, RELATIONSHIP_THRESHOLD, EditThresholds
from .docmodel import (
    Document,
    confident_lines,
    dumps_deterministic,
    load_document,
    load_funsd,
    load_naf,
    save_document,
    synth_form,
)
from .errors import DataError, UsageError
from .features import resolve_provider
from .gnn import run_gradcheck_suite
from .graphedit import graph_from_json, graph_to_json, init_graph, predicted_entities, predicted_relationships
from .metrics import EvalReport, per_document_average
from .pipeline import run_document
from .proposal import score_pairs, select_edges
from .render import svg_overlay
from .supervision import assign_lines, derive_labels, proposal_labels
from .weights import ModelWeights

log = logging.getLogger(__name__)


def _load_doc(path: str, fmt: str) -> Document:
    if fmt == "doc":
        return load_document(path)
    if fmt == "funsd":
        return load_funsd(path)
    if fmt == "naf":
        return load_naf(path)
    raise UsageError(f"unknown document format {fmt!r}")


def _load_docs(paths: list[str], fmt: str) -> list[Document]:
    return [_load_doc(p, fmt) for p in paths]


def _parse_thresholds(text: str | None):
    if text is None:
        return EDIT_THRESHOLDS
    groups = text.split(";")
    if len(groups) != len(EDIT_THRESHOLDS):
        raise UsageError(f"--thresholds needs {len(EDIT_THRESHOLDS)} merge,group,prune triples separated by ';'")
    out = []
    for group in groups:
        parts = group.split(",")
        if len(parts) != 3:
            raise UsageError(f"threshold triple {group!r} must be merge,group,prune")
        try:
            m, g, p = (float(v) for v in parts)
        except ValueError as exc:
            raise UsageError(f"bad threshold in {group!r}: {exc}") from exc
        for v in (m, g, p):
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"threshold {v} outside [0, 1]")
        out.append(EditThresholds(merge=m, group=g, prune=p))
    return tuple(out)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_deterministic(obj), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        doc = synth_form(
            seed=seed,
            rows=args.rows,
            cols=args.cols,
            multiline_prob=args.multiline_prob,
            overseg_prob=args.overseg_prob,
            jitter=args.jitter,
        )
        save_document(doc, out / f"{doc.name}.json")
    print(f"wrote {args.count} documents to {out}")
    return 0


def _proposal_candidates(doc: Document, weights: ModelWeights | None, oracle: bool):
    lines = confident_lines(doc)
    if oracle:
        labels = proposal_labels(doc, lines)
        from .proposal import EdgeCandidate

        return [EdgeCandidate(a, b, 1.0 if v else 0.0) for (a, b), v in sorted(labels.items())]
    if weights is None:
        raise UsageError("provide --weights or use --oracle")
    return score_pairs(doc, weights.proposal(), lines)


def cmd_propose(args) -> int:
    weights = ModelWeights.load(args.weights) if args.weights else None
    out = Path(args.out)
    for doc in _load_docs(args.docs, args.format):
        candidates = _proposal_candidates(doc, weights, args.oracle)
        selected = set(select_edges(candidates))
        payload = {
            "document": doc.name,
            "pairs": [
                {"a": c.a, "b": c.b, "score": c.score, "selected": (c.a, c.b) in selected}
                for c in candidates
            ],
        }
        _write_json(out / f"{doc.name}.proposals.json", payload)
    print(f"wrote proposals for {len(args.docs)} documents to {out}")
    return 0


def _infer_one(doc_path: str, fmt: str, weights_path: str | None, provider_spec: str,
               oracle: bool, thresholds_text: str | None, rel_threshold: float,
               out_dir: str, svg: bool) -> str:
    doc = _load_doc(doc_path, fmt)
    weights = ModelWeights.load(weights_path) if weights_path else None
    provider = resolve_provider(provider_spec)
    result = run_document(
        doc,
        weights=weights,
        provider=provider,
        thresholds=_parse_thresholds(thresholds_text),
        relationship_threshold=rel_threshold,
        oracle=oracle,
    )
    payload = graph_to_json(result.final, doc.class_set)
    payload["document"] = doc.name
    _write_json(Path(out_dir) / f"{doc.name}.graph.json", payload)
    if svg:
        entities = predicted_entities(result.final, doc.class_set)
        pairs = predicted_relationships(result.final)
        svg_text = svg_overlay(doc, entities, pairs)
        (Path(out_dir) / f"{doc.name}.svg").write_text(svg_text, encoding="utf-8")
    return doc.name


def cmd_infer(args) -> int:
    if not args.oracle and not args.weights:
        raise UsageError("provide --weights or use --oracle")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    tasks = [
        (p, args.format, args.weights, args.provider, args.oracle,
         args.thresholds, args.relationship_threshold, args.out, args.svg)
        for p in args.docs
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            names = list(pool.map(_infer_one, *zip(*tasks)))
    else:
        names = [_infer_one(*task) for task in tasks]
    print(f"inferred {len(names)} documents into {args.out}")
    return 0


def cmd_align(args) -> int:
    out = Path(args.out)
    for doc in _load_docs(args.docs, args.format):
        lines = confident_lines(doc)
        assignment = assign_lines(lines, doc.gt_lines)
        all_pairs = [(a.id, b.id) for i, a in enumerate(lines) for b in lines[i + 1:]]
        labels = derive_labels(init_graph(lines, all_pairs), assignment, doc)
        payload = {
            "document": doc.name,
            "assignment": {str(lid): gt for lid, gt in sorted(assignment.items())},
            "node_labels": {str(n): lab for n, lab in sorted(labels.node_labels.items())},
            "pair_labels": [[a, b, verdict] for (a, b), verdict in sorted(labels.edge_labels.items())],
        }
        _write_json(out / f"{doc.name}.labels.json", payload)
    print(f"wrote labels for {len(args.docs)} documents to {out}")
    return 0


def cmd_eval(args) -> int:
    docs = _load_docs(args.docs, args.format)
    weights = ModelWeights.load(args.weights) if args.weights else None
    if args.pred is None and weights is None and not args.oracle:
        raise UsageError("provide --pred, --weights, or --oracle")
    if args.hit1 and args.pred is not None:
        raise UsageError("--hit1 reruns the pipeline; use --weights or --oracle, not --pred")

    report = EvalReport()
    per_doc: list[EvalReport] = []
    provider = resolve_provider(args.provider)
    thresholds = _parse_thresholds(args.thresholds)
    for doc in docs:
        if args.pred is not None:
            pred_path = Path(args.pred) / f"{doc.name}.graph.json"
            try:
                obj = json.loads(pred_path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read prediction {pred_path}: {exc}") from exc
            entities, pairs = graph_from_json(obj, doc.class_set)
            pair_scores = None
        else:
            result = run_document(
                doc, weights=weights, provider=provider, oracle=args.oracle,
                thresholds=thresholds, relationship_threshold=args.relationship_threshold,
            )
            entities = predicted_entities(result.final, doc.class_set)
            pairs = predicted_relationships(result.final)
            pair_scores = None
            if args.hit1:
                forced = run_document(
                    doc, weights=weights, provider=provider, oracle=args.oracle,
                    thresholds=thresholds, relationship_threshold=args.relationship_threshold,
                    forced_entities=True,
                )
                pair_scores = forced.entity_pair_scores(doc)
        report.add_document(doc, entities, pairs, pair_scores)
        if args.per_doc:
            single = EvalReport()
            single.add_document(doc, entities, pairs, pair_scores)
            per_doc.append(single)

    payload = report.to_json()
    if args.per_doc:
        payload["per_document_average"] = per_document_average(per_doc)
    print(report.format_table())
    if args.json:
        _write_json(Path(args.json), payload)
    return 0


def cmd_gradcheck(args) -> int:
    worst = run_gradcheck_suite(
        draws=args.draws, eps=args.eps, seed=args.seed, function_id=args.function,
    )
    print(f"max relative error {worst:.3e} over {args.draws} draws (eps={args.eps:g})")
    if worst >= args.tol:
        print(f"FAIL: above tolerance {args.tol:g}")
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_doc_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("docs", nargs="+", help="document files")
    p.add_argument("--format", choices=("doc", "funsd", "naf"), default="doc",
                   help="annotation format of the inputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formgraph", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic form documents")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=2)
    p.add_argument("--multiline-prob", type=float, default=0.0)
    p.add_argument("--overseg-prob", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("propose", help="score and select candidate edges")
    _add_doc_args(p)
    p.add_argument("--weights")
    p.add_argument("--oracle", action="store_true", help="use label-derived scores")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_propose)

    p = sub.add_parser("infer", help="run the full pipeline")
    _add_doc_args(p)
    p.add_argument("--weights")
    p.add_argument("--oracle", action="store_true", help="use label-derived scores")
    p.add_argument("--provider", default="stub", help="'stub' or module:attribute")
    p.add_argument("--thresholds", help="merge,group,prune;... override, three triples")
    p.add_argument("--relationship-threshold", type=float, default=RELATIONSHIP_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", action="store_true", help="also write an SVG overlay per document")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("align", help="dump GT alignment and derived labels")
    _add_doc_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_doc_args(p)
    p.add_argument("--pred", help="directory of *.graph.json predictions")
    p.add_argument("--weights")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--provider", default="stub")
    p.add_argument("--thresholds")
    p.add_argument("--relationship-threshold", type=float, default=RELATIONSHIP_THRESHOLD)
    p.add_argument("--hit1", action="store_true", help="also run forced-grouping parent retrieval")
    p.add_argument("--per-doc", action="store_true", help="also report per-document averages")
    p.add_argument("--json", help="write the full report to this file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--function", choices=("proposal_bce", "linear"), default="proposal_bce")
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FORMGRAPH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
