"""Command-line entry point.

Exit codes: 0 ok, 1 validation error, 2 backend exhaustion, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .dataset import load_index
from .runner import (
    ExperimentConfig, evaluate_run, export_crops, format_csv, format_table, report_runs, run,
)
from .split_optimizer import SeedSearchConfig, SplitConstraints, solve, write_split

EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("fsodbench")


def _cmd_split(args) -> int:
    index = load_index(args.index, args.format)
    sources = [args.source] if args.source is not None else index.sources()
    constraints = SplitConstraints(args.m_exp, args.m_test, args.n_exp, args.n_test)
    search = SeedSearchConfig(trials=args.trials, base_seed=args.seed)
    out = Path(args.out)
    many = len(sources) > 1
    if many:
        out.mkdir(parents=True, exist_ok=True)
    scores = []
    for src in sources:
        a = solve(index.to_split_instance(src), constraints, search)
        path = out / f"split_{src or 'default'}.jsonl" if many else out
        write_split(a, path)
        scores.append(a.score.sss)
        print(f"{src or '-'}: SSS {a.score.sss:.4f} (CPC {a.score.cpc:.4f}, CBE {a.score.cbe:.4f}) "
              f"trial {a.trial}/{a.trials} -> {path}")
    if many:
        print(f"mean SSS over {len(scores)} sources: {sum(scores) / len(scores):.4f}")
    return EXIT_OK


def _cmd_crops(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    manifest = export_crops(cfg, args.out, args.image_dir)
    print(f"wrote {len(manifest)} crop(s) to {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = args.out or str(Path(args.config).with_suffix(".run.jsonl"))
    record = run(cfg, out, image_dir=args.image_dir)
    counts = record.counts()
    print(f"{out}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    if record.exhausted():
        log.error("%d image(s) failed after exhausting retries", len(record.exhausted()))
        return EXIT_BACKEND
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    index = load_index(args.index) if args.index else None
    ev = evaluate_run(args.run, index)
    if args.out:
        Path(args.out).write_text(ev.to_json())
    h = ev.headline
    print(f"{h.method} K={h.k}: mF1 {h.mf1:.4f}  Mean IoU(TP@{h.tp_iou_anchor}) {h.mean_iou_tp:.4f}  "
          f"failed {sum(r.n_failed for r in ev.per_dataset['excluded'].values())}")
    return EXIT_OK


def _cmd_report(args) -> int:
    sheets = report_runs(args.runs, args.variant)
    text = format_csv(sheets) if args.csv else format_table(sheets)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsodbench", description="Few-shot detection benchmark toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="build example/test splits from an annotation index")
    s.add_argument("--index", required=True)
    s.add_argument("--format", choices=("coco_json", "simple_csv"))
    s.add_argument("--out", required=True, help="split file, or a directory when the index has several sources")
    s.add_argument("--source", help="only split this source tag")
    s.add_argument("--trials", type=int, default=SeedSearchConfig.trials)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--m-exp", type=int, default=SplitConstraints.m_exp)
    s.add_argument("--m-test", type=int, default=SplitConstraints.m_test)
    s.add_argument("--n-exp", type=int, default=SplitConstraints.n_exp)
    s.add_argument("--n-test", type=int, default=SplitConstraints.n_test)
    s.set_defaults(func=_cmd_split)

    s = sub.add_parser("crops", help="write the support crops a config would use")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image-dir", help="where to draw synthetic images")
    s.set_defaults(func=_cmd_crops)

    s = sub.add_parser("run", help="execute an experiment config (resumable)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="run file (default: <config>.run.jsonl)")
    s.add_argument("--image-dir", help="where to draw synthetic images")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("evaluate", help="score a run file")
    s.add_argument("--run", required=True)
    s.add_argument("--index", help="override the index named in the run's config")
    s.add_argument("--out", help="write the full evaluation as JSON")
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("report", help="method x K tables over several runs")
    s.add_argument("--runs", required=True, help="glob of run files")
    s.add_argument("--csv", action="store_true")
    s.add_argument("--variant", choices=("excluded", "empty"), default="excluded")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValueError, KeyError, AssertionError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
