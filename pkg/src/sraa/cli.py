"""Command line: ``sraa gen-data | run | verify | report``.

Exit codes: 0 success, 1 verification failure, 2 config error,
3 missing or unreadable input, 4 training failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig, load_config, override
from .errors import (
    ConfigError,
    DuplicateClassError,
    FormatError,
    IoError,
    TrainingError,
    UnknownClassError,
)
from .evaluation import read_reports

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_INPUT, EXIT_TRAIN = 0, 1, 2, 3, 4

REPORT_COLUMNS = ("method", "fold", "shots", "protocol", "step", "miou_base", "miou_novel", "hm",
                  "base_to_novel", "novel_to_base")

log = logging.getLogger("sraa")


def _folds(text: str) -> list[int]:
    try:
        folds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"fold must be an integer or comma list, got {text!r}") from None
    if not folds or any(f < 0 for f in folds):
        raise argparse.ArgumentTypeError("folds must be non-negative")
    return folds


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sraa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p, protocol=True):
        p.add_argument("--config", type=Path, help="YAML run config (defaults apply to missing keys)")
        p.add_argument("--fold", type=_folds, help="fold id or comma list, e.g. 0,1,2")
        p.add_argument("--seed", type=_u64)
        if protocol:
            p.add_argument("--protocol", choices=("single", "multi"))
            p.add_argument("--shots", type=int, choices=(1, 2, 5))

    p = sub.add_parser("gen-data", help="write the synthetic episodes for a config")
    run_flags(p, protocol=False)
    p.add_argument("--out", type=Path, help="data directory (default: config data_dir)")

    p = sub.add_parser("run", help="base step plus incremental steps, with reports")
    run_flags(p)
    p.add_argument("--baseline", action="append", choices=("ft", "imprint"),
                   help="also run a comparison arm (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="parallel folds")

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", choices=("grad", "oracle", "determinism", "all"))

    p = sub.add_parser("report", help="tabulate reports and render figures")
    run_flags(p)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {"seed": args.seed}
    for key in ("protocol", "shots"):
        changes[key] = getattr(args, key, None)
    if getattr(args, "baseline", None):
        changes["baselines"] = sorted(set(cfg.baselines) | set(args.baseline))
    if args.fold:
        changes["fold"] = args.fold[0]
    return override(cfg, **changes)


def cmd_gen_data(args) -> int:
    from .runner import generate_data
    cfg = _config(args)
    for fold in args.fold or [cfg.fold]:
        files = generate_data(cfg, fold, args.out)
        print(f"fold {fold}: wrote {len(files)} files to {files[0].parent}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import run_folds
    cfg = _config(args)
    t0 = time.perf_counter()
    dirs = run_folds(cfg, args.fold or [cfg.fold], args.workers)
    for d in dirs:
        for line in (d / "summary.csv").read_text().splitlines()[1:]:
            print(f"{d}: {line}")
    log.info("run finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .checks import SUITES, run_suite
    suites = SUITES if args.suite == "all" else (args.suite,)
    failed = []
    for suite in suites:
        for r in run_suite(suite):
            status = "PASS" if r.passed else "FAIL"
            print(f"{status} {suite}:{r.name} ({r.detail}; {r.seconds:.2f} s)")
            if not r.passed:
                failed.append(f"{suite}:{r.name}")
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def _run_dirs(cfg: RunConfig, folds) -> list[Path]:
    from .runner import run_dir
    if folds:
        dirs = [run_dir(cfg, f) for f in folds]
    else:
        dirs = sorted(p.parent for p in Path(cfg.out_dir).glob("fold*/*/manifest.json"))
    return [d for d in dirs if (d / "reports.jsonl").exists()]


def _write_rows(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()})


def cmd_report(args) -> int:
    from .plotting import plot_confusion, plot_scores
    cfg = _config(args)
    dirs = _run_dirs(cfg, args.fold)
    if not dirs:
        print(f"no finished runs under {cfg.out_dir}", file=sys.stderr)
        return EXIT_INPUT
    rows, finals = [], []
    fig_dir = Path(cfg.out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    for d in dirs:
        reports = read_reports(d / "reports.jsonl")
        last = max(r.step_index for r in reports)
        for r in reports:
            c = r.context
            rows.append({"method": c.get("method"), "fold": c.get("fold"), "shots": c.get("shots"),
                         "protocol": c.get("protocol"), "step": r.step_index,
                         "miou_base": r.miou_base, "miou_novel": r.miou_novel, "hm": r.hm,
                         "base_to_novel": r.base_to_novel, "novel_to_base": r.novel_to_base})
            if r.step_index == last:
                tag = f"fold{c.get('fold')}_{c.get('protocol')}_k{c.get('shots')}_{c.get('method')}"
                plot_confusion(r, fig_dir / f"confusion_{tag}.png",
                               f"{c.get('method')} after step {last} ({c.get('protocol')}, k={c.get('shots')})")
                finals.append({"label": tag, "miou_base": r.miou_base, "miou_novel": r.miou_novel,
                               "hm": r.hm})
    plot_scores(finals, fig_dir / "scores.png", "final step: base / novel mIoU and HM")

    _write_rows(rows, sys.stdout)
    with open(Path(cfg.out_dir) / "report.csv", "w", newline="", encoding="utf-8") as fh:
        _write_rows(rows, fh)
    print(f"figures in {fig_dir}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UnknownClassError, DuplicateClassError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoError, FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except json.JSONDecodeError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
