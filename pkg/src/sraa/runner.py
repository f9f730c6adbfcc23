"""Protocol runner: data generation on disk, base step, incremental steps, reports.

Directory layout::

    <data_dir>/fold<f>/plan.json
                      base.ep
                      fewshot_g<i>_k<k>.ep     one per novel group and shot count
                      test_t<t>.ep             base classes plus the first t groups
    <out_dir>/fold<f>/<protocol>_k<k>/
                      manifest.json            written before any training
                      checkpoints/step<t>_<method>.ckpt
                      base_report.jsonl        the step-0 model on base classes
                      reports.jsonl            one record per incremental step and method
                      summary.csv              final step of SRAA (summary_<method>.csv for baselines)
                      invariants.json          per-step protocol checks
                      access_log.json          every episode file read, with the step it was read in
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import RunConfig
from .data import (
    Episode,
    SplitPlan,
    concat_episodes,
    export_episode,
    generate_base,
    generate_test,
    import_episode,
    sample_fewshot,
)
from .encoders import SemanticTable, build_semantic_table
from .engine import StepState, predict, save_checkpoint, snapshot, train_base, train_increment
from .errors import ConfigError, IoError, MissingInputError
from .evaluation import MetricsReport, evaluate, write_reports, write_summary

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# method arm -> (engine method, whether incremental epochs run)
ARMS = {"sraa": ("sraa", True), "ft": ("ft", True), "imprint": ("sraa", False)}


def fold_dir(data_dir, fold: int) -> Path:
    return Path(data_dir) / f"fold{fold}"


def run_dir(cfg: RunConfig, fold: int) -> Path:
    return Path(cfg.out_dir) / f"fold{fold}" / f"{cfg.protocol}_k{cfg.shots}"


def fewshot_name(group_index: int, k: int) -> str:
    return f"fewshot_g{group_index}_k{k}.ep"


def test_name(n_groups: int) -> str:
    return f"test_t{n_groups}.ep"


def _plan_record(cfg: RunConfig, plan: SplitPlan) -> dict:
    rec = plan.to_dict()
    rec.pop("shots")
    rec.update(images_per_class=cfg.data.images_per_class,
               test_images_per_class=cfg.data.test_images_per_class,
               shot_counts=sorted(cfg.data.shot_counts))
    return rec


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


# --------------------------------------------------------------------------
# data generation


def generate_data(cfg: RunConfig, fold: int | None = None, data_dir=None) -> list[Path]:
    """Write every episode a run of this config can need; returns the files written."""
    fold = cfg.fold if fold is None else fold
    plan = cfg.plan(fold)
    root = fold_dir(data_dir or cfg.data_dir, fold)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {root}: {exc}") from exc
    written = []

    def put(name: str, ep: Episode):
        export_episode(ep, root / name)
        written.append(root / name)

    put("base.ep", generate_base(plan, cfg.data.images_per_class))
    for i in range(len(plan.novel_class_groups)):
        for k in sorted(cfg.data.shot_counts):
            put(fewshot_name(i, k), sample_fewshot(plan, i, k))
    learned = list(plan.base_classes)
    for t in range(len(plan.novel_class_groups) + 1):
        if t:
            learned += plan.novel_class_groups[t - 1]
        put(test_name(t), generate_test(plan, learned, cfg.data.test_images_per_class, t))
    _write_json(root / "plan.json", _plan_record(cfg, plan))
    written.append(root / "plan.json")
    return written


class EpisodeStore:
    """Reads episode files from one fold directory and logs every access.

    The log is the instrumentation for the data firewall: during incremental
    step ``t`` the only training episodes read must carry tag ``t``.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.log: list[dict] = []
        self.phase, self.step = "setup", 0

    def enter(self, phase: str, step: int) -> None:
        self.phase, self.step = phase, step

    def load(self, name: str, tag: int, role: str) -> Episode:
        path = self.root / name
        if not path.exists():
            raise MissingInputError(f"{path} not found; run gen-data first")
        self.log.append({"phase": self.phase, "step": self.step, "file": name,
                         "tag": tag, "role": role})
        return import_episode(path, step_tag=tag)

    def firewall_violations(self) -> list[dict]:
        return [e for e in self.log
                if e["phase"] == "increment" and e["role"] == "train" and e["tag"] != e["step"]]


def check_data(cfg: RunConfig, fold: int, data_dir=None) -> Path:
    root = fold_dir(data_dir or cfg.data_dir, fold)
    plan_path = root / "plan.json"
    if not plan_path.exists():
        raise MissingInputError(f"no generated data in {root}; run gen-data first")
    try:
        stored = json.loads(plan_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise MissingInputError(f"unreadable {plan_path}: {exc}") from exc
    expected = _plan_record(cfg, cfg.plan(fold))
    if stored != expected:
        raise MissingInputError(f"data in {root} was generated for another config; rerun gen-data")
    if cfg.shots not in expected["shot_counts"]:
        raise MissingInputError(f"no {cfg.shots}-shot episodes in {root} (have {expected['shot_counts']})")
    return root


# --------------------------------------------------------------------------
# protocol


@dataclass
class RunResult:
    run_dir: Path
    base_report: MetricsReport
    reports: list[MetricsReport]
    invariants: list[dict]
    access_log: list[dict]
    states: dict[str, StepState]


def semantic_table(cfg: RunConfig) -> SemanticTable:
    plan = cfg.plan()
    classes = [0, *plan.base_classes, *plan.novel_classes]
    return build_semantic_table(cfg.semantic.source, classes, cfg.train.feature_dim,
                                seed=cfg.seed, path=cfg.semantic.path,
                                visual_dim=cfg.train.feature_dim)


def step_groups(cfg: RunConfig, plan: SplitPlan) -> list[list[int]]:
    """Original group indices introduced at each incremental step."""
    n = len(plan.novel_class_groups)
    return [list(range(n))] if cfg.protocol == "single" else [[i] for i in range(n)]


def manifest(cfg: RunConfig, fold: int) -> dict:
    fold_cfg = dataclasses.replace(cfg, fold=fold)
    methods = ["sraa", *cfg.baselines]
    plan = cfg.plan(fold)
    steps = len(step_groups(cfg, plan))
    return {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "config": fold_cfg.to_dict(),
        "config_digest": fold_cfg.digest(),
        "seed": cfg.seed,
        "data_seed": plan.seed,
        "fold": fold,
        "protocol": cfg.protocol,
        "shots": cfg.shots,
        "methods": methods,
        "data_dir": str(fold_dir(cfg.data_dir, fold)),
        "artifacts": {
            "checkpoints": ["checkpoints/step0.ckpt"] + [f"checkpoints/step{t}_{m}.ckpt"
                                                        for t in range(1, steps + 1) for m in methods],
            "base_report": "base_report.jsonl",
            "reports": "reports.jsonl",
            "summary": ["summary.csv"] + [f"summary_{m}.csv" for m in cfg.baselines],
            "invariants": "invariants.json",
            "access_log": "access_log.json",
        },
    }


def _step_checks(method: str, prev: StepState, new: StepState, new_classes: Sequence[int],
                 before: str, store: EpisodeStore) -> dict:
    k_prev = len(prev.prototypes)
    return {
        "method": method,
        "step": new.step,
        "prototypes_before": k_prev,
        "new_classes": list(new_classes),
        "prototypes_after": len(new.prototypes),
        "cardinality_ok": len(new.prototypes) == k_prev + len(new_classes),
        "order_ok": new.prototypes.class_ids[:k_prev] == prev.prototypes.class_ids,
        # the teacher must be the entry state, and the entry state must be untouched
        "teacher_unchanged": new.teacher.fingerprint() == before == _fingerprint(prev),
        "firewall_violations": len(store.firewall_violations()),
    }


def _fingerprint(state: StepState) -> str:
    return snapshot(state).fingerprint()


def run_fold(cfg: RunConfig, fold: int | None = None) -> RunResult:
    """Base step, then every incremental step for SRAA and each configured baseline."""
    fold = cfg.fold if fold is None else fold
    plan = cfg.plan(fold)
    root = check_data(cfg, fold)
    out = run_dir(cfg, fold)
    try:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    _write_json(out / "manifest.json", manifest(cfg, fold))

    table = semantic_table(cfg)
    store = EpisodeStore(root)
    methods = ["sraa", *cfg.baselines]
    context = {"fold": fold, "shots": cfg.shots, "protocol": cfg.protocol}

    store.enter("base", 0)
    base_state = train_base(cfg.train, store.load("base.ep", 0, "train"), table, plan.base_classes)
    save_checkpoint(base_state, cfg.train, out / "checkpoints" / "step0.ckpt")
    store.enter("eval", 0)
    test = store.load(test_name(0), 0, "test")
    base_report = evaluate(predict(base_state, test.images), test.labels, base_state.classes,
                           plan.base_classes, [], 0, {**context, "method": "base"})
    write_reports([base_report], out / "base_report.jsonl")

    states = {m: base_state for m in methods}
    reports, checks = [], []
    learned_groups = 0
    for t, group_ids in enumerate(step_groups(cfg, plan), start=1):
        store.enter("increment", t)
        episodes = concat_episodes([store.load(fewshot_name(i, cfg.shots), t, "train")
                                    for i in group_ids], step_tag=t)
        new_classes = [c for i in group_ids for c in plan.novel_class_groups[i]]
        learned_groups += len(group_ids)
        for m in methods:
            engine_method, trains = ARMS[m]
            tcfg = cfg.train if trains else dataclasses.replace(cfg.train, epochs_inc=0)
            prev = states[m]
            before = _fingerprint(prev)
            log.info("fold %d step %d: %s on classes %s", fold, t, m, new_classes)
            states[m] = train_increment(prev, tcfg, episodes, table, new_classes, method=engine_method)
            checks.append(_step_checks(m, prev, states[m], new_classes, before, store))
            save_checkpoint(states[m], tcfg, out / "checkpoints" / f"step{t}_{m}.ckpt")
        store.enter("eval", t)
        test = store.load(test_name(learned_groups), t, "test")
        for m in methods:
            s = states[m]
            reports.append(evaluate(predict(s, test.images), test.labels, s.classes, plan.base_classes,
                                    plan.novel_classes, t, {**context, "method": m}))

    write_reports(reports, out / "reports.jsonl")
    final = reports[-len(methods):]
    for m, rep in zip(methods, final):
        name = "summary.csv" if m == "sraa" else f"summary_{m}.csv"
        write_summary([{**context, "miou_base": rep.miou_base, "miou_novel": rep.miou_novel,
                        "hm": rep.hm}], out / name)
    _write_json(out / "invariants.json", checks)
    _write_json(out / "access_log.json", store.log)
    return RunResult(out, base_report, reports, checks, list(store.log), states)


def _run_one(args) -> Path:
    cfg, fold = args
    return run_fold(cfg, fold).run_dir


def run_folds(cfg: RunConfig, folds: Sequence[int], workers: int = 1) -> list[Path]:
    """Run several folds, optionally in worker processes; each writes its own directory."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    for f in folds:
        check_data(cfg, f)
    jobs = [(cfg, f) for f in folds]
    if workers == 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))
