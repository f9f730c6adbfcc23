"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 5 trains the default benchmark for three seeds in both protocols,
so this module takes roughly half a minute.
"""

import math
import time

import numpy as np
import pytest
import yaml

from sraa import checks
from sraa.cli import main
from sraa.config import RunConfig
from sraa.data import export_episode, import_episode
from sraa.engine import load_checkpoint, save_checkpoint
from sraa.evaluation import harmonic_mean
from sraa.runner import generate_data, run_dir, run_fold

SEEDS = (0, 1, 2)
PROTOCOLS = ("single", "multi")


@pytest.fixture
def verdict(capsys):
    def report(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, detail
    return report


def _default(tmp, **top) -> RunConfig:
    top.setdefault("baselines", ["ft", "imprint"])
    return RunConfig(data_dir=str(tmp / "data"), out_dir=str(tmp / "runs"), **top)


# ---- 1: harmonic-mean arithmetic ----

def test_criterion_1_hm_rounding(verdict):
    t0 = time.perf_counter()
    rows = [(65.2, 19.1, 29.5), (63.8, 36.7, 46.6)]
    got = [round(harmonic_mean(b, n), 1) for b, n, _ in rows]
    secs = time.perf_counter() - t0
    ok = got == [r[2] for r in rows] and secs < 1.0
    verdict("1", ok, f"HM rounds to {got}, expected {[r[2] for r in rows]} ({secs * 1e3:.2f} ms)")


# ---- 2 and 3: verification suites ----

def _suite(suite: str):
    t0 = time.perf_counter()
    results = checks.run_suite(suite)
    return results, time.perf_counter() - t0


def test_criterion_2_gradient_suite(verdict):
    results, secs = _suite("grad")
    failed = [r.name for r in results if not r.passed]
    names = {r.name for r in results}
    losses = {"loss.pool_class_means", "loss.relation_alignment", "loss.segmentation_ce",
              "loss.affinity_ce", "loss.kd", "encoder.parameters"}
    ok = not failed and losses <= names and secs < 120 and checks.GRAD_SEEDS >= 20 \
        and checks.GRAD_TOL <= 1e-4
    verdict("2", ok, f"{len(results)} gradient checks x {checks.GRAD_SEEDS} seeds, "
                     f"failed {failed or 'none'}, missing {sorted(losses - names) or 'none'} ({secs:.1f} s)")


def test_criterion_3_oracle_suite(verdict):
    results, secs = _suite("oracle")
    failed = [r.name for r in results if not r.passed]
    required = {"pool_class_means", "relation_alignment_loss", "prototype_segment", "affinity_map",
                "affinity_ce", "kd_loss", "iou", "aliasing_matrix"}
    names = {r.name for r in results}
    ok = not failed and required <= names and secs < 120 and checks.ORACLE_INSTANCES >= 50 \
        and checks.ORACLE_TOL <= 1e-10
    verdict("3", ok, f"{len(results)} oracle checks x {checks.ORACLE_INSTANCES} instances, "
                     f"failed {failed or 'none'}, missing {sorted(required - names) or 'none'} ({secs:.2f} s)")


# ---- 4 and 5: the default benchmark ----

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Final-step reports and invariants for every (protocol, seed)."""
    tmp = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        for protocol in PROTOCOLS:
            cfg = _default(tmp, seed=seed, protocol=protocol, shots=1)
            generate_data(cfg, 0)
            res = run_fold(cfg, 0)
            last = max(r.step_index for r in res.reports)
            final = {r.context["method"]: r for r in res.reports if r.step_index == last}
            out[protocol, seed] = (final, res.invariants, res.access_log)
    return out, time.perf_counter() - t0


def test_criterion_4_protocol_invariants(verdict, benchmark):
    runs, _ = benchmark
    rows = [row for _, inv, _ in runs.values() for row in inv]
    bad = [(r["method"], r["step"], k) for r in rows
           for k in ("cardinality_ok", "order_ok", "teacher_unchanged") if not r[k]]
    fw = sum(r["firewall_violations"] for r in rows)
    ok = rows and not bad and fw == 0
    verdict("4", bool(ok), f"{len(rows)} step transitions checked, broken {bad or 'none'}, "
                           f"firewall violations {fw}")


def _table(runs, fn):
    lines, ok = [], True
    for (protocol, seed), (final, _, _) in sorted(runs.items()):
        good, text = fn(final)
        ok &= good
        lines.append(f"{protocol}/seed{seed} {text}{'' if good else ' <-- fails'}")
    return ok, "; ".join(lines)


def test_criterion_5a_novel_beats_imprint(verdict, benchmark):
    runs, secs = benchmark
    ok, detail = _table(runs, lambda f: (f["sraa"].miou_novel > f["imprint"].miou_novel,
                                         f"{f['sraa'].miou_novel:.3f}>{f['imprint'].miou_novel:.3f}"))
    verdict("5a", ok and secs < 900, f"novel mIoU sraa vs imprint: {detail} (benchmark {secs:.0f} s)")


def test_criterion_5b_base_margin_over_ft(verdict, benchmark):
    runs, _ = benchmark
    ok, detail = _table(runs, lambda f: (f["sraa"].miou_base - f["ft"].miou_base >= 0.10,
                                         f"{f['sraa'].miou_base:.3f}-{f['ft'].miou_base:.3f}"))
    verdict("5b", ok, f"base mIoU margin >= 0.10 over ft: {detail}")


def test_criterion_5c_aliasing_below_ft(verdict, benchmark):
    runs, _ = benchmark
    ok, detail = _table(runs, lambda f: (f["sraa"].base_to_novel < f["ft"].base_to_novel,
                                         f"{f['sraa'].base_to_novel:.4f}<{f['ft'].base_to_novel:.4f}"))
    verdict("5c", ok, f"base->novel aliasing sraa vs ft: {detail}")


# ---- 6: determinism of full runs ----

REPORT_FILES = ("manifest.json", "base_report.jsonl", "reports.jsonl", "summary.csv",
                "summary_ft.csv", "summary_imprint.csv", "invariants.json")


def test_criterion_6_run_determinism(verdict, tmp_path):
    cfg = _default(tmp_path)
    conf = tmp_path / "run.yaml"
    conf.write_text(yaml.safe_dump(cfg.to_dict()))
    assert main(["gen-data", "--config", str(conf)]) == 0
    out = run_dir(cfg, 0)
    blobs = []
    for _ in range(2):
        assert main(["run", "--config", str(conf)]) == 0
        blobs.append({name: (out / name).read_bytes() for name in REPORT_FILES})
    differ = [n for n in REPORT_FILES if blobs[0][n] != blobs[1][n]]
    verdict("6", not differ, f"{len(REPORT_FILES)} report files compared, differing {differ or 'none'}")


# ---- 7: export/import round trips ----

def test_criterion_7_roundtrip(verdict, tmp_path):
    cfg = _default(tmp_path, baselines=[])
    files = generate_data(cfg, 0)
    broken = []
    for path in (p for p in files if p.suffix == ".ep"):
        ep = import_episode(path)
        copy = path.with_suffix(".copy")
        export_episode(ep, copy)
        again = import_episode(copy)
        if copy.read_bytes() != path.read_bytes() or again.images.tobytes() != ep.images.tobytes() \
                or again.labels.tobytes() != ep.labels.tobytes():
            broken.append(path.name)
    res = run_fold(cfg, 0)
    ckpts = sorted((res.run_dir / "checkpoints").glob("*.ckpt"))
    for path in ckpts:
        state, digest = load_checkpoint(path)
        assert digest == cfg.train.digest()
        copy = path.with_suffix(".copy")
        save_checkpoint(state, cfg.train, copy)
        if copy.read_bytes() != path.read_bytes():
            broken.append(path.name)
    final = res.states["sraa"]
    state, _ = load_checkpoint(ckpts[-1])
    same = state.prototypes.vectors.tobytes() == final.prototypes.vectors.tobytes() and all(
        a.data.tobytes() == b.data.tobytes() for a, b in zip(state.encoder.params, final.encoder.params))
    ok = not broken and same and math.isfinite(float(np.sum(state.prototypes.vectors)))
    verdict("7", ok, f"{len(files) - 1} episodes and {len(ckpts)} checkpoints re-exported, "
                     f"not bitwise {broken or 'none'}, live state matches file {same}")
