"""Acceptance suite: each test checks one end-to-end criterion at its stated tolerance.

Runs take roughly 20 minutes on one CPU (the debiasing runs dominate).
Every test prints a single ``criterion N: PASS/FAIL`` line; the lines are
repeated in the terminal summary.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fud import experiments as X
from fud import tensor as T
from fud.cli import main
from fud.identify import (
    cls_loss,
    eigengap_candidates,
    eigengap_select_k,
    filter_vectors,
    similarity_matrix,
    spectral_partition,
    spectrum,
)
from fud.models import ClassifierSpec, FilterPartition, Identifier, RemoverSpec, apply_remover, build, checkpoint_bytes, read_checkpoint

from primitive_cases import CASES, faulty_square

SEEDS = (0, 1, 2)


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def single_target_runs():
    """Single-target annotated unlearning at beta=5, lambda=5 (shared by criteria 4, 8 and 11)."""
    return {seed: X.annotated_experiment(seed, targets=(1,), beta=5.0, lam=5.0, iterations=20) for seed in SEEDS}


# ---------------------------------------------------------------------------
# 1-3: exact checks


def test_criterion_01_autodiff_soundness(verdict):
    start = time.perf_counter()
    worst, worst_case = 0.0, None
    for name, make in CASES.items():
        for seed in range(20):
            f, x = make(np.random.default_rng(seed))
            err = T.grad_check(f, x)
            if err > worst:
                worst, worst_case = err, f"{name}/seed{seed}"
    fault = T.grad_check(faulty_square, np.random.default_rng(0).uniform(0.5, 2.0, size=(3, 4)))
    seconds = time.perf_counter() - start
    ok = worst < 1e-4 and fault > 1e-4 and seconds < 60
    verdict(1, ok, f"max rel err {worst:.2e} ({worst_case}) over {len(CASES)} primitives x 20 seeds; fault err {fault:.3f}; {seconds:.1f}s")


def test_criterion_02_exact_identities(verdict):
    rng = np.random.default_rng(0)
    k1 = all(cls_loss(rng.normal(size=(3, 6, 4, 4)), FilterPartition([1] * 6)).item() == -1.0 for _ in range(20))
    ident = Identifier(ClassifierSpec(input_shape=(1, 16, 16)), seed=0)
    sim_ok = True
    for seed in range(50):
        probe = np.random.default_rng(seed).uniform(size=(8, 1, 16, 16))
        S = similarity_matrix(filter_vectors(ident, ident.target_layer, probe))
        sim_ok &= bool(np.all(np.diag(S) == 2.0) and np.array_equal(S, S.T))
    bce = T.bce(np.array([0.5]), np.array([1.0])).item()
    E = build(RemoverSpec(input_shape=(1, 16, 16)), 0)
    for p in E.parameters():
        p.data[...] = 0.0
    E.mask_head.bias.data[...] = 100.0
    x = rng.uniform(size=(4, 1, 16, 16))
    l1 = float(np.abs(x - apply_remover(E, x).data).sum())
    ok = k1 and sim_ok and abs(bce - math.log(2)) <= 1e-12 and l1 == 0.0
    verdict(2, ok, f"K=1 loss -1: {k1}; S diag/symmetry on 50 probes: {sim_ok}; |bce-ln2|={abs(bce - math.log(2)):.1e}; mask=1 L1={l1}")


def _gap_scan(values, top=5):
    gaps = sorted(((values[k] - values[k - 1], k) for k in range(1, len(values))), key=lambda g: (-g[0], g[1]))[:top]
    return min(max(max(k for _, k in gaps), 2), len(values))


def test_criterion_03_eigengap_oracle(verdict):
    start = time.perf_counter()
    matches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(3, 33))
        X_ = rng.normal(size=(d, 50)) + rng.normal(size=(1, 50)) * rng.uniform(0, 2, size=(d, 1))
        S = similarity_matrix(X_)
        matches += eigengap_select_k(S) == _gap_scan(list(spectrum(S)[0]))

    labels = np.repeat([0, 1, 2], 2)
    S = np.where(labels[:, None] == labels[None, :], 1.8, 0.3)
    S = S + np.random.default_rng(7).uniform(0, 0.1, size=S.shape)
    S = (S + S.T) / 2
    np.fill_diagonal(S, 2.0)
    candidate = 3 in eigengap_candidates(spectrum(S)[0])
    part = spectral_partition(S, 3, seed=0).assignment

    def score(a):
        a = np.asarray(a)
        return sum(S[np.ix_(a == g, a == g)].sum() / S[a == g].sum() for g in set(a.tolist()))

    best = max((a for a in itertools.product(range(3), repeat=6) if len(set(a)) == 3), key=score)
    canon = lambda a: [{v: i + 1 for i, v in enumerate(dict.fromkeys(a))}[v] for v in a]  # noqa: E731
    exact = part == canon(list(best)) == canon(list(labels))
    seconds = time.perf_counter() - start
    ok = matches == 50 and candidate and exact and seconds < 60
    verdict(3, ok, f"oracle agreement {matches}/50; block candidate 3: {candidate}; exhaustive-search recovery: {exact}; {seconds:.1f}s")


# ---------------------------------------------------------------------------
# 4-6: annotated unlearning and baselines


def test_criterion_04_annotated_unlearning(verdict, single_target_runs):
    rows, ok = [], True
    for seed, r in single_target_runs.items():
        adv, task, pre = r["final_adv_acc"][0], r["final_task_acc"], r["pre_task_acc"]
        ok &= adv <= 0.60 and task >= pre - 0.05
        rows.append(f"s{seed}: adv {adv:.3f} task {task:.3f} (pre {pre:.3f}) {r['seconds']:.0f}s")
    verdict(4, ok, "; ".join(rows))


def test_criterion_05_two_targets(verdict):
    rows, ok = [], True
    for seed in SEEDS:
        r = X.annotated_experiment(seed, targets=(1, 2), beta=1.0, lam=10.0, iterations=50, saliency=False)
        advs, task, pre = r["final_adv_acc"], r["final_task_acc"], r["pre_task_acc"]
        ok &= max(advs) <= 0.60 and task >= pre - 0.05
        rows.append(f"s{seed}: adv {advs[0]:.3f}/{advs[1]:.3f} task {task:.3f} (pre {pre:.3f})")
    verdict(5, ok, "; ".join(rows))


def test_criterion_06_instance_level_baselines(verdict):
    rows, ok = [], True
    for seed in SEEDS:
        r = X.baseline_experiment(seed)
        majority_level = abs(r["retrain_acc"] - r["majority_rate"]) <= 0.05
        ok &= r["probe_after_finetune"] >= 0.90 and r["retrain_empty"] and r["retrain_steps"] == 0 and majority_level
        rows.append(
            f"s{seed}: probe after fine-tune {r['probe_after_finetune']:.3f}; retrain empty={r['retrain_empty']} "
            f"steps={r['retrain_steps']} acc {r['retrain_acc']:.3f} vs majority {r['majority_rate']:.3f}"
        )
    verdict(6, ok, "; ".join(rows))


# ---------------------------------------------------------------------------
# 7: unlearning without annotations


def test_criterion_07_blind_accuracy_variation(verdict):
    rows, ok = [], True
    for seed in SEEDS:
        r = X.blind_experiment(seed)
        irrelevant = r["glyphs"]["target"]["delta"]
        task = r["glyphs"]["task"]["delta"]
        ok &= abs(irrelevant) <= 0.05 and task <= -0.20
        rows.append(f"s{seed}: K={r['k']} irrelevant-glyph dacc {irrelevant:+.3f}, task-glyph dacc {task:+.3f}")
    verdict(7, ok, "; ".join(rows))


# ---------------------------------------------------------------------------
# 8: saliency


def test_criterion_08_saliency_evidence(verdict, single_target_runs):
    rows, ok = [], True
    for seed, r in single_target_runs.items():
        target_drop = X.relative_drop(r["target_share_before"], r["target_share_after"])
        off_change = abs(r["offtarget_share_after"] - r["offtarget_share_before"]) / r["offtarget_share_before"]
        ok &= target_drop >= 0.50 and off_change <= 0.20
        rows.append(f"s{seed}: target share {r['target_share_before']:.3f}->{r['target_share_after']:.3f} (drop {target_drop:.0%}), off-target change {off_change:.1%}")
    verdict(8, ok, "; ".join(rows))


# ---------------------------------------------------------------------------
# 9: fine-tuning versus retraining


def _secs(value):
    return "never" if value is None else f"{value:.3f}s"


def test_criterion_09_finetune_vs_retrain(verdict):
    r = X.class_unlearning_experiment(0)
    mia_ft = r["finetune_mia"][-1]
    inversion_drop = X.relative_drop(r["pre_inversion"], r["finetune_inversion"])
    faster = r["finetune_seconds"] is not None and r["retrain_seconds"] is not None and r["finetune_seconds"] < r["retrain_seconds"]
    ok = mia_ft <= 0.55 and abs(r["retrain_mia"] - 0.5) <= 0.05 and inversion_drop >= 0.50 and faster
    verdict(
        9,
        ok,
        f"MIA pre {r['pre_mia']:.3f}, fine-tune curve {[round(v, 3) for v in r['finetune_mia']]}, retrain {r['retrain_mia']:.3f}; "
        f"inversion contrast {r['pre_inversion']:.3f}->{r['finetune_inversion']:.3f} (drop {inversion_drop:.0%}); "
        f"fine-tune endpoint {_secs(r['finetune_seconds'])} vs retrain {_secs(r['retrain_seconds'])}",
    )


# ---------------------------------------------------------------------------
# 10: debiasing


def test_criterion_10_debiasing(verdict):
    rows, ok = [], True
    for seed in SEEDS:
        r = X.debias_experiment(seed)
        b, u, n = r["before"], r["unlearned"], r["naive"]
        eod_drop, dpd_drop = X.relative_drop(b["eod"], u["eod"]), X.relative_drop(b["dpd"], u["dpd"])
        naive_eod, naive_dpd = X.relative_drop(b["eod"], n["eod"]), X.relative_drop(b["dpd"], n["dpd"])
        ok &= eod_drop >= 0.5 and dpd_drop >= 0.5 and abs(u["aps"] - b["aps"]) <= 0.05 and naive_eod <= 0.10 and naive_dpd <= 0.10
        rows.append(
            f"s{seed}: EOD {b['eod']:.3f}->{u['eod']:.3f} DPD {b['dpd']:.3f}->{u['dpd']:.3f} APS {b['aps']:.3f}->{u['aps']:.3f}; "
            f"naive EOD {n['eod']:.3f} DPD {n['dpd']:.3f}"
        )
    verdict(10, ok, "; ".join(rows))


# ---------------------------------------------------------------------------
# 11: hyperparameter trends


def test_criterion_11_hyperparameter_trends(verdict, single_target_runs):
    iterations = 20

    def run(seed, beta, lam):
        if beta == 5.0 and lam == 5.0:
            return single_target_runs[seed]
        return X.annotated_experiment(seed, beta=beta, lam=lam, iterations=iterations, saliency=False)

    def reach(r):
        first = r["first_iteration_adv_le_060"]
        return iterations if first is None else first  # never reaching counts as the full budget

    lam_small = np.mean([reach(run(s, 5.0, 1.0)) for s in SEEDS])
    lam_large = np.mean([reach(run(s, 5.0, 10.0)) for s in SEEDS])
    beta_small = np.mean([run(s, 0.1, 5.0)["final_task_acc"] for s in SEEDS])
    beta_large = np.mean([single_target_runs[s]["final_task_acc"] for s in SEEDS])
    ok = lam_large <= lam_small and beta_small <= beta_large
    verdict(
        11,
        ok,
        f"iterations to adv<=0.60: lambda=10 {lam_large:.2f} vs lambda=1 {lam_small:.2f}; "
        f"final task acc: beta=0.1 {beta_small:.3f} vs beta=5 {beta_large:.3f}",
    )


# ---------------------------------------------------------------------------
# 12: reproducibility


PIPELINE = [
    ("gen-data", "gen", {"seed": 3, "train_fraction": 0.75, "dataset": {"n": 240, "task": "task", "image_size": [1, 16, 16], "features": [
        {"name": "task", "glyph": {"shape": "square", "row": 0, "col": 0, "size": 4}},
        {"name": "target", "glyph": {"shape": "cross", "row": 3, "col": 3, "size": 4}}]}}),
    ("train", "train", {"data": "gen/train", "model": {"input_shape": [1, 16, 16]}, "epochs": 2}),
    ("unlearn-annotated", "ul", {"preset": "single-target", "iterations": 4, "data": "gen/train", "holdout": "gen/test",
                                 "model": "train/model.ckpt", "remover": {"input_shape": [1, 16, 16]}}),
    ("identify", "ident", {"preset": "grouping", "t1": 1, "t2": 1, "data": "gen/train", "model": {"input_shape": [1, 16, 16]}}),
    ("unlearn-blind", "blind", {"preset": "glyph-group", "epochs": 1, "data": "gen/train", "holdout": "gen/test",
                                "model": "train/model.ckpt", "identifier": "ident/identifier.ckpt"}),
    ("evaluate", "eval", {"data": "gen/test", "train_data": "gen/train", "model": "ul/model.ckpt", "remover": "ul/remover.ckpt",
                          "metrics": ["accuracy", "saliency", "fairness", "inversion", "probe", "mia"], "region_feature": "target",
                          "group_feature": "target", "probe_feature": "target", "mia_shadows": 2, "mia_shadow_epochs": 1,
                          "inversion_steps": 5}),
    ("visualize", "vis", {"data": "gen/test", "model": "train/model.ckpt", "remover": "ul/remover.ckpt",
                          "identifier": "ident/identifier.ckpt", "instances": [0, 1], "scale": 2}),
]


def _run_pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    digests = {}
    for command, name, cfg in PIPELINE:
        path = root / f"{name}.json"
        path.write_text(json.dumps(cfg))
        assert main([command, "--config", str(path), "--out", str(root / name)]) == 0, command
        for p in sorted((root / name).rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                digests[str(p.relative_to(root))] = p.read_bytes()
    return digests


def _trace_rows(path: Path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def test_criterion_12_reproducibility(verdict, tmp_path):
    first = _run_pipeline(tmp_path / "a")
    second = _run_pipeline(tmp_path / "b")
    identical = first.keys() == second.keys() and all(first[k] == second[k] for k in first)

    round_trips = True
    for rel in ("a/train/model.ckpt", "a/ul/remover.ckpt", "a/ident/identifier.ckpt"):
        raw = (tmp_path / rel).read_bytes()
        model, extra = read_checkpoint(raw)
        round_trips &= checkpoint_bytes(model, extra) == raw

    # staged run: stop after one iteration, then resume in a fresh process call
    staged = tmp_path / "a"
    _, name, cfg = PIPELINE[2]
    (staged / "ul_stop.json").write_text(json.dumps(dict(cfg, stop_after=1)))
    (staged / "ul_rest.json").write_text(json.dumps(cfg))
    assert main(["unlearn-annotated", "--config", str(staged / "ul_stop.json"), "--out", str(staged / "resumed")]) == 0
    assert main(["unlearn-annotated", "--config", str(staged / "ul_rest.json"), "--out", str(staged / "resumed")]) == 0
    header, full = _trace_rows(staged / "ul" / "trace.csv")
    header2, resumed = _trace_rows(staged / "resumed" / "trace.csv")
    worst = 0.0
    for row_a, row_b in zip(full, resumed):
        for key, a, b in zip(header, row_a, row_b):
            if key == "phase":
                worst = max(worst, 0.0 if a == b else math.inf)
            elif a != b:
                fa, fb = float(a), float(b)
                if not (math.isnan(fa) and math.isnan(fb)):
                    worst = max(worst, abs(fa - fb))
    resume_ok = header == header2 and len(full) == len(resumed) and worst <= 1e-12

    ok = identical and round_trips and resume_ok
    verdict(
        12,
        ok,
        f"{len(first)} outputs across 7 commands byte-identical on rerun: {identical}; checkpoint round-trip bitwise: {round_trips}; "
        f"resume max trace diff {worst:.1e} over {len(full)} rows",
    )
