"""End-to-end acceptance suite.

Every test states one criterion, measures it at the stated tolerance and
records a PASS/FAIL line (collected in the ``acceptance criteria`` section of
the terminal summary). Runs use the shipped configs under ``configs/``.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from conftest import record_criterion
from fdcheck import CHECKS, N_CONFIGS
from mmgcd import pipeline as P
from mmgcd.config import PipelineConfig
from mmgcd.evaluation import hungarian_acc

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
EPS_SEEDS = (0, 1, 2)
COMPLEMENTARY_SEEDS = (0, 1, 2)


def chain(config, out):
    """split -> tes-train -> train -> eval -> estimate-k; returns reports and timings."""
    os.makedirs(out, exist_ok=True)
    reports, timings = {}, {}
    split, tes = os.path.join(out, P.SPLIT_FILE), os.path.join(out, P.TES_FILE)
    cache, dual = os.path.join(out, P.CACHE_FILE), os.path.join(out, P.DUAL_FILE)
    steps = [
        ("split", lambda: P.run_split(config, out)),
        ("tes-train", lambda: P.run_tes_train(config, out, split)),
        ("train", lambda: P.run_train(config, out, split, tes)),
        ("eval", lambda: P.run_eval(config, out, split, dual, tes, cache, True, True)),
        ("estimate-k", lambda: P.run_estimate_k(config, out, split, cache)),
    ]
    for name, fn in steps:
        t0 = time.perf_counter()
        reports[name] = fn()
        timings[name] = time.perf_counter() - t0
        P.write_report(reports[name], os.path.join(out, f"report_{name}.json"))
    return reports, timings, out


@pytest.fixture(scope="module")
def acceptance_config():
    return PipelineConfig.from_file(os.path.join(CONFIGS, "acceptance.cfg"))


@pytest.fixture(scope="module")
def standard(acceptance_config, tmp_path_factory):
    return chain(acceptance_config, str(tmp_path_factory.mktemp("standard")))


def test_c1_hungarian_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        K, n = int(rng.integers(1, 7)), int(rng.integers(1, 41))
        y, p = rng.integers(0, K, n), rng.integers(0, K, n)
        best = max(sum(int(perm[a] == b) for a, b in zip(p, y)) for perm in itertools.permutations(range(K)))
        mismatches += hungarian_acc(y, p, K)[0] != best / n
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    record_criterion(1, ok, f"200 cases, {mismatches} mismatches, {elapsed:.2f} s (< 10 s)")
    assert ok


def test_c2_gradient_suite():
    worst = {name: max(fn(s) for s in range(N_CONFIGS)) for name, fn in CHECKS.items()}
    ok = all(v <= 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion(2, ok, f"max rel err over {N_CONFIGS} configs each (<= 1e-4): {detail}")
    assert ok


def test_c3_stage_one(standard):
    reports, timings, _ = standard
    m = reports["tes-train"]["metrics"]
    ok = m["retrieval_top1"] >= 0.95 and m["labeled_cosine"] >= 0.9 and timings["tes-train"] <= 120
    record_criterion(3, ok, f"retrieval top-1 {m['retrieval_top1']:.4f} (>= 0.95), labeled cosine "
                            f"{m['labeled_cosine']:.4f} (>= 0.9), {timings['tes-train']:.1f} s (<= 120 s)")
    assert ok


def test_c4_stage_two(standard):
    reports, timings, _ = standard
    acc = reports["train"]["acc"]
    ok = acc["acc_all"] >= 0.90 and acc["acc_old"] >= 0.95 and timings["train"] <= 300
    record_criterion(4, ok, f"All {acc['acc_all']:.4f} (>= 0.90), Old {acc['acc_old']:.4f} (>= 0.95), "
                            f"New {acc['acc_new']:.4f}, {timings['train']:.1f} s (<= 300 s)")
    assert ok


def test_c5_complementarity(tmp_path_factory):
    cfg = PipelineConfig.from_file(os.path.join(CONFIGS, "complementary.cfg"))
    gains, parts = [], []
    for seed in COMPLEMENTARY_SEEDS:
        run = cfg.replace(**{"seed": seed, "data.seed": seed, "split.seed": seed})
        out = str(tmp_path_factory.mktemp(f"complementary{seed}"))
        split, tes, cache = (os.path.join(out, f) for f in (P.SPLIT_FILE, P.TES_FILE, P.CACHE_FILE))
        P.run_split(run, out)
        P.run_tes_train(run, out, split)
        rep = P.run_eval(run, out, split, None, tes, cache, ss_kmeans_baseline=True, concat_tes=True)
        vis, cat = rep["ss_kmeans_visual"]["acc_all"], rep["ss_kmeans_concat_tes"]["acc_all"]
        gains.append(cat - vis)
        parts.append(f"seed {seed}: visual {vis:.3f} concat {cat:.3f}")
    mean_gain = float(np.mean(gains))
    ok = mean_gain >= 0.10
    record_criterion(5, ok, f"mean All-ACC gain {100 * mean_gain:.1f} points (>= 10); " + "; ".join(parts))
    assert ok


def test_c6_mean_entropy(standard, acceptance_config, tmp_path_factory):
    src = standard[2]
    split, tes = os.path.join(src, P.SPLIT_FILE), os.path.join(src, P.TES_FILE)
    base = tmp_path_factory.mktemp("entropy")
    h = {0.0: [], 1.0: []}
    for seed in EPS_SEEDS:
        for eps in h:
            cfg = acceptance_config.replace(**{"seed": seed, "train.epsilon": eps})
            out = str(base / f"s{seed}_e{eps}")
            os.makedirs(out)
            h[eps].append(P.run_train(cfg, out, split, tes)["final_h_mm"])
    m0, m1 = float(np.mean(h[0.0])), float(np.mean(h[1.0]))
    ok = m1 > m0
    record_criterion(6, ok, f"mean final H_mm eps=1 {m1:.4f} > eps=0 {m0:.4f} over seeds {EPS_SEEDS} "
                            f"(eps=0 {[round(v, 3) for v in h[0.0]]}, eps=1 {[round(v, 3) for v in h[1.0]]})")
    assert ok


def test_c7_cico_convergence(standard):
    reports, _, _ = standard
    probe = reports["train"]["probe_cico"]
    ok = reports["train"]["config"]["train.lambda_cico"] == 1.0 and probe["final"] < probe["initial"]
    record_criterion(7, ok, f"probe CICO final {probe['final']:.4g} < initial {probe['initial']:.4g} "
                            f"(lambda_c = {reports['train']['config']['train.lambda_cico']})")
    assert ok


def test_c8_class_number(standard):
    reports, _, _ = standard
    rep = reports["estimate-k"]
    vis, cat = rep["visual"], rep["concat"]
    ok = rep["k_range"] == [4, 16] and cat["k_hat"] == 8 and cat["error"] <= vis["error"]
    record_criterion(8, ok, f"k_range 4..16: concat k_hat {cat['k_hat']} (= 8, error {cat['error']}), "
                            f"visual k_hat {vis['k_hat']} (error {vis['error']})")
    assert ok


def _numeric_diff(a, b, path=""):
    """Largest absolute difference over numeric leaves; inf on structural mismatch."""
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            return math.inf
        return max([_numeric_diff(a[k], b[k], f"{path}.{k}") for k in a] or [0.0])
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return math.inf
        return max([_numeric_diff(x, y, path) for x, y in zip(a, b)] or [0.0])
    if isinstance(a, bool) or isinstance(b, bool) or not isinstance(a, (int, float)) \
            or not isinstance(b, (int, float)):
        return 0.0 if a == b else math.inf
    return abs(a - b)


def test_c9_determinism(standard, acceptance_config, tmp_path_factory):
    first = standard[2]
    second = str(tmp_path_factory.mktemp("standard_repeat"))
    chain(acceptance_config, second)
    worst = 0.0
    for name in ("split", "tes-train", "train", "eval", "estimate-k"):
        a = P.read_report(os.path.join(first, f"report_{name}.json"))
        b = P.read_report(os.path.join(second, f"report_{name}.json"))
        a.pop("timing"), b.pop("timing")  # wall-clock is not a metric
        worst = max(worst, _numeric_diff(a, b))
    ok = worst <= 1e-9
    record_criterion(9, ok, f"five reports rerun, max numeric difference {worst:.3g} (<= 1e-9)")
    assert ok
