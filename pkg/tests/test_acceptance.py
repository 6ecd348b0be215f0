"""Acceptance criteria 1-8. Each test records one PASS/FAIL line, printed again in the terminal summary.

Criteria 6-8 train the default desk-scale pipeline twice (seed 0), so this
module dominates the suite's runtime.
"""

import itertools
import math
import time

import numpy as np
import pytest

import conftest
from gradcases import CASES, TOL, run_case
from test_decode import _exhaustive
from test_select import objective, random_pool
from test_vpt import _kl
from vptlab.config import parse_config
from vptlab.decode import TableModel, beam_search, diverse_beam_search, greedy, sample, stochastic_beam_search
from vptlab.experiment import run_experiment
from vptlab.numerics.tensor import precision
from vptlab.metrics import bleu4, distinct_n, meteor_lite, rouge_l, self_bleu, wilcoxon_signed_rank
from vptlab.select import SelectionConfig, brute_force_select, greedy_select


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def test_criterion_1_gradient_checks():
    t0 = time.perf_counter()
    worst = {name: run_case(name, seeds=20) for name in CASES}
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    ok = worst[name] < TOL and elapsed < 120
    record(1, ok, f"{len(worst)} cases x 20 seeds, worst {name} {worst[name]:.2e} (< {TOL:g}), {elapsed:.1f}s (< 120s)")


def test_criterion_2_kl_oracles():
    expected = 0.5 * (0.25 - 1 - 2 * math.log(0.5))
    with precision(np.float64):
        got = [_kl([0.3], [1.0], [0.3]), _kl([1.0], [1.0], [0.0]), _kl([0.0], [0.5], [0.0])]
    closed_ok = all(abs(g - e) < 1e-6 for g, e in zip(got, [0.0, 0.5, expected]))
    z = np.random.default_rng(0).normal(0.0, 0.5, size=100_000)
    mc = float(np.mean((-0.5 * (z / 0.5) ** 2 - math.log(0.5)) - (-0.5 * z**2)))
    ok = closed_ok and abs(mc - expected) < 1e-2
    record(2, ok, f"closed form {[round(g, 6) for g in got]}, Monte-Carlo {mc:.5f} vs {expected:.5f}")


def test_criterion_3_decoding_oracles():
    t0 = time.perf_counter()
    checks = {"beam=exhaustive": True, "dbs(0)=beam": True, "sbs(T->0)=beam": True, "sample(T->0)=greedy": True}
    for seed in range(5):
        model = TableModel.random(5, eos=1, seed=seed)
        best = _exhaustive(model, 4)[0]
        top = beam_search(model, [], 625, max_steps=4)[0]
        checks["beam=exhaustive"] &= top.tokens == best[1] and abs(top.total_logprob - best[0]) < 1e-9
        beams = beam_search(model, [], 4, max_steps=5)
        checks["dbs(0)=beam"] &= diverse_beam_search(model, [], 4, 1, 0.0, max_steps=5) == beams
        sbs = stochastic_beam_search(model, [], 4, 1e-6, np.random.default_rng(seed), max_steps=5)
        checks["sbs(T->0)=beam"] &= [c.tokens for c in sbs] == [c.tokens for c in beams]
        g = greedy(model, [], max_steps=5)
        checks["sample(T->0)=greedy"] &= all(c.tokens == g.tokens for c in sample(model, [], 1e-6, np.random.default_rng(seed), n=4, max_steps=5))
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 60
    record(3, ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()) + f"; {elapsed:.1f}s (< 60s)")


def test_criterion_4_selection_oracle():
    ratios, scale_ok = [], True
    for seed in range(200):
        pool = random_pool(seed)
        cfg = SelectionConfig(u=3, alpha=1.0, beta=(0.05, 0.2, 1.0)[seed % 3])
        res = greedy_select(pool, cfg)
        best = brute_force_select(pool, cfg).objective_value
        worst = min(objective(pool, s, cfg) for s in itertools.combinations(range(8), 3))
        ratios.append(1.0 if best - worst < 1e-12 else (res.objective_value - worst) / (best - worst))
        for c in (0.1, 7.0):
            scale_ok &= greedy_select(pool, SelectionConfig(3, c * cfg.alpha, c * cfg.beta)).chosen == res.chosen
    r = np.array(ratios)
    ok = r.min() >= 0.7 and scale_ok
    record(4, ok, f"200 instances N=8 U=3: min ratio {r.min():.3f}, mean {r.mean():.4f}, scaling invariant: {scale_ok}")


def test_criterion_5_metric_fixtures():
    t = str.split
    checks = [
        (bleu4(t("a b c d"), [t("a b c e")]), (1 / 8) ** 0.25),
        (rouge_l(t("a b c d"), [t("a c b d")]), 0.75),
        (meteor_lite(t("a b c"), [t("a b c")]), 1 - 0.5 / 27),
        (meteor_lite(t("a b"), [t("b a")]), 0.5),
        (distinct_n([t("a b"), t("a b")], 1), 0.5),
        (distinct_n([t("a b c"), t("b c d")], 2), 0.75),
        (self_bleu([t("a b c d"), t("a b c e"), t("a b c d")]), (2 + 4 * (1 / 8) ** 0.25) / 6),
        (self_bleu([t("a b c d"), t("e f g h")]), 0.0),
        (wilcoxon_signed_rank([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).p_value, 1 / 64),
    ]
    worst = max(abs(a - b) for a, b in checks)
    deltas = [0.3, -0.1, 0.7, 0.2, -0.4, 0.9, 0.05, 0.6]
    ranks = np.argsort(np.argsort(np.abs(deltas))) + 1
    observed = ranks[np.array(deltas) > 0].sum()
    exact = sum(ranks[np.array(s, bool)].sum() >= observed for s in itertools.product((0, 1), repeat=8)) / 256
    enum_err = abs(wilcoxon_signed_rank(deltas).p_value - exact)
    ok = worst < 1e-9 and enum_err < 1e-9
    record(5, ok, f"{len(checks)} fixtures, worst error {worst:.1e}; Wilcoxon vs 2^8 enumeration error {enum_err:.1e}")


# criteria 6-8: the desk-scale pipeline -------------------------------------------------------


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = []
    for tag in ("first", "second"):
        d = tmp_path_factory.mktemp(tag)
        out.append((d, run_experiment(parse_config("", [f"run.out_dir={d}"]))))
    return out


def test_criterion_6_desk_scale_trends(runs):
    out_dir, m = runs[0]
    cfg, means = m["config"], m["results"]["means"]["U10"]
    diag, stage = m["diagnostics"], m["stages"]
    n_train = stage["corpus"]["train"]
    acc = stage["train_backbone"]["valid_token_accuracy"]
    b = {k: means[k]["bleu"] for k in ("vpt", "beam", "sample")}
    sb = {k: means[k]["self_bleu"] for k in ("vpt", "beam")}
    parts = {
        f"train examples {n_train} >= 2000": n_train >= 2000,
        f"d_model {cfg['backbone']['d_model']} = 64": cfg["backbone"]["d_model"] == 64,
        f"token accuracy {acc:.4f} >= 0.9": acc >= 0.9,
        f"oracle BLEU vpt {b['vpt']:.4f} > beam {b['beam']:.4f}": b["vpt"] > b["beam"],
        f"oracle BLEU vpt {b['vpt']:.4f} > sampling {b['sample']:.4f}": b["vpt"] > b["sample"],
        f"Self-BLEU vpt {sb['vpt']:.4f} < beam {sb['beam']:.4f}": sb["vpt"] < sb["beam"],
        f"final KL {diag['final_kl']:.3f} > 0.1": diag["final_kl"] > 0.1,
        f"trainable ratio {diag['parameter_budget']['trainable_ratio']:.4f} < 0.2": diag["parameter_budget"]["trainable_ratio"] < 0.2,
        f"wall clock {m['wall_clock_seconds']:.0f}s < 1800s": m["wall_clock_seconds"] < 1800,
    }
    failed = [k for k, v in parts.items() if not v]
    detail = "; ".join(parts) + (f" || failed: {'; '.join(failed)}" if failed else "")
    record(6, not failed, detail)


def test_criterion_7_ablation_harness(runs):
    out_dir, m = runs[0]
    tests = m["results"]["ablations"]
    text = (out_dir / "results.txt").read_text()
    names = {t["b"] for t in tests}
    ok = "== ablations ==" in text and any("greedy_per_latent" in n for n in names) and any("first_unique" in n for n in names)
    ok &= all("p_value" in t and "significant_at" in t for t in tests)
    summary = ", ".join(f"{t['b']}: p={'n/a' if t['p_value'] is None else format(t['p_value'], '.3g')}" for t in tests)
    record(7, ok, f"ablation table emitted; {summary}")


def test_criterion_8_reproducibility(runs):
    (a, _), (b, _) = runs
    files = sorted(p.relative_to(a) for sub in ("candidates", "reports") for p in (a / sub).iterdir())
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    ok = len(files) > 0 and len(same) == len(files)
    record(8, ok, f"{len(same)}/{len(files)} candidate and report files byte-identical across two seed-0 runs")
