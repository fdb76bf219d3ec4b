"""Acceptance checks, one printed PASS/FAIL line per criterion.

Lines look like ``ACCEPTANCE <PASS|FAIL> <criterion>: <details>`` and are
printed even when pytest captures output.  The training experiments are
marked ``slow``; deselect them with ``-m "not slow"``.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from weakseg.config import load_config
from weakseg.data import generate_dataset, split
from weakseg.meanfield import search_unnormalized_counterexample
from weakseg.model import TinyFcn, predict, train
from weakseg.pipeline import run_training
from weakseg.verify import COUNTEREXAMPLE_MIN, EQUIV_TOL, run_suite

LAMBDAS = [round(0.1 * i, 1) for i in range(11)]
DATA_SEED = 1
SCENES = 250  # 200 train + 50 validation
# desk-scale schedule for the paired experiments (library defaults: lr 0.01, 2000 steps)
DESK_TRAIN = {"lr": 0.03, "total_steps": 700, "seed": 0}


def _line(ok, name, details):
    return f"ACCEPTANCE {'PASS' if ok else 'FAIL'} {name}: {details}"


def _suite(name, budget, report, label):
    start = time.perf_counter()
    rows, _ = run_suite(name, seed=0)
    seconds = time.perf_counter() - start
    failed = [r for r in rows if r.status == "fail"]
    worst = {}
    for r in rows:
        key = r.case.split("/")[0]
        worst[key] = max(worst.get(key, -np.inf), r.value)
    ok = not failed and seconds < budget
    summary = ", ".join(f"{k} max={v:.3g}" for k, v in worst.items())
    report(_line(ok, label, f"{len(rows)} cases, {len(failed)} failed, {seconds:.1f}s (< {budget}s); {summary}"))
    return rows, failed, seconds


def test_meanfield_fixed_points(report):
    rows, failed, seconds = _suite("prop31", 60, report, "mean-field fixed points (residual < 1e-8, KL <= 1000 random Q)")
    assert sum(r.case.startswith("fixed_point/") for r in rows) >= 20
    assert not failed, failed[:3]
    assert seconds < 60


def test_gradients(report):
    rows, failed, seconds = _suite("gradients", 120, report, "gradients vs central differences (1e-6 loss / 1e-5 rel param)")
    for prefix in ("class/", "neighb_exponentiated", "neighb_weighted", "model/"):
        assert sum(r.case.startswith(prefix) for r in rows) >= 50, prefix
    assert not failed, failed[:3]
    assert seconds < 120


def test_prior_solver(report):
    rows, failed, seconds = _suite("prior", 30, report, "prior solver (optimal at grid 10001, hinge-minimal fallback, defaults 0.4/0.2)")
    assert not failed, failed[:3]
    assert seconds < 30


def test_filter_oracles(report):
    rows, failed, seconds = _suite("filter", 120, report, "filter oracles (fast rel L1 < 0.05, exact vs triple loop < 1e-10)")
    assert sum(r.case.startswith("fast_vs_exact") for r in rows) >= 20
    assert not failed, failed[:3]
    assert seconds < 120


def test_potential_form_equivalence(report):
    rows, _ = run_suite("equivalence", seed=0)
    normalized = [r for r in rows if r.case.startswith("normalized")]
    worst = max(r.value for r in normalized)
    counter = search_unnormalized_counterexample()
    ok_norm = worst < EQUIV_TOL
    ok_counter = counter.max_diff > COUNTEREXAMPLE_MIN
    report(
        _line(
            ok_norm and ok_counter,
            "potential-form equivalence",
            f"normalized max diff {worst:.2e} (< {EQUIV_TOL:g}); "
            f"best unnormalized counterexample {counter.max_diff:.2e} (needs > {COUNTEREXAMPLE_MIN:g}; "
            "the forms differ by a per-pixel constant, which the update cancels)",
        )
    )
    assert len(normalized) >= 20
    assert ok_norm


@pytest.mark.xfail(strict=True, reason="Potts and agreement forms differ by a per-pixel constant for any kernel")
def test_unnormalized_counterexample_exists():
    assert search_unnormalized_counterexample().max_diff > COUNTEREXAMPLE_MIN


# ---------------------------------------------------------------------------
# training experiments
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_data():
    cfg = load_config(overrides={"train": dict(DESK_TRAIN)})
    scenes = generate_dataset(SCENES, DATA_SEED, cfg.data)
    train_set, val_set = split(scenes, cfg.val_fraction)
    assert (len(train_set), len(val_set)) == (200, 50)
    return cfg, train_set, val_set


@pytest.mark.slow
def test_qualitative_reproduction(desk_data, report):
    cfg, train_set, val_set = desk_data
    start = time.perf_counter()
    base = run_training(cfg, train_set, val_set, lam=0.0)
    curves = {}
    for mode in ("exponentiated", "weighted"):
        # lambda = 0 switches the neighbourhood term off, so both curves share that run
        curves[mode] = [base.miou] + [run_training(cfg, train_set, val_set, lam=lam, mode=mode).miou for lam in LAMBDAS[1:]]
    minutes = (time.perf_counter() - start) / 60
    exp, wtd = np.array(curves["exponentiated"]), np.array(curves["weighted"])
    gain = exp[LAMBDAS.index(0.3)] - base.miou
    var_exp, var_wtd = float(np.var(exp)), float(np.var(wtd))
    ok = gain >= 0.05 and var_wtd < var_exp and minutes < 30
    report(
        _line(
            ok,
            "qualitative reproduction (lambda=0.3 exp >= lambda=0 + 5 pts; weighted variance < exponentiated)",
            f"mIoU lambda=0 {base.miou:.3f}, exp lambda=0.3 {exp[3]:.3f} (gain {100 * gain:+.1f} pts); "
            f"var exp {var_exp:.4g} vs weighted {var_wtd:.4g}; {minutes:.1f} min\n"
            f"    exponentiated: {np.round(exp, 3).tolist()}\n"
            f"    weighted:      {np.round(wtd, 3).tolist()}",
        )
    )
    assert gain >= 0.05
    assert var_wtd < var_exp
    assert minutes < 30


@pytest.mark.slow
def test_collapse_control(desk_data, report):
    cfg, train_set, val_set = desk_data
    steps = 200
    no_prior = replace(cfg.loss, lam=10.0, mode="exponentiated", use_prior=False)
    tcfg = replace(cfg.train, total_steps=steps)
    model = TinyFcn.init(cfg.data.num_classes, hidden=tcfg.hidden, seed=tcfg.seed)
    train(model, train_set, tcfg, no_prior, cfg.kernel, cfg.constraints)
    preds = np.concatenate([predict(model, s.image).ravel() for s in val_set])
    dominant = np.bincount(preds, minlength=cfg.data.num_classes).max() / preds.size

    with_prior = replace(cfg.loss, lam=10.0, mode="exponentiated", use_prior=True)
    model = TinyFcn.init(cfg.data.num_classes, hidden=tcfg.hidden, seed=tcfg.seed)
    log = train(model, train_set, tcfg, with_prior, cfg.kernel, cfg.constraints)
    violations = sum(r.constraint_violations for r in log.records)
    feasible = float(np.mean([r.feasible_fraction for r in log.records]))
    ok = dominant >= 0.99 and violations == 0
    report(
        _line(
            ok,
            "degenerate collapse control (no prior, lambda=10, 200 steps)",
            f"{100 * dominant:.2f}% of validation pixels on one label (>= 99%); "
            f"with prior: {violations} mass-floor violations at feasible steps, mean feasible fraction {feasible:.3f}",
        )
    )
    assert dominant >= 0.99
    assert violations == 0
