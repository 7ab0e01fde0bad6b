"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from manifold_icl.construction import build_kernel_transformer, certify_spec
from manifold_icl.experiments import (
    default_config,
    run_ambient_experiment,
    run_bias_experiment,
    run_rate_experiment,
    run_variance_experiment,
)
from manifold_icl.kernel_estimator import bandwidth_for, nw_estimate
from manifold_icl.lemma_checks import run_all
from manifold_icl.manifold_data import Manifold, generate_task, make_embedding, make_holder_function
from manifold_icl.transformer_core import forward_batch, spec_to_json

# (manifold, n, D, prompts): 1008 prompts covering n in 4..2048 and D in 5..100
AC1_CASES = [
    ("circle", 4, 5, 200),
    ("torus", 8, 100, 200),
    ("sphere", 16, 100, 100),
    ("sphere", 32, 50, 100),
    ("torus", 64, 30, 100),
    ("circle", 64, 100, 64),
    ("circle", 256, 10, 100),
    ("sphere", 256, 30, 64),
    ("torus", 128, 100, 32),
    ("torus", 1024, 10, 16),
    ("sphere", 2048, 5, 16),
    ("circle", 2048, 5, 16),
]


def _report(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")


def _prompts(kind, n, D, count, seed):
    m = Manifold.from_name(kind)
    e = make_embedding(m.base_ambient_dim, D, [seed, D])
    return m, [
        generate_task(m, e, make_holder_function(m, 1.0, 1.0, 1.0, 16, [seed, k]), n, [seed, k, 1])
        for k in range(count)
    ]


def test_ac1_exact_implementation(capsys):
    t0 = time.perf_counter()
    worst, total, certs = 0.0, 0, []
    for c, (kind, n, D, count) in enumerate(AC1_CASES):
        m = Manifold.from_name(kind)
        h = bandwidth_for(n, 1.0, m.intrinsic_dim).h
        spec = build_kernel_transformer(n, D, h, m.coord_bound, 1.0)
        certs += certify_spec(spec)
        _, ps = _prompts(kind, n, D, count, 100 + c)
        tv = forward_batch(spec, ps)
        ov = np.array([nw_estimate(p, h) for p in ps])
        worst = max(worst, float(np.max(np.abs(tv - ov) / np.maximum(1.0, np.abs(ov)))))
        total += count
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and total >= 1000 and dt <= 300 and not certs
    _report(capsys, "AC1 exact implementation", ok, f"{total} prompts, max rel diff {worst:.2e}, {dt:.0f}s (limit 300s)")
    assert total >= 1000
    assert not certs, certs
    assert worst <= 1e-9
    assert dt <= 300


def test_ac2_lemma_suites(capsys):
    t0 = time.perf_counter()
    results = run_all(trials=1000, seed=0)
    dt = time.perf_counter() - t0
    ok = all(r.passed for r in results) and dt <= 60
    _report(capsys, "AC2 lemma suites", ok, ", ".join(r.line() for r in results) + f", {dt:.0f}s (limit 60s)")
    assert all(r.passed for r in results), [r.messages for r in results]
    assert dt <= 60


def test_ac3_rate_slope(capsys):
    t0 = time.perf_counter()
    circ = run_rate_experiment(default_config("rate", manifold="circle"))
    sph = run_rate_experiment(default_config("rate", manifold="sphere"))
    dt = time.perf_counter() - t0
    c_ok = -0.82 <= circ.fit.slope <= -0.52
    s_ok = -0.65 <= sph.fit.slope <= -0.35
    _report(
        capsys,
        "AC3 rate slope",
        c_ok and s_ok and dt <= 900,
        f"circle {circ.fit.slope:.3f} in [-0.82, -0.52], sphere {sph.fit.slope:.3f} in [-0.65, -0.35], {dt:.0f}s (limit 900s)",
    )
    assert len(circ.rows) == 8 and circ.rows[0]["value"] == 16 and circ.rows[-1]["value"] == 2048
    assert c_ok and s_ok
    assert dt <= 900


def test_ac4_bias_slope(capsys):
    t0 = time.perf_counter()
    fits = {}
    for alpha in (0.5, 1.0):
        rep = run_bias_experiment(default_config("bias", alpha=alpha))
        assert rep.config.mc_samples == 10**5 and rep.config.h_grid == (0.05, 0.1, 0.2, 0.4)
        fits[alpha] = rep.fit.slope
    dt = time.perf_counter() - t0
    ok = all(abs(s - a) <= 0.25 for a, s in fits.items()) and dt <= 600
    detail = ", ".join(f"alpha={a}: {s:.3f}" for a, s in fits.items())
    _report(capsys, "AC4 bias slope", ok, f"{detail} (band alpha +/- 0.25), {dt:.0f}s (limit 600s)")
    for a, s in fits.items():
        assert abs(s - a) <= 0.25
    assert dt <= 600


def test_ac5_variance_slope(capsys):
    t0 = time.perf_counter()
    rep = run_variance_experiment(default_config("variance"))
    dt = time.perf_counter() - t0
    s = rep.fit.slope
    ok = abs(s + 0.5) <= 0.1 and dt <= 600
    _report(capsys, "AC5 variance slope", ok, f"slope {s:.3f} in [-0.6, -0.4], {dt:.0f}s (limit 600s)")
    assert rep.config.fixed_h == 0.2 and rep.rows[0]["value"] == 32 and rep.rows[-1]["value"] == 4096
    assert abs(s + 0.5) <= 0.1
    assert dt <= 600


def test_ac6_ambient_independence(capsys):
    t0 = time.perf_counter()
    rep = run_ambient_experiment(default_config("ambient"))
    dt = time.perf_counter() - t0
    s = rep.summary
    ok = s["mse_ratio"] <= 1.2 and s["frame_diff"] <= 1e-10 and dt <= 300
    _report(
        capsys,
        "AC6 ambient independence",
        ok,
        f"MSE max/min {s['mse_ratio']:.4f} (<= 1.2), frame diff {s['frame_diff']:.1e} (<= 1e-10), {dt:.0f}s",
    )
    assert [r["value"] for r in rep.rows] == [3, 10, 30, 100] and rep.config.fixed_n == 256
    assert s["mse_ratio"] <= 1.2
    assert s["frame_diff"] <= 1e-10
    assert dt <= 300


@pytest.mark.parametrize("kind,n,D", [("circle", 16, 10), ("torus", 32, 20)])
def test_ac7_universality(capsys, kind, n, D):
    m = Manifold.from_name(kind)
    h = bandwidth_for(n, 1.0, m.intrinsic_dim).h
    a = build_kernel_transformer(n, D, h, m.coord_bound, 1.0)
    b = build_kernel_transformer(n, D, h, m.coord_bound, 1.0)
    same = spec_to_json(a) == spec_to_json(b)
    # prompts drawn only after both builds, from several unrelated tasks
    _, ps = _prompts(kind, n, D, 64, 700)
    tv = forward_batch(a, ps)
    ov = np.array([nw_estimate(p, h) for p in ps])
    worst = float(np.max(np.abs(tv - ov) / np.maximum(1.0, np.abs(ov))))
    _report(capsys, f"AC7 universality ({kind})", same and worst <= 1e-9, f"bit-identical specs {same}, 64 later prompts max rel diff {worst:.2e}")
    assert same
    assert worst <= 1e-9
