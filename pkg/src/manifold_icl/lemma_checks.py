"""Randomized checks of the three building blocks against their closed-form behaviour.

Each check draws ``trials`` random configurations, runs the gadget through the
forward engine and compares with the intended output.  Off-target outputs must
be exactly zero (or exactly unchanged); on-target values of the interaction
head are compared with a relative tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .construction import (
    GateSide,
    InteractionRequest,
    build_decrement_ffn,
    build_gating_ffn,
    build_interaction_head,
)
from .transformer_core import STATIC_ROWS, attention_apply, static_rows

INTERACTION_RTOL = 1e-12
FAULTS = ("gating-off-by-one",)


@dataclass
class LemmaResult:
    name: str
    trials: int
    failures: int = 0
    messages: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def fail(self, msg: str, keep: int = 5):
        self.failures += 1
        if len(self.messages) < keep:
            self.messages.append(msg)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.trials - self.failures}/{self.trials} trials"


def _random_H(rng, d, ell, bound):
    H = np.empty((d, ell))
    H[: d - STATIC_ROWS] = rng.uniform(-bound, bound, size=(d - STATIC_ROWS, ell))
    H[d - STATIC_ROWS :] = static_rows(ell)
    return H


def _sparse_kernel(rng, rows, d, kappa):
    W = rng.uniform(-kappa, kappa, size=(rows, d))
    W[rng.random((rows, d)) < 0.5] = 0.0
    return W


def check_interaction_lemma(trials: int = 1000, seed: int = 0, safety_factor: float = 2.0) -> LemmaResult:
    rng = np.random.default_rng([seed, 11])
    res = LemmaResult("interaction", trials)
    for k in range(trials):
        d = int(rng.integers(5, 10))
        ell = int(rng.integers(1, 13))
        kappa = float(rng.uniform(0.25, 3.0))
        U = float(rng.uniform(0.25, 3.0))
        t1, t2 = (int(v) for v in rng.integers(1, ell + 1, size=2))
        vr = int(rng.integers(1, d + 1))
        Qd = _sparse_kernel(rng, d - STATIC_ROWS, d, kappa)
        Kd = _sparse_kernel(rng, d - STATIC_ROWS, d, kappa)
        req = InteractionRequest(t1, t2, vr, Qd, Kd, ell, U, kappa)
        head = build_interaction_head(req, safety_factor)
        H = _random_H(rng, d, ell, U)
        out = attention_apply(head, H)
        target = max(0.0, float((Qd @ H[:, t1 - 1]) @ (Kd @ H[:, t2 - 1])))
        others = np.delete(out, t1 - 1, axis=1)
        col = out[:, t1 - 1].copy()
        got = col[vr - 1]
        col[vr - 1] = 0.0
        scale = max(1.0, d * d * kappa * kappa * U * U)
        if np.any(others != 0.0) or np.any(col != 0.0):
            res.fail(f"trial {k}: nonzero output outside entry ({vr}, {t1})")
        elif abs(got - target) > INTERACTION_RTOL * scale:
            res.fail(f"trial {k}: value {got!r} != {target!r}")
    return res


def check_gating_lemma(trials: int = 1000, seed: int = 0, fault: str | None = None) -> LemmaResult:
    if fault not in (None, *FAULTS):
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    shift = 1 if fault == "gating-off-by-one" else 0
    rng = np.random.default_rng([seed, 12])
    res = LemmaResult("gating" if fault is None else f"gating[{fault}]", trials)
    for k in range(trials):
        d = int(rng.integers(5, 10))
        ell = int(rng.integers(2, 40))
        r1 = int(rng.integers(1, d - STATIC_ROWS + 1))
        r2 = int(rng.integers(r1, d - STATIC_ROWS + 1))
        side = GateSide.ZERO_RIGHT if rng.random() < 0.5 else GateSide.ZERO_LEFT
        # keep a nonempty gated side so an off-by-one split is observable
        split = int(rng.integers(1, ell)) if side is GateSide.ZERO_RIGHT else int(rng.integers(2, ell + 1))
        Hb = float(rng.uniform(0.5, 100.0))
        ffn = build_gating_ffn(r1, r2, split, side, Hb, ell, d, _split_shift=shift)
        H = _random_H(rng, d, ell, Hb)
        # guarantee nonzero gated entries at the split boundary
        H[r1 - 1 : r2, :] = np.where(H[r1 - 1 : r2, :] == 0.0, 1.0, H[r1 - 1 : r2, :])
        out = ffn.apply(H)
        exp = H.copy()
        gated = slice(split, ell) if side is GateSide.ZERO_RIGHT else slice(0, split - 1)
        exp[r1 - 1 : r2, gated] = 0.0
        if not np.array_equal(out, exp):
            bad = np.argwhere(out != exp)[0] + 1
            res.fail(f"trial {k}: mismatch at row {bad[0]}, column {bad[1]} (split {split}, {side.value})")
    return res


def check_decrement_lemma(trials: int = 1000, seed: int = 0) -> LemmaResult:
    rng = np.random.default_rng([seed, 13])
    res = LemmaResult("decrement", trials)
    for k in range(trials):
        d = int(rng.integers(5, 10))
        ell = int(rng.integers(1, 40))
        r1 = int(rng.integers(1, d - STATIC_ROWS + 1))
        r2 = int(rng.integers(r1, d - STATIC_ROWS + 1))
        k1 = int(rng.integers(0, ell + 1))
        k2 = int(rng.integers(k1 + 1, ell + 2))
        M = float(2.0 ** rng.integers(-4, 30))
        ffn = build_decrement_ffn(r1, r2, k1, k2, M, ell, d)
        H = _random_H(rng, d, ell, float(rng.uniform(0.5, 100.0)))
        out = ffn.apply(H)
        exp = H.copy()
        exp[r1 - 1 : r2, k1 : k2 - 1] -= M
        if not np.array_equal(out, exp):
            bad = np.argwhere(out != exp)[0] + 1
            res.fail(f"trial {k}: mismatch at row {bad[0]}, column {bad[1]} (window {k1}..{k2}, M={M})")
    return res


def run_all(trials: int = 1000, seed: int = 0, fault: str | None = None) -> list[LemmaResult]:
    return [
        check_interaction_lemma(trials, seed),
        check_gating_lemma(trials, seed, fault),
        check_decrement_lemma(trials, seed),
    ]
