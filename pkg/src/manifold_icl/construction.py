"""Closed-form weights for the exact kernel-regression transformer.

Three gadgets are provided: an interaction attention head that lets exactly
one token pair (t1, t2) interact, a gating FFN that zeroes a row range on one
side of a column split, and a decrementing FFN that subtracts a constant from a
row range on a column window.  :func:`build_kernel_transformer` assembles
five blocks from them whose output equals the Gaussian Nadaraya-Watson
estimate.

All row/column arguments are 1-based.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .kernel_estimator import nw_estimate
from .manifold_data import Prompt
from .transformer_core import (
    STATIC_ROWS,
    Activation,
    AttentionHead,
    Block,
    FFNStack,
    ForwardTrace,
    TransformerSpec,
    embed_prompt,
    forward_batch,
    positional_table,
    run_blocks,
)

OVERFLOW_LIMIT = 1e300
DEFAULT_SAFETY = 2.0


class ConstructionError(ValueError):
    """A constant overflowed or a gadget request is invalid."""


def _csr(entries, shape) -> sparse.csr_matrix:
    """Canonical CSR matrix from {(row0, col0): value} (0-based keys)."""
    if entries:
        keys = sorted(k for k, v in entries.items() if v != 0)
        r = np.fromiter((k[0] for k in keys), dtype=np.int32, count=len(keys))
        c = np.fromiter((k[1] for k in keys), dtype=np.int32, count=len(keys))
        v = np.fromiter((entries[k] for k in keys), dtype=float, count=len(keys))
    else:
        r = c = np.zeros(0, dtype=np.int32)
        v = np.zeros(0)
    indptr = np.zeros(shape[0] + 1, dtype=np.int32)
    np.add.at(indptr, r + 1, 1)
    np.cumsum(indptr, out=indptr)
    m = sparse.csr_matrix((v, c, indptr), shape=shape)
    m.has_canonical_format = True
    return m


def _entries(m) -> dict:
    if sparse.issparse(m):
        coo = m.tocoo()
        return {(int(r), int(c)): float(v) for r, c, v in zip(coo.row, coo.col, coo.data) if v != 0}
    a = np.asarray(m, dtype=float)
    rr, cc = np.nonzero(a)
    return {(int(r), int(c)): float(a[r, c]) for r, c in zip(rr, cc)}


# ---------------------------------------------------------------------------
# interaction head


@dataclass(frozen=True, eq=False)
class InteractionRequest:
    t1: int
    t2: int
    value_row: int
    Q_data: object
    K_data: object
    ell: int
    U: float
    kappa_data: float

    def __post_init__(self):
        qd = _entries(self.Q_data)
        kd = _entries(self.K_data)
        shape = np.shape(self.Q_data) if not sparse.issparse(self.Q_data) else self.Q_data.shape
        kshape = np.shape(self.K_data) if not sparse.issparse(self.K_data) else self.K_data.shape
        d = shape[1]
        if d < 5 or shape != (d - STATIC_ROWS, d) or kshape != shape:
            raise ConstructionError(f"data kernels must be (d-3) x d with d >= 5, got {shape} and {kshape}")
        if not (1 <= self.t1 <= self.ell and 1 <= self.t2 <= self.ell):
            raise ConstructionError(f"token pair {(self.t1, self.t2)} outside 1..{self.ell}")
        if not 1 <= self.value_row <= d:
            raise ConstructionError(f"value row {self.value_row} outside 1..{d}")
        if not (self.U > 0 and self.kappa_data > 0):
            raise ConstructionError("U and kappa_data must be positive")
        big = max((abs(v) for v in (*qd.values(), *kd.values())), default=0.0)
        if big > self.kappa_data:
            raise ConstructionError(f"data kernel entry {big} exceeds kappa_data {self.kappa_data}")
        object.__setattr__(self, "_qd", qd)
        object.__setattr__(self, "_kd", kd)

    @property
    def d_embed(self) -> int:
        return (np.shape(self.Q_data) if not sparse.issparse(self.Q_data) else self.Q_data.shape)[1]


def _one_minus_cos(gap_steps: np.ndarray, ell: int) -> np.ndarray:
    half = gap_steps * np.pi / (4.0 * ell)
    return 2.0 * np.sin(half) ** 2


def interaction_bound(d_embed: int, kappa_data: float, U: float, ell: int, t1: int, t2: int) -> float:
    """Proof lower bound on the dilation constant (no safety factor)."""
    try:
        num = float(d_embed) ** 4 * float(kappa_data) ** 2 * float(U) ** 2
    except OverflowError:
        return math.inf
    k = np.arange(1, ell + 1)
    # competitor keys k != t2: 1 - |<I_k, I_t2>|, the angle gap never exceeds pi/2
    den2 = _one_minus_cos(np.abs(k[k != t2] - t2).astype(float), ell)
    # competitor queries t != t1: 1 - cos(angle(Q^I I_t, I_t2)) = 1 - cos(phi_t - phi_t1)
    den3 = _one_minus_cos(np.abs(k[k != t1] - t1).astype(float), ell)
    dens = np.concatenate([den2, den3])
    den = float(dens.min()) if dens.size else 1.0
    return num / den


def interaction_constant(req: InteractionRequest, safety_factor: float = DEFAULT_SAFETY) -> float:
    c = safety_factor * interaction_bound(req.d_embed, req.kappa_data, req.U, req.ell, req.t1, req.t2)
    if not (math.isfinite(c) and c <= OVERFLOW_LIMIT):
        raise ConstructionError(f"interaction constant {c} overflows; use a larger bandwidth h")
    return c


def _interaction_key(kd: dict, d: int, ell: int, t2: int) -> sparse.csr_matrix:
    c, s = positional_table(ell)[:, t2 - 1]
    e = dict(kd)
    a, b, o = d - 3, d - 2, d - 1
    e[(a, a)] = c * c
    e[(a, b)] = c * s
    e[(b, a)] = s * c
    e[(b, b)] = s * s
    e[(o, o)] = -1.0
    return _csr(e, (d, d))


def _interaction_query(qd: dict, d: int, ell: int, t1: int, t2: int, C: float) -> sparse.csr_matrix:
    tab = positional_table(ell)
    c1, s1 = float(tab[0, t1 - 1]), float(tab[1, t1 - 1])
    c2, s2 = float(tab[0, t2 - 1]), float(tab[1, t2 - 1])
    delta = math.atan2(s2, c2) - math.atan2(s1, c1)
    cd, sd = math.cos(delta), math.sin(delta)
    a, b, o = d - 3, d - 2, d - 1
    e = dict(qd)
    e[(a, a)] = C * cd
    e[(a, b)] = -C * sd
    e[(b, a)] = C * sd
    e[(b, b)] = C * cd
    # Calibrate the ones-row entry so that the static score at (t1, t2) is exactly
    # zero under the engine's order of operations: each projected row is summed
    # left to right over its sorted columns, then (q_a k_a + q_b k_b) + q_o k_o.
    qa = e[(a, a)] * c1 + e[(a, b)] * s1
    qb = e[(b, a)] * c1 + e[(b, b)] * s1
    ka = (c2 * c2) * c2 + (c2 * s2) * s2
    kb = (s2 * c2) * c2 + (s2 * s2) * s2
    e[(o, o)] = qa * ka + qb * kb
    return _csr(e, (d, d))


def _interaction_head(
    qd, kd, d, ell, t1, t2, value_row, C, K=None, V=None, tag=None
) -> AttentionHead:
    if K is None:
        K = _interaction_key(kd, d, ell, t2)
    if V is None:
        V = _csr({(value_row - 1, d - 1): 1.0}, (d, d))
    Q = _interaction_query(qd, d, ell, t1, t2, C)
    t = {"lemma": "interaction", "expect": (t1, t2)}
    if tag:
        t.update(tag)
    return AttentionHead(Q, K, V, Activation.RELU, tag=t)


def build_interaction_head(req: InteractionRequest, safety_factor: float = DEFAULT_SAFETY) -> AttentionHead:
    """Head whose output is ReLU(<Q_data h_t1, K_data h_t2>) e_i in column t1 and 0 elsewhere.

    The dilation sits in the query's ones-row entry (key entry -1) rather than
    the other way round; the product is the same and keys can then be shared
    by all heads with the same (K_data, t2).
    """
    C = interaction_constant(req, safety_factor)
    return _interaction_head(req._qd, req._kd, req.d_embed, req.ell, req.t1, req.t2, req.value_row, C)


def head_dilation(head: AttentionHead) -> float:
    """Dilation constant of an interaction head, read off its positional rotation block."""
    d = head.d_embed
    return math.hypot(float(head.Q[d - 3, d - 3]), float(head.Q[d - 2, d - 3]))


# ---------------------------------------------------------------------------
# gating and decrementing FFNs


class GateSide(enum.Enum):
    ZERO_RIGHT = "zero_right"  # keep columns 1..split
    ZERO_LEFT = "zero_left"  # keep columns split..ell


def _sin_gate(phi_star: float, sign: float, C: float, cos_col: int, sin_col: int) -> dict:
    # C * sin(sign * (phi_star - phi_t)) as a linear form in (cos phi_t, sin phi_t)
    return {cos_col: sign * C * math.sin(phi_star), sin_col: -sign * C * math.cos(phi_star)}


def build_gating_ffn(
    r1: int,
    r2: int,
    split: int,
    side: GateSide,
    H_bound: float,
    ell: int,
    d_embed: int,
    _split_shift: int = 0,
) -> FFNStack:
    """Residual FFN that zeroes rows r1..r2 on the gated side and is the identity elsewhere.

    ``H_bound`` must bound |h_r| for the gated rows.  Three layers with hidden
    width 2k+1 (k = r2-r1+1): positive and negative parts of each row plus a
    gate unit that is exactly 0 on gated columns and at least 2*H_bound on
    protected ones.  ``_split_shift`` is a fault-injection hook for tests.
    """
    side = GateSide(side)
    d = d_embed
    if not 1 <= r1 <= r2 <= d - STATIC_ROWS:
        raise ConstructionError(f"row range {r1}..{r2} must lie in 1..{d - STATIC_ROWS}")
    if not 1 <= split <= ell:
        raise ConstructionError(f"no separating direction: split {split} outside 1..{ell}")
    if not H_bound > 0:
        raise ConstructionError("H_bound must be positive")
    split = split + _split_shift
    k = r2 - r1 + 1
    C = 2.0 * H_bound / math.sin(math.pi / (4.0 * ell))
    if side is GateSide.ZERO_RIGHT:
        gate = _sin_gate((split + 0.5) * math.pi / (2 * ell), 1.0, C, d - 3, d - 2)
    else:
        gate = _sin_gate((split - 0.5) * math.pi / (2 * ell), -1.0, C, d - 3, d - 2)
    g = 2 * k
    W1, W2, W3 = {}, {}, {}
    for j in range(k):
        row = r1 - 1 + j
        W1[(j, row)] = 1.0
        W1[(k + j, row)] = -1.0
        # a_j = u+ - u- - g ; b_j = u- - u+ - g
        W2[(j, j)] = 1.0
        W2[(j, k + j)] = -1.0
        W2[(j, g)] = -1.0
        W2[(k + j, k + j)] = 1.0
        W2[(k + j, j)] = -1.0
        W2[(k + j, g)] = -1.0
        W3[(row, j)] = -1.0
        W3[(row, k + j)] = 1.0
    for col, v in gate.items():
        W1[(g, col)] = v
    layers = (
        (_csr(W1, (g + 1, d)), np.zeros(g + 1)),
        (_csr(W2, (g, g + 1)), np.zeros(g)),
        (_csr(W3, (d, g)), np.zeros(d)),
    )
    return FFNStack(layers, residual=True)


def build_decrement_ffn(r1: int, r2: int, k1: int, k2: int, M: float, ell: int, d_embed: int) -> FFNStack:
    """Six-layer residual FFN subtracting M from rows r1..r2 on columns k1+1..k2-1.

    ``k1 = 0`` or ``k2 = ell + 1`` leave that side of the window open.
    """
    d = d_embed
    if not 1 <= r1 <= r2 <= d - STATIC_ROWS:
        raise ConstructionError(f"row range {r1}..{r2} must lie in 1..{d - STATIC_ROWS}")
    if not 0 <= k1 < k2 <= ell + 1:
        raise ConstructionError(f"invalid window ({k1}, {k2}) for ell={ell}")
    if not (M >= 0 and math.isfinite(M)):
        raise ConstructionError("M must be finite and nonnegative")
    rows = list(range(r1 - 1, r2))
    cs, sn, p = d - 3, d - 2, d - 1
    C = 2.0 * M / math.sin(math.pi / (4.0 * ell)) if M > 0 else 1.0
    if not C <= OVERFLOW_LIMIT:
        raise ConstructionError("decrement constant overflows")
    keep_pos = {(cs, cs): 1.0, (sn, sn): 1.0}

    def carry(extra=None):
        e = dict(keep_pos)
        for r in rows:
            e[(r, r)] = 1.0
        if extra:
            e.update(extra)
        return e

    b1 = np.zeros(d)
    b1[rows] = M
    L1 = (_csr(dict(keep_pos), (d, d)), b1)
    right = _sin_gate((k2 - 0.5) * math.pi / (2 * ell), -1.0, C, cs, sn)
    L2 = (_csr(carry({(p, c): v for c, v in right.items()}), (d, d)), np.zeros(d))
    L3 = (_csr(carry({(r, p): -1.0 for r in rows}), (d, d)), np.zeros(d))
    left = _sin_gate((k1 + 0.5) * math.pi / (2 * ell), 1.0, C, cs, sn)
    L4 = (_csr(carry({(p, c): v for c, v in left.items()}), (d, d)), np.zeros(d))
    L5 = (_csr(carry({(r, p): -1.0 for r in rows}), (d, d)), np.zeros(d))
    L6 = (_csr({(r, r): -1.0 for r in rows}, (d, d)), np.zeros(d))
    return FFNStack((L1, L2, L3, L4, L5, L6), residual=True)


# ---------------------------------------------------------------------------
# the five-block network


def _pow2_at_least(x: float) -> float:
    return float(2.0 ** math.ceil(math.log2(x))) if x > 0 else 1.0


@dataclass(frozen=True)
class StageConstants:
    name: str
    U: float
    kappa_data: float
    C: float
    bound: float


@dataclass(frozen=True)
class BuiltConstants:
    """Offsets and dilation constants of the kernel network.

    ``C_interaction`` is the largest dilation constant; ``M_offset`` is used by
    the squared-distance and label stages, ``M_copy`` by the copy stages.
    """

    C_interaction: float
    M_offset: float
    M_copy: float
    safety_factor: float
    stages: tuple = field(default_factory=tuple)
    kappa: float = 0.0


def kernel_constants(n: int, D: int, h: float, b: float, R: float, safety_factor: float = DEFAULT_SAFETY) -> BuiltConstants:
    """All constants of :func:`build_kernel_transformer` without materializing weights."""
    if n < 1 or D < 1:
        raise ConstructionError("n and D must be positive")
    if not (0 < h < 1):
        raise ConstructionError(f"bandwidth must lie in (0, 1), got {h}")
    if not (b > 0 and R > 0 and safety_factor > 0):
        raise ConstructionError("b, R and safety_factor must be positive")
    d, ell = D + 5, 2 * n + 1
    raw = max(4.0 * b * b * D / (h * h), R) + 1.0
    if not raw <= OVERFLOW_LIMIT:
        raise ConstructionError(f"offset M={raw} overflows; use a larger bandwidth h")
    M = _pow2_at_least(raw)
    Mx = _pow2_at_least(b)
    U12 = max(b, R, 1.0)
    specs = [
        ("B1", U12, max(1.0, Mx), n + 1 + 1, n + 1),
        ("B2", U12, max(1.0, Mx), n + 1 + 1, 1),
        ("B3", max(2 * b, R, 1.0), max(1.0 / h, M, 1.0), n + 2, n + 2),
        ("B4", max(M, 2 * b, R, 1.0), max(1.0, M), n + 2, 1),
    ]
    stages = []
    for name, U, kap, t1, t2 in specs:
        # the enumerated minimum is the same for every (t1, t2) once ell >= 2
        bound = interaction_bound(d, kap, U, ell, t1, t2)
        C = safety_factor * bound
        if not (math.isfinite(C) and C <= OVERFLOW_LIMIT):
            raise ConstructionError(f"{name}: interaction constant {C} overflows; use a larger bandwidth h")
        stages.append(StageConstants(name, U, kap, C, bound))
    dec = 2.0 * max(M, Mx) / math.sin(math.pi / (4.0 * ell))
    kappa_est = max(max(s.C for s in stages), dec, M, Mx, 1.0 / h, 1.0)
    return BuiltConstants(
        C_interaction=max(s.C for s in stages),
        M_offset=M,
        M_copy=Mx,
        safety_factor=float(safety_factor),
        stages=tuple(stages),
        kappa=kappa_est,
    )


def build_kernel_transformer(
    n: int, D: int, h: float, b: float, R: float, safety_factor: float = DEFAULT_SAFETY
) -> TransformerSpec:
    """Five-block transformer whose decoder cell equals the NW estimate with bandwidth h.

    Weights depend only on the arguments; no prompt enters the construction.
    ``b`` must bound every coordinate of the prompt points and ``R`` every label.
    """
    h = float(h)
    bc = kernel_constants(n, D, h, b, R, safety_factor)
    st = {s.name: s for s in bc.stages}
    d, ell = D + 5, 2 * n + 1
    M, Mx = bc.M_offset, bc.M_copy
    o = d - 1  # ones row / column, 0-based
    yrow, zrow = D, D + 1  # 0-based rows D+1 and D+2
    blocks = []

    def V_row(r0):
        return _csr({(r0, o): 1.0}, (d, d))

    V_data = [V_row(i) for i in range(D)]

    # B1: copy x_{n+1} (+Mx) into columns n+2..2n+1
    kd12 = {(i, i): 1.0 for i in range(D)}
    kd12[(zrow, o)] = Mx
    K1 = _interaction_key(kd12, d, ell, n + 1)
    heads = []
    for j in range(1, n + 1):
        for i in range(D):
            qd = {(i, o): 1.0, (zrow, o): 1.0}
            heads.append(
                _interaction_head(qd, kd12, d, ell, n + 1 + j, n + 1, i + 1, st["B1"].C, K1, V_data[i], {"stage": "B1"})
            )
    blocks.append(Block(heads, build_decrement_ffn(1, D, n + 1, ell + 1, Mx, ell, d), "B1"))

    # B2: subtract x_j (+Mx)
    heads = []
    for j in range(1, n + 1):
        Kj = _interaction_key(kd12, d, ell, j)
        for i in range(D):
            qd = {(i, o): -1.0, (zrow, o): 1.0}
            heads.append(
                _interaction_head(qd, kd12, d, ell, n + 1 + j, j, i + 1, st["B2"].C, Kj, V_data[i], {"stage": "B2"})
            )
    blocks.append(Block(heads, build_decrement_ffn(1, D, n + 1, ell + 1, Mx, ell, d), "B2"))

    # B3: -|x_{n+1} - x_j|^2 / h^2 + M into row D+1
    inv_h = 1.0 / h
    qd3 = {(i, i): -inv_h for i in range(D)}
    qd3[(zrow, o)] = 1.0
    kd3 = {(i, i): inv_h for i in range(D)}
    kd3[(zrow, o)] = M
    V3 = V_row(yrow)
    heads = [
        _interaction_head(qd3, kd3, d, ell, n + 1 + j, n + 1 + j, yrow + 1, st["B3"].C, None, V3, {"stage": "B3"})
        for j in range(1, n + 1)
    ]
    blocks.append(Block(heads, FFNStack.zero(d), "B3"))

    # B4: y_j (+M) into row D+2, then remove M from rows D+1..D+2
    qd4 = {(yrow, o): 1.0, (zrow, o): 1.0}
    kd4 = {(yrow, yrow): 1.0, (zrow, o): M}
    V4 = V_row(zrow)
    heads = [
        _interaction_head(qd4, kd4, d, ell, n + 1 + j, j, zrow + 1, st["B4"].C, None, V4, {"stage": "B4"})
        for j in range(1, n + 1)
    ]
    blocks.append(Block(heads, build_decrement_ffn(D + 1, D + 2, n + 1, ell + 1, M, ell, d), "B4"))

    # B5: masked softmax over the difference tokens
    Q5 = _csr({(yrow, o): 1.0}, (d, d))
    K5 = _csr({(yrow, yrow): 1.0}, (d, d))
    V5 = _csr({(yrow, zrow): 1.0}, (d, d))
    head5 = AttentionHead(
        Q5, K5, V5, Activation.SOFTMAX_MASKED, tuple(range(n + 2, ell + 1)), n + 1, {"stage": "B5"}
    )
    blocks.append(Block([head5], FFNStack.zero(d), "B5"))

    meta = {
        "n": n,
        "D": D,
        "h": h,
        "b": float(b),
        "R": float(R),
        "safety_factor": float(safety_factor),
        "M": M,
        "M_copy": Mx,
        "stages": {s.name: {"U": s.U, "kappa_data": s.kappa_data, "C": s.C, "bound": s.bound} for s in bc.stages},
    }
    spec = TransformerSpec(tuple(blocks), (D + 1, n + 1), d, ell, float(R), None, meta)
    if not spec.kappa <= OVERFLOW_LIMIT:
        raise ConstructionError(f"weights reach {spec.kappa}; use a larger bandwidth h")
    return spec


# ---------------------------------------------------------------------------
# certificates and verification


def certify_spec(spec: TransformerSpec) -> list[str]:
    """Check the proof conditions of a built kernel network; returns failure messages."""
    meta = spec.meta
    fails = []
    D, h, b, R = meta["D"], meta["h"], meta["b"], meta["R"]
    if meta["M"] < max(4 * b * b * D / (h * h), R):
        fails.append(f"B3/B4 decrementing: offset M={meta['M']} below max(4b^2D/h^2, R)")
    if meta["M_copy"] < b:
        fails.append(f"B1/B2 decrementing: copy offset {meta['M_copy']} below b={b}")
    for blk in spec.blocks:
        stage = meta["stages"].get(blk.name)
        if stage is None:
            continue
        worst = min(head_dilation(hd) for hd in blk.heads)
        if worst < stage["bound"] * (1 - 1e-12):
            fails.append(
                f"{blk.name} interaction heads: dilation C={worst:.6g} below the proof bound "
                f"{stage['bound']:.6g} (safety factor {meta['safety_factor']})"
            )
    if spec.kappa < spec.max_abs_weight():
        fails.append("kappa below the largest weight")
    return fails


def debug_forward(spec: TransformerSpec, prompts) -> ForwardTrace:
    """Forward pass recording H_0..H_L and checking gadget preconditions."""
    prompts = list(prompts)
    trace = ForwardTrace()
    H = np.stack([embed_prompt(p) for p in prompts])
    run_blocks(spec, H, trace=trace)
    stages = spec.meta.get("stages", {})
    for k, blk in enumerate(spec.blocks):
        U = stages.get(blk.name, {}).get("U")
        if U is not None:
            seen = float(np.abs(trace.stages[k][:, : spec.d_embed - STATIC_ROWS]).max())
            if seen > U:
                trace.violations.append(f"{blk.name}: input entry {seen} exceeds U={U}")
    for k in range(len(trace.stages) - 1):
        a, b = trace.stages[k], trace.stages[k + 1]
        if not np.array_equal(a[:, -STATIC_ROWS:], b[:, -STATIC_ROWS:]):
            trace.violations.append(f"block {k + 1}: static rows modified")
    return trace


@dataclass(frozen=True)
class Equivalence:
    transformer_value: float
    oracle_value: float
    abs_diff: float
    rel_diff: float

    def __iter__(self):
        return iter((self.transformer_value, self.oracle_value, self.abs_diff, self.rel_diff))


def _compare(t: float, o: float) -> Equivalence:
    ad = abs(t - o)
    return Equivalence(float(t), float(o), float(ad), float(ad / max(1.0, abs(o))))


def verify_equivalence(spec: TransformerSpec, prompt: Prompt, h) -> Equivalence:
    return verify_equivalence_batch(spec, [prompt], h)[0]


def verify_equivalence_batch(spec: TransformerSpec, prompts, h, batch: int = 16) -> list[Equivalence]:
    prompts = list(prompts)
    out = []
    for s in range(0, len(prompts), batch):
        chunk = prompts[s : s + batch]
        tv = forward_batch(spec, chunk)
        out.extend(_compare(t, nw_estimate(p, h)) for t, p in zip(tv, chunk))
    return out


def expected_stages(prompt: Prompt, h: float, M: float) -> list[np.ndarray]:
    """Reference H_1..H_4 computed directly from the prompt."""
    n, D = prompt.n, prompt.ambient_dim
    H0 = embed_prompt(prompt)
    win = slice(n + 1, 2 * n + 1)
    H1 = H0.copy()
    H1[:D, win] = prompt.query[:, None]
    H2 = H1.copy()
    H2[:D, win] = prompt.query[:, None] - prompt.xs[:n].T
    H3 = H2.copy()
    H3[D, win] = -np.sum(H2[:D, win] ** 2, axis=0) / (h * h) + M
    H4 = H3.copy()
    H4[D, win] = H3[D, win] - M
    H4[D + 1, win] = prompt.ys
    return [H1, H2, H3, H4]


def dump_stages(spec: TransformerSpec, prompt: Prompt, directory) -> list[Path]:
    """Write H0..H_L of one forward pass as CSV files H0.csv, H1.csv, ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trace = debug_forward(spec, [prompt])
    paths = []
    for k, H in enumerate(trace.stages):
        path = directory / f"H{k}.csv"
        np.savetxt(path, H[0], delimiter=",", fmt="%.17g")
        paths.append(path)
    return paths
