"""Forward pass for ReLU / masked-softmax attention transformers on token matrices.

Row and column indices in the public API are 1-based, matching the usual
matrix notation for the token matrix H (``d_embed`` rows, ``ell`` columns).
The last three rows of H are static: two positional rows and a row of ones.

Weight matrices are stored sparse.  Attention logits are accumulated in a
fixed order, with the data rows and the static rows summed separately
(``logit = data + static``), so that positional gadgets whose static score
cancels to exactly zero do not disturb the data score.  ReLU heads skip query
columns whose logits are certified negative; this gives the same values as
the dense evaluation, which is kept as a reference path.
"""

from __future__ import annotations

import enum
import functools
import json
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .manifold_data import Prompt

STATIC_ROWS = 3
SCHEMA_VERSION = 1
_EPS = np.finfo(float).eps


class ConfigurationError(ValueError):
    """Malformed head, block or spec."""


class ShapeError(ValueError):
    """Dimension mismatch between a spec and its input."""


class Activation(enum.Enum):
    RELU = "relu"
    SOFTMAX_MASKED = "softmax_masked"


@functools.lru_cache(maxsize=64)
def positional_table(ell: int) -> np.ndarray:
    """Array of shape (2, ell) whose column j-1 is I_j."""
    if ell < 1:
        raise ValueError("ell must be positive")
    ang = np.arange(1, ell + 1, dtype=float) * np.pi / (2.0 * ell)
    tab = np.vstack([np.cos(ang), np.sin(ang)])
    tab.flags.writeable = False
    return tab


def positional_encoding(j: int, ell: int) -> tuple[float, float]:
    if not 1 <= j <= ell:
        raise ValueError(f"position {j} outside 1..{ell}")
    tab = positional_table(ell)
    return float(tab[0, j - 1]), float(tab[1, j - 1])


def static_rows(ell: int) -> np.ndarray:
    """The three static rows (cos, sin, ones) for ``ell`` tokens."""
    return np.vstack([positional_table(ell), np.ones((1, ell))])


def embed_prompt(prompt: Prompt) -> np.ndarray:
    n, D = prompt.n, prompt.ambient_dim
    ell = 2 * n + 1
    H = np.zeros((D + 5, ell))
    H[:D, : n + 1] = prompt.xs.T
    H[D, :n] = prompt.ys
    H[D + 2 :, :] = static_rows(ell)
    return H


def embed_batch(prompts) -> np.ndarray:
    """Stack embedded prompts with equal (n, D) into shape (P, d_embed, ell)."""
    return np.stack([embed_prompt(p) for p in prompts])


def _as_csr(m, d: int | None = None) -> sparse.csr_matrix:
    a = sparse.csr_matrix(m, dtype=float)
    a.sum_duplicates()
    a.eliminate_zeros()
    a.sort_indices()
    if d is not None and a.shape != (d, d):
        raise ConfigurationError(f"expected a {d}x{d} matrix, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise ConfigurationError("weights must be finite")
    return a


@dataclass(frozen=True, eq=False)
class AttentionHead:
    """One attention head.

    ``mask`` (1-based columns) and ``query_col`` are used only by masked
    softmax heads.  ``tag`` is free-form diagnostic metadata; a tag with an
    ``"expect"`` entry ``(t1, t2)`` asks debug runs to check that no other
    token pair is active.
    """

    Q: sparse.csr_matrix
    K: sparse.csr_matrix
    V: sparse.csr_matrix
    activation: Activation = Activation.RELU
    mask: tuple | None = None
    query_col: int | None = None
    tag: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.Q.shape[0]
        Q = self.Q if _is_canonical(self.Q, d) else _as_csr(self.Q, d)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "K", self.K if _is_canonical(self.K, d) else _as_csr(self.K, d))
        object.__setattr__(self, "V", self.V if _is_canonical(self.V, d) else _as_csr(self.V, d))
        act = Activation(self.activation)
        object.__setattr__(self, "activation", act)
        if act is Activation.SOFTMAX_MASKED:
            if not self.mask:
                raise ConfigurationError("masked softmax head needs a nonempty mask")
            object.__setattr__(self, "mask", tuple(sorted(int(c) for c in self.mask)))
        elif self.mask is not None:
            object.__setattr__(self, "mask", tuple(sorted(int(c) for c in self.mask)))

    @property
    def d_embed(self) -> int:
        return self.Q.shape[0]

    def max_abs_weight(self) -> float:
        return max((float(np.abs(m.data).max()) if m.nnz else 0.0) for m in (self.Q, self.K, self.V))


def _is_canonical(m, d) -> bool:
    # Shared key/value matrices are passed through untouched so that the
    # per-block projection cache can recognise them by identity.
    return (
        isinstance(m, sparse.csr_matrix)
        and m.shape == (d, d)
        and m.has_canonical_format
        and np.all(np.isfinite(m.data))
        and not np.any(m.data == 0)
    )


@dataclass(frozen=True, eq=False)
class FFNStack:
    """Tokenwise ReLU network; ReLU after every layer but the last.

    Inner widths may differ from ``d_embed``.  With ``residual`` the stack maps
    ``h`` to ``net(h) + h``.  Inside a block the residual connection is the
    block's own, so block FFNs must be residual.
    """

    layers: tuple
    residual: bool = True

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ConfigurationError("FFN needs at least one layer")
        fixed = []
        prev = None
        for W, b in self.layers:
            W = _as_csr(W)
            b = np.array(b, dtype=float).reshape(-1)
            b.flags.writeable = False
            if b.shape[0] != W.shape[0]:
                raise ConfigurationError("bias length must match layer output width")
            if prev is not None and W.shape[1] != prev:
                raise ConfigurationError("consecutive layer widths do not match")
            if not np.all(np.isfinite(b)):
                raise ConfigurationError("biases must be finite")
            prev = W.shape[0]
            fixed.append((W, b))
        if fixed[0][0].shape[1] != fixed[-1][0].shape[0]:
            raise ConfigurationError("FFN must map d_embed to d_embed")
        object.__setattr__(self, "layers", tuple(fixed))
        object.__setattr__(self, "_dense", tuple(W.toarray() for W, _ in fixed))

    @property
    def d_embed(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def width(self) -> int:
        return max(W.shape[0] for W, _ in self.layers)

    def max_abs_weight(self) -> float:
        m = 0.0
        for W, b in self.layers:
            if W.nnz:
                m = max(m, float(np.abs(W.data).max()))
            if b.size:
                m = max(m, float(np.abs(b).max()))
        return m

    def net(self, X: np.ndarray) -> np.ndarray:
        """The layer composition without the residual term; X is (..., d, ell)."""
        Z = X
        last = len(self.layers) - 1
        for k, ((_, b), W) in enumerate(zip(self.layers, self._dense)):
            Z = np.matmul(W, Z) + b[:, None]
            if k < last:
                np.maximum(Z, 0.0, out=Z)
        return Z

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = self.net(X)
        return out + X if self.residual else out

    @staticmethod
    def zero(d_embed: int) -> "FFNStack":
        return FFNStack(((sparse.csr_matrix((d_embed, d_embed)), np.zeros(d_embed)),), True)


@dataclass(frozen=True, eq=False)
class Block:
    heads: tuple
    ffn: FFNStack
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.ffn.residual:
            raise ConfigurationError("block FFN must be residual")


@dataclass(frozen=True)
class ArchitectureDescriptor:
    L_T: int
    m_T: int
    d_embed: int
    ell: int
    L_FFN: int
    w_FFN: int
    R: float
    kappa: float


@dataclass(frozen=True, eq=False)
class TransformerSpec:
    blocks: tuple
    decoder: tuple
    d_embed: int
    ell: int
    R: float = 1.0
    kappa: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        row, col = (int(v) for v in self.decoder)
        if not (1 <= row <= self.d_embed and 1 <= col <= self.ell):
            raise ConfigurationError(f"decoder {(row, col)} outside {self.d_embed}x{self.ell}")
        object.__setattr__(self, "decoder", (row, col))
        for blk in self.blocks:
            if blk.ffn.d_embed != self.d_embed or any(h.d_embed != self.d_embed for h in blk.heads):
                raise ConfigurationError("block dimension differs from d_embed")
        actual = self.max_abs_weight()
        if self.kappa is None:
            object.__setattr__(self, "kappa", actual)
        elif self.kappa < actual:
            raise ConfigurationError(f"kappa {self.kappa} below max weight {actual}")

    def max_abs_weight(self) -> float:
        m = 0.0
        for blk in self.blocks:
            m = max(m, blk.ffn.max_abs_weight(), *(h.max_abs_weight() for h in blk.heads))
        return m

    @property
    def descriptor(self) -> ArchitectureDescriptor:
        return ArchitectureDescriptor(
            L_T=len(self.blocks),
            m_T=max((len(b.heads) for b in self.blocks), default=0),
            d_embed=self.d_embed,
            ell=self.ell,
            L_FFN=max((len(b.ffn.layers) for b in self.blocks), default=0),
            w_FFN=max((b.ffn.width for b in self.blocks), default=0),
            R=float(self.R),
            kappa=float(self.kappa),
        )


# ---------------------------------------------------------------------------
# attention engine


def _project(M: sparse.csr_matrix, H: np.ndarray):
    """Rows of ``M @ H`` that can be nonzero, with a fixed summation order.

    H has shape (P, d, ell).  Returns (row_ids, values of shape (P, r, ell)).
    """
    counts = np.diff(M.indptr)
    rows = np.flatnonzero(counts)
    if rows.size == 0:
        return rows, np.zeros((H.shape[0], 0, H.shape[2]))
    prod = M.data[None, :, None] * H[:, M.indices, :]
    return rows, np.add.reduceat(prod, M.indptr[rows], axis=1)


def _split_common(qrows, krows, d):
    common = np.intersect1d(qrows, krows)
    qpos = np.searchsorted(qrows, common)
    kpos = np.searchsorted(krows, common)
    is_static = common >= d - STATIC_ROWS
    return common, qpos, kpos, is_static


def _logits(q, krows, qpos, kpos, is_static):
    """Logits of query columns ``q`` (P, rq, s) against key rows (each (P, ell))."""
    P, _, s = q.shape
    ell = krows[0].shape[-1]
    data = np.zeros((P, s, ell))
    stat = None
    for a, b, st in zip(qpos, kpos, is_static):
        term = q[:, a, :, None] * krows[b][:, None, :]
        if st:
            stat = term if stat is None else stat + term
        else:
            data += term
    return data if stat is None else data + stat


class _RowCache:
    """Row projections of weight matrices against one batch of token matrices.

    Rows with identical content are projected once, so keys that differ only
    in their positional rows share the work on the data rows.
    """

    def __init__(self, H):
        self.H = H
        self.d = H.shape[1]
        self.ell = H.shape[2]
        self._rows = {}
        self._mats = {}
        self.hmax = np.abs(H).max(axis=(0, 2))
        self.s0 = H[0, self.d - STATIC_ROWS :, :]
        self.sdev = np.abs(H[:, self.d - STATIC_ROWS :, :] - self.s0[None]).max(axis=(0, 2))
        self.s0_key = (self.s0.tobytes(), self.sdev.tobytes())
        self.uniform_static = bool(self.sdev.max() == 0.0)

    def matrix(self, M):
        hit = self._mats.get(id(M))
        if hit is None:
            rows = np.flatnonzero(np.diff(M.indptr))
            vals, lo, hi, fixed = [], [], [], []
            for r in rows:
                s, e = M.indptr[r], M.indptr[r + 1]
                idx, dat = M.indices[s:e], M.data[s:e]
                static_only = bool(idx[0] >= self.d - STATIC_ROWS)
                fixed.append(static_only)
                sig = (idx.tobytes(), dat.tobytes())
                got = self._rows.get(sig)
                if got is None:
                    if static_only and self.uniform_static:
                        # same for every prompt: project once and broadcast
                        prod = dat[None, :, None] * self.H[:1, idx, :]
                        v = np.add.reduceat(prod, [0], axis=1)[:, 0, :]
                        v = np.broadcast_to(v, (self.H.shape[0], self.ell))
                    else:
                        prod = dat[None, :, None] * self.H[:, idx, :]
                        v = np.add.reduceat(prod, [0], axis=1)[:, 0, :]
                    got = (v, float(v.min()), float(v.max()))
                    self._rows[sig] = got
                vals.append(got[0])
                lo.append(got[1])
                hi.append(got[2])
            hit = (M, rows, vals, np.array(lo), np.array(hi), np.array(fixed, dtype=bool))
            self._mats[id(M)] = hit
        return hit[1:]

    def screen(self, Q, common, klo, khi, kexact, hmax):
        """Query columns and key columns that may carry a positive logit.

        Query rows are bounded by their static-column part plus an interval
        for the data columns; key rows by their range over the batch, or
        exactly when they read only static rows (``kexact`` holds those rows,
        None elsewhere).  Everything outside the returned sets is certified
        negative, rounding slack included.
        """
        d0 = self.d - STATIC_ROWS
        rc = len(common)
        starts = Q.indptr[common]
        lens = Q.indptr[common + 1] - starts
        lab = np.repeat(np.arange(rc), lens)
        ent = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        idx, dat = Q.indices[ent], Q.data[ent]
        st = idx >= d0
        qs = np.zeros((rc, self.ell))
        np.add.at(qs, lab[st], dat[st, None] * self.s0[idx[st] - d0])
        err = np.bincount(lab[~st], np.abs(dat[~st]) * hmax[idx[~st]], minlength=rc)
        err = err + np.bincount(lab[st], np.abs(dat[st]) * self.sdev[idx[st] - d0], minlength=rc)
        qlo, qhi = qs - err[:, None], qs + err[:, None]
        lo, hi = klo[:, None], khi[:, None]
        kabs = np.maximum(np.abs(klo), np.abs(khi))
        ub = np.maximum(np.maximum(qlo * lo, qlo * hi), np.maximum(qhi * lo, qhi * hi)).sum(axis=0)
        mag = ((np.abs(qs) + err[:, None]) * kabs[:, None]).sum(axis=0)
        slack = 8.0 * (rc + 8) * _EPS
        cols = np.flatnonzero(ub + slack * mag >= 0.0)
        if cols.size == 0:
            return cols, cols
        a = qlo[:, cols].min(axis=1)
        b = qhi[:, cols].max(axis=1)
        qa = np.maximum(np.abs(a), np.abs(b))
        ex = np.array([kx is not None for kx in kexact])
        iv = ~ex
        corner = np.maximum(np.maximum(a * klo, a * khi), np.maximum(b * klo, b * khi))
        kub = np.full(self.ell, corner[iv].sum())
        kmag = np.full(self.ell, (qa * kabs)[iv].sum())
        if ex.any():
            KX = np.stack([kx for kx in kexact if kx is not None])
            kub = kub + np.maximum(a[ex, None] * KX, b[ex, None] * KX).sum(axis=0)
            kmag = kmag + (qa[ex, None] * np.abs(KX)).sum(axis=0)
        keys = np.flatnonzero(kub + slack * kmag >= 0.0)
        return cols, keys

    def screen_cached(self, head, common, kpos, klo, khi, kfixed, kvals):
        # Candidate sets are computed for an envelope twice as wide as the
        # current bounds and reused while later batches stay inside it.
        hit = _SCREEN_CACHE.get(head)
        if hit is not None:
            key, hmax_env, lo_env, hi_env, found = hit
            if (
                key == self.s0_key
                and lo_env.shape == klo.shape
                and np.all(self.hmax <= hmax_env)
                and np.all(klo >= lo_env)
                and np.all(khi <= hi_env)
            ):
                return found
        hmax_env = 2.0 * self.hmax
        # rows reading only static columns do not depend on the prompt data
        exact = kfixed & (self.sdev.max() == 0.0)
        lo_env = np.where(exact, klo, klo - np.abs(klo))
        hi_env = np.where(exact, khi, khi + np.abs(khi))
        kexact = [kvals[b][0] if x else None for b, x in zip(kpos, exact)]
        found = self.screen(head.Q, common, lo_env, hi_env, kexact, hmax_env)
        _SCREEN_CACHE[head] = (self.s0_key, hmax_env, lo_env, hi_env, found)
        return found


_SCREEN_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _relu_head(head, H, acc, cache, dense=False, trace=None):
    Q = head.Q
    qrows = np.flatnonzero(np.diff(Q.indptr))
    krows, kvals, klo, khi, kfixed = cache.matrix(head.K)
    common, qpos, kpos, is_static = _split_common(qrows, krows, cache.d)
    if common.size == 0:
        return
    if dense:
        cols = keys = np.arange(cache.ell)
    else:
        cols, keys = cache.screen_cached(head, common, kpos, klo[kpos], khi[kpos], kfixed[kpos], kvals)
        if cols.size == 0 or keys.size == 0:
            return
    _, qv = _project(Q, H[:, :, cols])
    ksub = kvals if dense else [v[:, keys] for v in kvals]
    lg = _logits(qv, ksub, qpos, kpos, is_static)
    w = np.maximum(lg, 0.0)
    if trace is not None and "expect" in head.tag:
        trace.check_pairs(head, cols, keys, lg)
    vrows, vvals = cache.matrix(head.V)[:2]
    if vrows.size == 0:
        return
    vv = np.stack(vvals, axis=1)
    if not dense:
        vv = vv[:, :, keys]
    contrib = np.matmul(vv, np.swapaxes(w, 1, 2))
    acc[np.ix_(np.arange(H.shape[0]), vrows, cols)] += contrib


def _softmax_head(head, H, acc, query_col):
    d, ell = H.shape[1], H.shape[2]
    mask = np.asarray(head.mask, dtype=int) - 1
    if mask.size == 0:
        raise ConfigurationError("empty mask")
    if mask.min() < 0 or mask.max() >= ell:
        raise ConfigurationError("mask outside 1..ell")
    qrows, qv = _project(head.Q, H[:, :, [query_col - 1]])
    krows, kv = _project(head.K, H[:, :, mask])
    vrows, vv = _project(head.V, H[:, :, mask])
    common, qpos, kpos, is_static = _split_common(qrows, krows, d)
    if common.size:
        lg = _logits(qv, [kv[:, b, :] for b in range(kv.shape[1])], qpos, kpos, is_static)[:, 0, :]
    else:
        lg = np.zeros((H.shape[0], mask.size))
    lg = lg - lg.max(axis=1, keepdims=True)
    w = np.exp(lg)
    w = w / w.sum(axis=1, keepdims=True)
    if vrows.size:
        acc[:, vrows, query_col - 1] += np.einsum("prk,pk->pr", vv, w)


def _batched(H):
    H = np.asarray(H, dtype=float)
    return (H[None], True) if H.ndim == 2 else (H, False)


def attention_apply(head: AttentionHead, H, dense: bool = False) -> np.ndarray:
    """Output of a ReLU head: column i is sum_j ReLU(<Q h_i, K h_j>) V h_j."""
    if head.activation is not Activation.RELU:
        raise ConfigurationError("attention_apply expects a ReLU head")
    Hb, single = _batched(H)
    acc = np.zeros_like(Hb)
    _relu_head(head, Hb, acc, _RowCache(Hb), dense=dense)
    return acc[0] if single else acc


def attention_softmax_masked(head: AttentionHead, H, query_col: int) -> np.ndarray:
    if head.activation is not Activation.SOFTMAX_MASKED:
        raise ConfigurationError("expected a masked softmax head")
    Hb, single = _batched(H)
    if not 1 <= query_col <= Hb.shape[2]:
        raise ConfigurationError(f"query column {query_col} outside 1..{Hb.shape[2]}")
    acc = np.zeros_like(Hb)
    _softmax_head(head, Hb, acc, query_col)
    return acc[0] if single else acc


def multihead_apply(heads, H, dense=False, trace=None) -> np.ndarray:
    Hb, single = _batched(H)
    acc = np.zeros_like(Hb)
    cache = _RowCache(Hb)
    for head in heads:
        if head.activation is Activation.RELU:
            _relu_head(head, Hb, acc, cache, dense=dense, trace=trace)
        else:
            if head.query_col is None:
                raise ConfigurationError("masked softmax head inside a block needs query_col")
            _softmax_head(head, Hb, acc, head.query_col)
    return acc[0] if single else acc


def block_apply(block: Block, H, dense: bool = False, trace=None) -> np.ndarray:
    """FFN(MHA(H) + H) + MHA(H) + H."""
    Hb, single = _batched(H)
    if Hb.shape[1] != block.ffn.d_embed:
        raise ShapeError(f"token dimension {Hb.shape[1]} != block dimension {block.ffn.d_embed}")
    Z = multihead_apply(block.heads, Hb, dense=dense, trace=trace) + Hb
    out = block.ffn.net(Z) + Z
    return out[0] if single else out


class ForwardTrace:
    """Intermediate token matrices and gadget diagnostics from a debug run."""

    def __init__(self):
        self.stages: list[np.ndarray] = []
        self.violations: list[str] = []
        self._block = None

    def check_pairs(self, head, cols, keys, lg):
        t1, t2 = head.tag["expect"]
        where = head.tag.get("stage", self._block)
        for p, a, k in np.argwhere(lg > 0):
            pair = (int(cols[a]) + 1, int(keys[k]) + 1)
            if pair != (t1, t2):
                self.violations.append(f"{where}: interaction head for pair {(t1, t2)} also fires at {pair}")
                return
        ia = np.flatnonzero(cols == t1 - 1)
        ib = np.flatnonzero(keys == t2 - 1)
        if ia.size == 0 or ib.size == 0 or np.any(lg[:, ia[0], ib[0]] < 0):
            self.violations.append(f"{where}: intended pair {(t1, t2)} has negative pre-activation")


def run_blocks(spec: TransformerSpec, H, dense: bool = False, trace: ForwardTrace | None = None):
    Hb, single = _batched(H)
    if Hb.shape[1:] != (spec.d_embed, spec.ell):
        raise ShapeError(f"token matrix {Hb.shape[1:]} does not match spec {(spec.d_embed, spec.ell)}")
    if trace is not None:
        trace.stages.append(Hb.copy())
    for k, blk in enumerate(spec.blocks):
        if trace is not None:
            trace._block = blk.name or f"block {k + 1}"
        Hb = block_apply(blk, Hb, dense=dense, trace=trace)
        if trace is not None:
            trace.stages.append(Hb.copy())
    return Hb[0] if single else Hb


def _check_prompt(spec, prompt):
    if prompt.ambient_dim + 5 != spec.d_embed or 2 * prompt.n + 1 != spec.ell:
        raise ShapeError(
            f"prompt (n={prompt.n}, D={prompt.ambient_dim}) does not fit spec "
            f"(d_embed={spec.d_embed}, ell={spec.ell})"
        )


def forward_batch(spec: TransformerSpec, prompts, dense: bool = False, trace=None) -> np.ndarray:
    prompts = list(prompts)
    for p in prompts:
        _check_prompt(spec, p)
    out = run_blocks(spec, embed_batch(prompts), dense=dense, trace=trace)
    r, c = spec.decoder
    return out[:, r - 1, c - 1].copy()


def forward(spec: TransformerSpec, prompt: Prompt, dense: bool = False, trace=None) -> float:
    return float(forward_batch(spec, [prompt], dense=dense, trace=trace)[0])


# ---------------------------------------------------------------------------
# JSON round trip


def _mat_doc(m: sparse.csr_matrix) -> dict:
    coo = m.tocoo()
    return {
        "shape": list(m.shape),
        "row": coo.row.tolist(),
        "col": coo.col.tolist(),
        "val": coo.data.tolist(),
    }


def _mat_load(doc) -> sparse.csr_matrix:
    m = sparse.csr_matrix(
        (np.asarray(doc["val"], dtype=float), (np.asarray(doc["row"], dtype=int), np.asarray(doc["col"], dtype=int))),
        shape=tuple(doc["shape"]),
    )
    return _as_csr(m)


def spec_to_json(spec: TransformerSpec) -> str:
    """Serialize with matrices stored once in a shared table (sparse triplets)."""
    table = []
    index = {}

    def ref(m):
        key = id(m)
        if key not in index:
            index[key] = len(table)
            table.append(_mat_doc(m))
        return index[key]

    blocks = []
    for blk in spec.blocks:
        heads = []
        for h in blk.heads:
            hd = {"Q": ref(h.Q), "K": ref(h.K), "V": ref(h.V), "activation": h.activation.value}
            if h.mask is not None:
                hd["mask"] = list(h.mask)
            if h.query_col is not None:
                hd["query_col"] = h.query_col
            if h.tag:
                hd["tag"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in h.tag.items()}
            heads.append(hd)
        layers = [{"W": _mat_doc(W), "b": b.tolist()} for W, b in blk.ffn.layers]
        blocks.append({"name": blk.name, "heads": heads, "ffn": {"residual": blk.ffn.residual, "layers": layers}})
    doc = {
        "schema_version": SCHEMA_VERSION,
        "d_embed": spec.d_embed,
        "ell": spec.ell,
        "decoder": list(spec.decoder),
        "R": spec.R,
        "kappa": spec.kappa,
        "meta": spec.meta,
        "matrices": table,
        "blocks": blocks,
    }
    return json.dumps(doc, allow_nan=False, separators=(",", ":"))


def spec_from_json(text: str) -> TransformerSpec:
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported schema_version {doc.get('schema_version')!r}")
    mats = [_mat_load(m) for m in doc["matrices"]]
    blocks = []
    for bd in doc["blocks"]:
        heads = []
        for hd in bd["heads"]:
            tag = {k: (tuple(v) if isinstance(v, list) else v) for k, v in hd.get("tag", {}).items()}
            heads.append(
                AttentionHead(
                    mats[hd["Q"]],
                    mats[hd["K"]],
                    mats[hd["V"]],
                    Activation(hd["activation"]),
                    tuple(hd["mask"]) if "mask" in hd else None,
                    hd.get("query_col"),
                    tag,
                )
            )
        layers = tuple((_mat_load(ld["W"]), np.asarray(ld["b"], dtype=float)) for ld in bd["ffn"]["layers"])
        blocks.append(Block(tuple(heads), FFNStack(layers, bd["ffn"]["residual"]), bd.get("name", "")))
    return TransformerSpec(
        tuple(blocks), tuple(doc["decoder"]), doc["d_embed"], doc["ell"], doc["R"], doc["kappa"], doc.get("meta", {})
    )
