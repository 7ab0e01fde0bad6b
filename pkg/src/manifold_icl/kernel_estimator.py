"""Gaussian Nadaraya-Watson estimator and its Monte Carlo integral form."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .manifold_data import (
    HolderFunction,
    IsometricEmbedding,
    Manifold,
    ParameterError,
    Prompt,
    embed_ambient,
    sample_uniform,
)

DEFAULT_MC_SAMPLES = 100_000


@dataclass(frozen=True)
class Bandwidth:
    h: float

    def __post_init__(self):
        h = float(self.h)
        if not (np.isfinite(h) and h > 0):
            raise ParameterError(f"bandwidth must be positive, got {self.h}")
        if h >= 1:
            warnings.warn(f"bandwidth h={h} >= 1 lies outside (0, 1)", stacklevel=3)
        object.__setattr__(self, "h", h)

    def __float__(self):
        return self.h


def _h(h) -> float:
    if isinstance(h, Bandwidth):
        return h.h
    h = float(h)
    if not h > 0:
        raise ParameterError(f"bandwidth must be positive, got {h}")
    return h


def gaussian_kernel(u, h) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.exp(-np.dot(u.ravel(), u.ravel()) / _h(h) ** 2))


def _nw(sq_dist: np.ndarray, ys: np.ndarray, h: float) -> np.ndarray:
    # Rows are queries. Shifting by the largest exponent keeps the ratio finite.
    logits = -sq_dist / (h * h)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return (w @ ys) / w.sum(axis=-1)


def nw_estimate(prompt: Prompt, h) -> float:
    diff = prompt.xs[:-1] - prompt.query[None, :]
    sq = np.einsum("ij,ij->i", diff, diff)
    return float(_nw(sq[None, :], prompt.ys, _h(h))[0])


def nw_estimate_many(xs: np.ndarray, ys: np.ndarray, queries: np.ndarray, h) -> np.ndarray:
    """NW estimates at several query points sharing one labelled sample."""
    queries = np.atleast_2d(queries)
    sq = np.empty((queries.shape[0], xs.shape[0]))
    for k, q in enumerate(queries):
        diff = xs - q[None, :]
        sq[k] = np.einsum("ij,ij->i", diff, diff)
    return _nw(sq, ys, _h(h))


def integral_estimate_mc_many(
    manifold: Manifold,
    embedding: IsometricEmbedding,
    f: HolderFunction,
    queries: np.ndarray,
    h,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed=None,
    return_stderr: bool = False,
):
    """Monte Carlo ratio estimates of the integral kernel estimator at each query.

    One uniform sample is shared by all queries.  With ``return_stderr`` the
    delta-method standard error of each ratio is returned as well.
    """
    if mc_samples < 1000:
        raise ParameterError("mc_samples must be at least 1000")
    hv = _h(h)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    base = sample_uniform(manifold, mc_samples, seed)
    pts = embed_ambient(embedding, base)
    fv = f.values(base)
    est = np.empty(queries.shape[0])
    err = np.empty(queries.shape[0])
    for k, q in enumerate(queries):
        d = pts - q[None, :]
        w = np.exp(-np.einsum("ij,ij->i", d, d) / (hv * hv))
        sw = w.sum()
        r = (w @ fv) / sw
        est[k] = r
        # var of mean(w*(f - r)) divided by mean(w)^2
        resid = w * (fv - r)
        err[k] = np.sqrt(resid @ resid / mc_samples) / (sw / mc_samples) / np.sqrt(mc_samples)
    return (est, err) if return_stderr else est


def integral_estimate_mc(
    manifold: Manifold,
    embedding: IsometricEmbedding,
    f: HolderFunction,
    x_query,
    h,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed=None,
    return_stderr: bool = False,
):
    out = integral_estimate_mc_many(
        manifold, embedding, f, np.asarray(x_query, dtype=float)[None, :], h, mc_samples, seed, True
    )
    if return_stderr:
        return float(out[0][0]), float(out[1][0])
    return float(out[0][0])


def bandwidth_for(n: int, alpha: float, d: int) -> Bandwidth:
    if n < 1:
        raise ParameterError("n must be at least 1")
    return Bandwidth(float(n) ** (-1.0 / (2.0 * alpha + d)))
