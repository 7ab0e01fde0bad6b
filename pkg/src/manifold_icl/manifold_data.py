"""Manifolds, isometric embeddings, Hölder test functions and prompts.

Points are stored in the base ambient space of each manifold (R^2 for the
circle, R^3 for the sphere, R^4 for the Clifford torus) and mapped into R^D
by an :class:`IsometricEmbedding`.  Every random draw takes an explicit seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

ON_MANIFOLD_TOL = 1e-9


class DomainError(ValueError):
    """Input point violates a manifold constraint."""


class ParameterError(ValueError):
    """Invalid numeric parameter."""


class EmptyBatchError(ValueError):
    """A sample of size zero was requested."""


class ManifoldKind(enum.Enum):
    CIRCLE = "circle"
    SPHERE2 = "sphere"
    CLIFFORD_TORUS2 = "torus"


_INTRINSIC = {ManifoldKind.CIRCLE: 1, ManifoldKind.SPHERE2: 2, ManifoldKind.CLIFFORD_TORUS2: 2}
_BASE_DIM = {ManifoldKind.CIRCLE: 2, ManifoldKind.SPHERE2: 3, ManifoldKind.CLIFFORD_TORUS2: 4}


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Manifold:
    kind: ManifoldKind
    radius: float = 1.0

    def __post_init__(self):
        kind = ManifoldKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ParameterError(f"radius must be positive, got {self.radius}")

    @classmethod
    def from_name(cls, name: str, radius: float = 1.0) -> "Manifold":
        return cls(ManifoldKind(name), float(radius))

    @property
    def intrinsic_dim(self) -> int:
        return _INTRINSIC[self.kind]

    @property
    def base_ambient_dim(self) -> int:
        return _BASE_DIM[self.kind]

    @property
    def reach(self) -> float:
        return float(self.radius)

    @property
    def coord_bound(self) -> float:
        # Largest point norm. It bounds every coordinate in any orthonormal frame,
        # so it stays valid after embedding into R^D.
        if self.kind is ManifoldKind.CLIFFORD_TORUS2:
            return float(self.radius * np.sqrt(2.0))
        return float(self.radius)

    def check_points(self, x) -> np.ndarray:
        """Return ``x`` as a 2-D array after checking the manifold constraints."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if pts.shape[-1] != self.base_ambient_dim:
            raise DomainError(
                f"{self.kind.value}: expected points in R^{self.base_ambient_dim}, "
                f"got dimension {pts.shape[-1]}"
            )
        r2 = self.radius**2
        tol = ON_MANIFOLD_TOL * max(1.0, r2)
        if self.kind is ManifoldKind.CLIFFORD_TORUS2:
            for a, b, label in ((0, 1, "x1^2+x2^2"), (2, 3, "x3^2+x4^2")):
                s = pts[:, a] ** 2 + pts[:, b] ** 2
                bad = np.abs(s - r2) > tol
                if bad.any():
                    raise DomainError(
                        f"torus: {label} must equal radius^2={r2}, got {s[bad][0]!r}"
                    )
        else:
            s = np.einsum("ij,ij->i", pts, pts)
            bad = np.abs(s - r2) > tol
            if bad.any():
                raise DomainError(
                    f"{self.kind.value}: |x|^2 must equal radius^2={r2}, got {s[bad][0]!r}"
                )
        return pts


def sample_uniform(manifold: Manifold, count: int, seed) -> np.ndarray:
    """Draw ``count`` points uniformly w.r.t. the Riemannian volume.

    Returns an array of shape ``(count, base_ambient_dim)``.
    """
    if count < 1:
        raise EmptyBatchError("count must be at least 1")
    rng = _rng(seed)
    r = manifold.radius
    if manifold.kind is ManifoldKind.CIRCLE:
        th = rng.uniform(0.0, 2 * np.pi, count)
        return r * np.column_stack([np.cos(th), np.sin(th)])
    if manifold.kind is ManifoldKind.SPHERE2:
        g = rng.standard_normal((count, 3))
        return r * g / np.linalg.norm(g, axis=1, keepdims=True)
    th = rng.uniform(0.0, 2 * np.pi, (count, 2))
    return r * np.column_stack(
        [np.cos(th[:, 0]), np.sin(th[:, 0]), np.cos(th[:, 1]), np.sin(th[:, 1])]
    )


def _angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between planar vectors, rowwise, in [0, pi]."""
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    return np.arctan2(np.abs(cross), dot)


def _geodesic_unchecked(manifold: Manifold, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = manifold.radius
    if manifold.kind is ManifoldKind.CIRCLE:
        return r * _angle(x, y)
    if manifold.kind is ManifoldKind.SPHERE2:
        c = np.linalg.norm(np.cross(x, y), axis=-1)
        return r * np.arctan2(c, np.sum(x * y, axis=-1))
    a1 = _angle(x[..., 0:2], y[..., 0:2])
    a2 = _angle(x[..., 2:4], y[..., 2:4])
    return r * np.hypot(a1, a2)


def geodesic_distance(manifold: Manifold, x, x_prime):
    """Closed-form geodesic distance; broadcasts over leading axes."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(x_prime, dtype=float)
    manifold.check_points(xa)
    manifold.check_points(ya)
    d = _geodesic_unchecked(manifold, xa, ya)
    return float(d) if np.ndim(d) == 0 else d


def pairwise_geodesic(manifold: Manifold, X: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Matrix of geodesic distances between rows of ``X`` and rows of ``P``."""
    return _geodesic_unchecked(manifold, X[:, None, :], P[None, :, :])


@dataclass(frozen=True, eq=False)
class HolderFunction:
    """Clamped min-plus combination of geodesic distance cones."""

    manifold: Manifold
    anchors: np.ndarray
    offsets: np.ndarray
    L: float
    alpha: float
    R: float

    def __post_init__(self):
        _check_holder_params(self.L, self.alpha, self.R)
        anchors = self.manifold.check_points(self.anchors).copy()
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1).copy()
        if offsets.shape[0] != anchors.shape[0] or anchors.shape[0] == 0:
            raise ParameterError("need one offset per anchor and at least one anchor")
        anchors.flags.writeable = False
        offsets.flags.writeable = False
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "offsets", offsets)

    def values(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on rows of ``x`` without the manifold check."""
        x = np.atleast_2d(x)
        out = np.empty(x.shape[0])
        step = max(1, 2**22 // self.anchors.shape[0])
        for s in range(0, x.shape[0], step):
            dist = pairwise_geodesic(self.manifold, x[s : s + step], self.anchors)
            cones = self.offsets[None, :] + self.L * dist**self.alpha
            out[s : s + step] = cones.min(axis=1)
        return np.clip(out, -self.R, self.R)

    def __call__(self, x):
        return eval_holder(self, x)


def _check_holder_params(L, alpha, R):
    if not (0 < alpha <= 1):
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if not L > 0:
        raise ParameterError(f"L must be positive, got {L}")
    if not R > 0:
        raise ParameterError(f"R must be positive, got {R}")


def make_holder_function(
    manifold: Manifold, L: float, alpha: float, R: float, num_anchors: int, seed
) -> HolderFunction:
    _check_holder_params(L, alpha, R)
    if num_anchors < 1:
        raise ParameterError("num_anchors must be at least 1")
    rng = _rng(seed)
    anchors = sample_uniform(manifold, num_anchors, rng)
    offsets = rng.uniform(-R, R, num_anchors)
    return HolderFunction(manifold, anchors, offsets, float(L), float(alpha), float(R))


def eval_holder(f: HolderFunction, x):
    """Value of ``f`` at one point (float) or at rows of a 2-D array."""
    pts = f.manifold.check_points(x)
    vals = f.values(pts)
    return float(vals[0]) if np.ndim(x) == 1 else vals


@dataclass(frozen=True)
class IsometricEmbedding:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] < m.shape[1]:
            raise ParameterError(f"embedding matrix must be tall, got shape {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def target_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def base_dim(self) -> int:
        return self.matrix.shape[1]


def make_embedding(base_dim: int, target_dim: int, seed=None) -> IsometricEmbedding:
    """Random orthonormal frame from the QR factor of a seeded Gaussian matrix.

    ``seed=None`` with ``target_dim == base_dim`` gives the identity.
    """
    if target_dim < base_dim:
        raise ParameterError(f"target_dim {target_dim} < base dimension {base_dim}")
    if seed is None:
        return IsometricEmbedding(np.eye(target_dim, base_dim))
    g = _rng(seed).standard_normal((target_dim, base_dim))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)[None, :]
    return IsometricEmbedding(q)


def embed_ambient(e: IsometricEmbedding, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != e.base_dim:
        raise ParameterError(f"point dimension {x.shape[-1]} != embedding base {e.base_dim}")
    return x @ e.matrix.T


@dataclass(frozen=True, eq=False)
class Prompt:
    xs: np.ndarray
    ys: np.ndarray
    hidden_label: float = field(default=float("nan"))

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float)
        ys = np.array(self.ys, dtype=float).reshape(-1)
        if xs.ndim != 2 or xs.shape[0] != ys.shape[0] + 1 or ys.shape[0] < 1:
            raise ParameterError(f"need n+1 points and n >= 1 labels, got {xs.shape} and {ys.shape}")
        xs.flags.writeable = False
        ys.flags.writeable = False
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "hidden_label", float(self.hidden_label))

    @property
    def n(self) -> int:
        return self.ys.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.xs.shape[1]

    @property
    def query(self) -> np.ndarray:
        return self.xs[-1]


def generate_task(
    manifold: Manifold, embedding: IsometricEmbedding, f: HolderFunction, n: int, seed
) -> Prompt:
    if n < 1:
        raise ParameterError("n must be at least 1")
    base = sample_uniform(manifold, n + 1, seed)
    labels = f.values(base)
    return Prompt(embed_ambient(embedding, base), labels[:n], labels[n])
