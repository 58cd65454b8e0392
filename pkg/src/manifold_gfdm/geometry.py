"""Analytic manifold families used for manufactured-solution studies.

Three families are supported:

* ``ellipse``   -- the curve (cos t, 2 sin t) in R^2, intrinsic dimension 1.
* ``torus``     -- the flat-ish general torus in R^(2q+1) with c0 = 2.
* ``semitorus`` -- half of the standard torus in R^3 (R=2, r=1), phi in [0, pi].

Each family knows how to embed intrinsic coordinates, build the embedding
Jacobian, and evaluate the exact Laplace-Beltrami operator of the supported
test fields. All functions are vectorised over the leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi

FAMILIES = ("ellipse", "torus", "semitorus")
FIELDS = ("sin_theta", "sin_theta_sin_phi", "constant")


class GeometryError(ValueError):
    """Raised for invalid manifold/field combinations or malformed input."""


@dataclass(frozen=True)
class ManifoldSpec:
    """Parameters of an analytic manifold family.

    Parameters
    ----------
    family : str
        One of ``"ellipse"``, ``"torus"`` or ``"semitorus"``.
    q : int
        Number of (cos, sin) pairs of the general torus; ignored otherwise.
    """

    family: str
    q: int = 4
    c0: float = 2.0
    R: float = 2.0
    r: float = 1.0
    semi_axes: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GeometryError(f"unknown manifold family {self.family!r}")
        if self.family == "torus":
            if int(self.q) != self.q or self.q < 1:
                raise GeometryError("general torus needs a positive integer q")
            if self.c0 <= 1.0:
                raise GeometryError("general torus needs c0 > 1")
        if self.family == "semitorus" and not self.r < self.R:
            raise GeometryError("semi-torus needs r < R")

    @classmethod
    def ellipse(cls) -> "ManifoldSpec":
        return cls("ellipse")

    @classmethod
    def torus(cls, q: int = 4) -> "ManifoldSpec":
        return cls("torus", q=q)

    @classmethod
    def semitorus(cls) -> "ManifoldSpec":
        return cls("semitorus")

    @property
    def n(self) -> int:
        """Ambient dimension."""
        return {"ellipse": 2, "torus": 2 * self.q + 1, "semitorus": 3}[self.family]

    @property
    def d(self) -> int:
        """Intrinsic dimension."""
        return 1 if self.family == "ellipse" else 2

    @property
    def has_boundary(self) -> bool:
        return self.family == "semitorus"

    @property
    def _torus_s2(self) -> float:
        return sum(1.0 / i**2 for i in range(1, self.q + 1))

    def label(self) -> str:
        if self.family == "torus":
            return f"torus(q={self.q})"
        return self.family

    # -- embedding ---------------------------------------------------------

    def embed(self, intrinsic) -> np.ndarray:
        """Map intrinsic coordinates of shape (N, d) to ambient rows (N, n)."""
        t = _as_intrinsic(intrinsic, self.d)
        th = t[:, 0]
        if self.family == "ellipse":
            a, b = self.semi_axes
            return np.column_stack([a * np.cos(th), b * np.sin(th)])
        ph = t[:, 1]
        if self.family == "torus":
            rad = self.c0 + np.cos(th)
            cols = []
            for i in range(1, self.q + 1):
                cols.append(rad * np.cos(i * ph) / i)
                cols.append(rad * np.sin(i * ph) / i)
            cols.append(math.sqrt(self._torus_s2) * np.sin(th))
            return np.column_stack(cols)
        rad = self.R + self.r * np.cos(th)
        return np.column_stack([rad * np.cos(ph), rad * np.sin(ph), self.r * np.sin(th)])

    def jacobian(self, intrinsic) -> np.ndarray:
        """Embedding Jacobian, shape (N, n, d); column j is d x / d(intrinsic_j)."""
        t = _as_intrinsic(intrinsic, self.d)
        th = t[:, 0]
        N = t.shape[0]
        J = np.zeros((N, self.n, self.d))
        if self.family == "ellipse":
            a, b = self.semi_axes
            J[:, 0, 0] = -a * np.sin(th)
            J[:, 1, 0] = b * np.cos(th)
            return J
        ph = t[:, 1]
        if self.family == "torus":
            rad = self.c0 + np.cos(th)
            for i in range(1, self.q + 1):
                J[:, 2 * i - 2, 0] = -np.sin(th) * np.cos(i * ph) / i
                J[:, 2 * i - 1, 0] = -np.sin(th) * np.sin(i * ph) / i
                J[:, 2 * i - 2, 1] = -rad * np.sin(i * ph)
                J[:, 2 * i - 1, 1] = rad * np.cos(i * ph)
            J[:, -1, 0] = math.sqrt(self._torus_s2) * np.cos(th)
            return J
        rad = self.R + self.r * np.cos(th)
        J[:, 0, 0] = -self.r * np.sin(th) * np.cos(ph)
        J[:, 1, 0] = -self.r * np.sin(th) * np.sin(ph)
        J[:, 2, 0] = self.r * np.cos(th)
        J[:, 0, 1] = -rad * np.sin(ph)
        J[:, 1, 1] = rad * np.cos(ph)
        return J

    def metric_diagonal(self, intrinsic) -> np.ndarray:
        """Diagonal of the induced metric (all three families are orthogonal)."""
        t = _as_intrinsic(intrinsic, self.d)
        th = t[:, 0]
        if self.family == "ellipse":
            a, b = self.semi_axes
            return ((a * np.sin(th)) ** 2 + (b * np.cos(th)) ** 2)[:, None]
        if self.family == "torus":
            g11 = np.full_like(th, self._torus_s2)
            return np.column_stack([g11, self.q * (self.c0 + np.cos(th)) ** 2])
        g11 = np.full_like(th, self.r**2)
        return np.column_stack([g11, (self.R + self.r * np.cos(th)) ** 2])

    def sample_parameters(self, N: int, rng: np.random.Generator) -> np.ndarray:
        """Draw N i.i.d. uniform points of the parameter domain."""
        th = rng.uniform(0.0, TWO_PI, N)
        if self.d == 1:
            return th[:, None]
        if self.family == "torus":
            ph = rng.uniform(0.0, TWO_PI, N)
        else:
            # closed upper end [0, pi]; the endpoints have probability zero
            ph = rng.uniform(0.0, math.pi, N)
        return np.column_stack([th, ph])


@dataclass(frozen=True)
class FieldSpec:
    """Manufactured test field.

    ``sin_theta`` is u = sin(theta), ``sin_theta_sin_phi`` is
    u = sin(theta) sin(phi) and ``constant`` is u = value.
    """

    tag: str
    value: float = 0.0

    def __post_init__(self):
        if self.tag not in FIELDS:
            raise GeometryError(f"unknown field {self.tag!r}")

    @classmethod
    def for_manifold(cls, spec: ManifoldSpec) -> "FieldSpec":
        """The field used by the reference experiments on ``spec``."""
        return cls("sin_theta") if spec.d == 1 else cls("sin_theta_sin_phi")

    def check_compatible(self, spec: ManifoldSpec):
        if self.tag == "sin_theta_sin_phi" and spec.d != 2:
            raise GeometryError("sin(theta) sin(phi) needs a two-dimensional manifold")

    def evaluate(self, spec: ManifoldSpec, intrinsic) -> np.ndarray:
        self.check_compatible(spec)
        t = _as_intrinsic(intrinsic, spec.d)
        if self.tag == "constant":
            return np.full(t.shape[0], float(self.value))
        if self.tag == "sin_theta":
            return np.sin(t[:, 0])
        return np.sin(t[:, 0]) * np.sin(t[:, 1])


@dataclass
class PointCloud:
    """A sampled point set X on a manifold.

    ``intrinsic`` is an (N, 0) array when the cloud came from a file.
    """

    ambient: np.ndarray
    intrinsic: np.ndarray
    spec: ManifoldSpec | None = None
    seed: int | None = None
    d: int | None = None
    boundary_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ambient = np.ascontiguousarray(self.ambient, dtype=float)
        if self.ambient.ndim != 2:
            raise GeometryError("ambient coordinates must be an (N, n) array")
        if self.d is None:
            self.d = self.spec.d if self.spec is not None else None

    @property
    def N(self) -> int:
        return self.ambient.shape[0]

    @property
    def n(self) -> int:
        return self.ambient.shape[1]

    @property
    def has_intrinsic(self) -> bool:
        return self.intrinsic.size > 0

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        intr = self.intrinsic[idx] if self.has_intrinsic else self.intrinsic
        bm = None if self.boundary_mask is None else self.boundary_mask[idx]
        return PointCloud(self.ambient[idx], intr, self.spec, self.seed, self.d, bm)


def _as_intrinsic(intrinsic, d: int) -> np.ndarray:
    t = np.asarray(intrinsic, dtype=float)
    if t.ndim == 1:
        t = t.reshape(-1, d) if d > 1 else t[:, None]
    if t.ndim != 2 or t.shape[1] != d:
        raise GeometryError(f"intrinsic coordinates must have {d} columns")
    return t


def sample_manifold(spec: ManifoldSpec, N: int, seed: int) -> PointCloud:
    """Sample ``N`` points uniformly in the intrinsic parameter domain."""
    if N < 1:
        raise GeometryError("N must be positive")
    rng = np.random.default_rng(seed)
    intrinsic = spec.sample_parameters(N, rng)
    return PointCloud(spec.embed(intrinsic), intrinsic, spec, seed)


def sample_boundary(spec: ManifoldSpec, count: int, seed: int) -> PointCloud:
    """Sample ``count`` points on each boundary circle of the semi-torus.

    The boundary circles phi = 0 and phi = pi are sampled uniformly in theta.
    """
    if not spec.has_boundary:
        raise GeometryError(f"{spec.label()} has no boundary")
    rng = np.random.default_rng(seed)
    th = rng.uniform(0.0, TWO_PI, 2 * count)
    ph = np.concatenate([np.zeros(count), np.full(count, math.pi)])
    intrinsic = np.column_stack([th, ph])
    return PointCloud(spec.embed(intrinsic), intrinsic, spec, seed,
                      boundary_mask=np.ones(2 * count, dtype=bool))


def concat_clouds(interior: PointCloud, boundary: PointCloud) -> PointCloud:
    """Stack an interior cloud and a boundary cloud, marking boundary rows."""
    mask = np.concatenate([np.zeros(interior.N, bool), np.ones(boundary.N, bool)])
    return PointCloud(
        np.vstack([interior.ambient, boundary.ambient]),
        np.vstack([interior.intrinsic, boundary.intrinsic]),
        interior.spec, interior.seed, interior.d, mask,
    )


def analytic_frame(spec: ManifoldSpec, intrinsic) -> np.ndarray:
    """Orthonormal tangent vectors, shape (N, n, d) (or (n, d) for one point).

    The columns of the embedding Jacobian are orthogonal for every supported
    family, so normalising them is enough; a Gram-Schmidt step is still
    applied to the second column to absorb rounding.
    """
    t = np.asarray(intrinsic, dtype=float)
    single = t.ndim == 1 and t.size == spec.d
    J = spec.jacobian(t.reshape(1, -1) if single else t)
    T = np.empty_like(J)
    T[:, :, 0] = J[:, :, 0] / np.linalg.norm(J[:, :, 0], axis=1, keepdims=True)
    if spec.d == 2:
        v = J[:, :, 1] - np.sum(J[:, :, 1] * T[:, :, 0], axis=1, keepdims=True) * T[:, :, 0]
        T[:, :, 1] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return T[0] if single else T


def analytic_laplacian(spec: ManifoldSpec, field: FieldSpec, intrinsic) -> np.ndarray:
    """Exact Laplace-Beltrami (negative semi-definite) of ``field`` at the given points."""
    field.check_compatible(spec)
    t = np.asarray(intrinsic, dtype=float)
    scalar = t.ndim == 0 or (t.ndim == 1 and t.size == spec.d)
    t = _as_intrinsic(t.reshape(1, -1) if scalar else t, spec.d)
    th = t[:, 0]
    if field.tag == "constant":
        out = np.zeros(t.shape[0])
    elif spec.family == "ellipse":
        # u = sin(t), g = a^2 sin^2 + b^2 cos^2
        a, b = spec.semi_axes
        g = (a * np.sin(th)) ** 2 + (b * np.cos(th)) ** 2
        dg = 2.0 * (a**2 - b**2) * np.sin(th) * np.cos(th)
        out = -np.sin(th) / g - 0.5 * np.cos(th) * dg / g**2
    elif field.tag == "sin_theta":
        out = _sin_theta_2d(spec, th)
    else:
        ph = t[:, 1]
        if spec.family == "torus":
            s2 = spec._torus_s2
            c = spec.c0 + np.cos(th)
            out = -np.sin(th) * np.sin(ph) * ((np.cos(th) + c) / (s2 * c) + 1.0 / (spec.q * c**2))
        else:
            R, r = spec.R, spec.r
            c = R + r * np.cos(th)
            out = (np.sin(ph) * (-r * np.sin(th) * np.cos(th) - c * np.sin(th)) / (r**2 * c)
                   - np.sin(ph) * np.sin(th) / c**2)
    return out[0] if scalar else out


def _sin_theta_2d(spec: ManifoldSpec, th):
    # u = sin(theta) on a surface of revolution: only the theta flux term survives
    if spec.family == "torus":
        c = spec.c0 + np.cos(th)
        return (-np.sin(th) * np.cos(th) - c * np.sin(th)) / (spec._torus_s2 * c)
    c = spec.R + spec.r * np.cos(th)
    return (-spec.r * np.sin(th) * np.cos(th) - c * np.sin(th)) / (spec.r**2 * c)


def boundary_distance(spec: ManifoldSpec, intrinsic) -> np.ndarray:
    """First-order geodesic distance to the semi-torus boundary {phi = 0, pi}.

    Returns (R + r cos theta) * min(phi, pi - phi). Only accurate for points
    within a few stencil radii of the boundary, which is where it is used.
    """
    if not spec.has_boundary:
        raise GeometryError(f"{spec.label()} is closed; no boundary distance")
    t = np.asarray(intrinsic, dtype=float)
    scalar = t.ndim == 1 and t.size == 2
    t = t.reshape(-1, 2)
    ph = t[:, 1]
    dist = (spec.R + spec.r * np.cos(t[:, 0])) * np.minimum(ph, math.pi - ph)
    return dist[0] if scalar else dist


# -- XYZ ingestion -----------------------------------------------------------


def load_xyz(path, d: int) -> PointCloud:
    """Read whitespace-separated ambient rows; ``#`` lines are comments.

    Raises
    ------
    GeometryError
        On ragged rows, non-numeric entries or duplicate points.
    """
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise GeometryError(
                    f"{path}:{lineno}: expected {width} columns, found {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise GeometryError(f"{path}: no points")
    ambient = np.array(rows)
    dup = find_duplicates(ambient)
    if dup is not None:
        i, j = dup
        raise GeometryError(f"{path}: duplicate points at rows {i} and {j}")
    return PointCloud(ambient, np.empty((ambient.shape[0], 0)), None, None, d)


def save_xyz(path, cloud_or_array, header: str | None = None):
    """Write ambient rows with 17 significant digits (lossless round trip)."""
    X = cloud_or_array.ambient if isinstance(cloud_or_array, PointCloud) else np.asarray(cloud_or_array)
    with open(Path(path), "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for row in X:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def find_duplicates(X: np.ndarray):
    """Return the first pair (i, j), i < j, of identical rows, or None."""
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    same = np.all(Xs[1:] == Xs[:-1], axis=1)
    if not same.any():
        return None
    k = int(np.argmax(same))
    i, j = sorted((int(order[k]), int(order[k + 1])))
    return i, j
