"""Space-time fields on uniform grids over the unit torus or a box.

A field holds values of a (possibly vector-valued) function of (t, x) on a
uniform time grid and a uniform spatial grid. Spatial layout is row-major
over the axes with components innermost, so ``values`` has shape
``(M + 1, n**d, c)``. On the torus the period is exactly 1.0 in every axis
and grid nodes sit at i/n (no duplicated endpoint); on a box the nodes are
endpoint-inclusive.

The module also provides the canonical multilinear interpolation routine
shared by every particle path engine in the package. Its floating-point
operation order is fixed (see `interp_grid`): the compiled kernel mirrors it
exactly so that backends produce byte-identical trajectories.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field as dataclass_field

import numpy as np

__all__ = [
    "DomainDescriptor",
    "SpaceTimeField",
    "FieldNormReport",
    "periodic_wrap",
    "grid_nodes",
    "interp_grid",
    "interp_torus",
    "subsample_field",
    "gradient_values",
    "laplacian_values",
    "divergence_values",
    "write_fdns1",
    "read_fdns1",
]


TORUS = "Torus"
FREESPACE = "FreeSpace"


@dataclass(frozen=True)
class DomainDescriptor:
    """Spatial domain: the unit torus or an axis-aligned box.

    Attributes:
        kind: "Torus" or "FreeSpace".
        dim: spatial dimension (1, 2 or 3).
        lo, hi: box corners, only meaningful for FreeSpace. Defaults [0,1]^d.
    """

    kind: str
    dim: int
    lo: tuple = dataclass_field(default=None)
    hi: tuple = dataclass_field(default=None)

    def __post_init__(self):
        if self.kind not in (TORUS, FREESPACE):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dim}")
        if self.kind == FREESPACE:
            lo = self.lo if self.lo is not None else (0.0,) * self.dim
            hi = self.hi if self.hi is not None else (1.0,) * self.dim
            object.__setattr__(self, "lo", tuple(float(v) for v in lo))
            object.__setattr__(self, "hi", tuple(float(v) for v in hi))
            if len(self.lo) != self.dim or len(self.hi) != self.dim:
                raise ValueError("box corners must match dimension")
            if any(h <= l for l, h in zip(self.lo, self.hi)):
                raise ValueError("box must have positive extent")
        else:
            object.__setattr__(self, "lo", None)
            object.__setattr__(self, "hi", None)

    @property
    def is_torus(self) -> bool:
        return self.kind == TORUS

    @staticmethod
    def torus(dim: int) -> "DomainDescriptor":
        return DomainDescriptor(TORUS, dim)

    @staticmethod
    def box(dim: int, lo=None, hi=None) -> "DomainDescriptor":
        return DomainDescriptor(FREESPACE, dim, lo, hi)


def periodic_wrap(x: np.ndarray) -> np.ndarray:
    """Map positions into the fundamental cell [0, 1)^d.

    Uses x - floor(x), which is exact in IEEE arithmetic and maps integers
    to exactly 0.0.
    """
    x = np.asarray(x, dtype=np.float64)
    return x - np.floor(x)


def grid_nodes(domain: DomainDescriptor, n: int) -> np.ndarray:
    """Coordinates of the n**d grid nodes, shape (n**d, d), row-major.

    Torus nodes are i/n in [0, 1); box nodes are endpoint-inclusive
    linspace(lo, hi, n) per axis.
    """
    d = domain.dim
    if domain.is_torus:
        axes = [np.arange(n, dtype=np.float64) / n for _ in range(d)]
    else:
        axes = [np.linspace(domain.lo[k], domain.hi[k], n) for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _cells_and_fracs(domain: DomainDescriptor, n: int, x: np.ndarray):
    """Cell indices and fractional offsets for multilinear interpolation.

    Returns (c0, c1, f): lower cell index, upper neighbour index and the
    fractional coordinate per axis, each of shape (B, d). On the torus the
    neighbour wraps; on a box the cell is clamped to [0, n-2] so points
    outside the box are linearly extrapolated from the boundary cell.
    """
    if domain.is_torus:
        u = x - np.floor(x)
        g = u * n
        c0 = g.astype(np.int64)
        np.minimum(c0, n - 1, out=c0)  # u*n can round up to n
        f = g - c0
        c1 = c0 + 1
        c1[c1 == n] = 0
    else:
        lo = np.asarray(domain.lo)
        hi = np.asarray(domain.hi)
        g = (x - lo) / (hi - lo) * (n - 1)
        c0 = np.floor(g).astype(np.int64)
        np.clip(c0, 0, n - 2, out=c0)
        f = g - c0
        c1 = c0 + 1
    return c0, c1, f


def interp_grid(row: np.ndarray, domain: DomainDescriptor, n: int,
                x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of one time-slice at positions x.

    Args:
        row: values on the spatial grid, shape (n**d, c).
        domain: spatial domain descriptor.
        n: grid points per axis.
        x: query positions, shape (B, d). Torus positions may be unwrapped.

    Returns:
        Interpolated values, shape (B, c).

    The combination is the canonical nested-lerp tree and must not be
    changed: per axis ``lerp(a, b, f) = a + f*(b - a)``, applied axis 0
    first, e.g. for d = 2 ``lerp(lerp(F00, F10, fx), lerp(F01, F11, fx),
    fy)``. This form reproduces constant fields bitwise and keeps every
    value inside the stencil min/max (rounding is monotone on each lerp).
    The compiled kernel replicates the order for byte-identical results.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = domain.dim
    c0, c1, f = _cells_and_fracs(domain, n, x)
    return _combine_corners(row, n, d, c0, c1, f)


def interp_torus(row: np.ndarray, n: int, x: np.ndarray) -> np.ndarray:
    """Torus-only multilinear interpolation; canonical op order, see interp_grid."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    u = x - np.floor(x)
    g = u * n
    c0 = g.astype(np.int64)
    np.minimum(c0, n - 1, out=c0)
    f = g - c0
    c1 = c0 + 1
    c1[c1 == n] = 0
    return _combine_corners(row, n, d, c0, c1, f)


def _lerp(a, b, f):
    return a + f * (b - a)


def _combine_corners(row, n, d, c0, c1, f):
    if d == 1:
        f0 = f[:, 0:1]
        return _lerp(row[c0[:, 0]], row[c1[:, 0]], f0)
    if d == 2:
        fx, fy = f[:, 0:1], f[:, 1:2]
        i0, i1 = c0[:, 0], c1[:, 0]
        j0, j1 = c0[:, 1], c1[:, 1]
        lo = _lerp(row[i0 * n + j0], row[i1 * n + j0], fx)
        hi = _lerp(row[i0 * n + j1], row[i1 * n + j1], fx)
        return _lerp(lo, hi, fy)
    # d == 3
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    ix = (c0[:, 0], c1[:, 0])
    iy = (c0[:, 1], c1[:, 1])
    iz = (c0[:, 2], c1[:, 2])

    def corner(a, b, g_):
        return row[(ix[a] * n + iy[b]) * n + iz[g_]]

    planes = []
    for g_ in (0, 1):
        lo = _lerp(corner(0, 0, g_), corner(1, 0, g_), fx)
        hi = _lerp(corner(0, 1, g_), corner(1, 1, g_), fx)
        planes.append(_lerp(lo, hi, fy))
    return _lerp(planes[0], planes[1], fz)


# ---------------------------------------------------------------------------
# finite-difference operators on grid values


def _as_mesh(values: np.ndarray, n: int, d: int) -> np.ndarray:
    """View (T, n**d, c) values as (T, n, ..., n, c)."""
    T, _, c = values.shape
    return values.reshape((T,) + (n,) * d + (c,))


def _spacing(domain: DomainDescriptor, n: int) -> np.ndarray:
    if domain.is_torus:
        return np.full(domain.dim, 1.0 / n)
    lo = np.asarray(domain.lo)
    hi = np.asarray(domain.hi)
    return (hi - lo) / (n - 1)


def _shift(mesh: np.ndarray, axis: int, offset: int, torus: bool) -> np.ndarray:
    """Shifted copy of the mesh along a spatial axis.

    On the torus this is a periodic roll. On a box, boundary slots where the
    stencil would leave the grid are filled by replicating the nearest valid
    value; derivative output at those nodes is therefore one-sided in effect
    and only interior nodes carry second-order accuracy.
    """
    ax = axis + 1  # axis 0 is time
    if torus:
        return np.roll(mesh, -offset, axis=ax)
    shifted = np.empty_like(mesh)
    n = mesh.shape[ax]
    src = np.clip(np.arange(n) + offset, 0, n - 1)
    idx = [slice(None)] * mesh.ndim
    idx[ax] = src
    shifted[...] = mesh[tuple(idx)]
    return shifted


def gradient_values(values: np.ndarray, domain: DomainDescriptor, n: int,
                    order: int = 2) -> np.ndarray:
    """Centered finite-difference spatial gradient.

    Args:
        values: (T, n**d, c) grid values.
        order: 2 (default) or 4; stencil accuracy.

    Returns:
        (T, n**d, d, c) array; entry [..., i, j] approximates d u^j / d x_i.
    """
    d = domain.dim
    h = _spacing(domain, n)
    mesh = _as_mesh(values, n, d)
    out = np.empty(values.shape[:2] + (d,) + values.shape[2:], dtype=np.float64)
    for ax in range(d):
        if order == 2:
            der = (_shift(mesh, ax, 1, domain.is_torus)
                   - _shift(mesh, ax, -1, domain.is_torus)) / (2.0 * h[ax])
        elif order == 4:
            der = (-_shift(mesh, ax, 2, domain.is_torus)
                   + 8.0 * _shift(mesh, ax, 1, domain.is_torus)
                   - 8.0 * _shift(mesh, ax, -1, domain.is_torus)
                   + _shift(mesh, ax, -2, domain.is_torus)) / (12.0 * h[ax])
        else:
            raise ValueError("order must be 2 or 4")
        out[:, :, ax, :] = der.reshape(values.shape)
    return out


def laplacian_values(values: np.ndarray, domain: DomainDescriptor, n: int,
                     order: int = 2) -> np.ndarray:
    """Centered finite-difference Laplacian, shape (T, n**d, c)."""
    d = domain.dim
    h = _spacing(domain, n)
    mesh = _as_mesh(values, n, d)
    acc = np.zeros_like(values)
    for ax in range(d):
        if order == 2:
            term = (_shift(mesh, ax, 1, domain.is_torus)
                    - 2.0 * mesh
                    + _shift(mesh, ax, -1, domain.is_torus)) / (h[ax] * h[ax])
        elif order == 4:
            term = (-_shift(mesh, ax, 2, domain.is_torus)
                    + 16.0 * _shift(mesh, ax, 1, domain.is_torus)
                    - 30.0 * mesh
                    + 16.0 * _shift(mesh, ax, -1, domain.is_torus)
                    - _shift(mesh, ax, -2, domain.is_torus)) / (12.0 * h[ax] * h[ax])
        else:
            raise ValueError("order must be 2 or 4")
        acc += term.reshape(values.shape)
    return acc


def divergence_values(values: np.ndarray, domain: DomainDescriptor, n: int,
                      order: int = 2) -> np.ndarray:
    """Finite-difference divergence of a vector field (c must equal d).

    Returns (T, n**d) array.
    """
    d = domain.dim
    if values.shape[2] != d:
        raise ValueError("divergence needs as many components as axes")
    grad = gradient_values(values, domain, n, order=order)
    out = grad[:, :, 0, 0].copy()
    for ax in range(1, d):
        out += grad[:, :, ax, ax]
    return out


@dataclass
class FieldNormReport:
    """Sup-norm profile of a field over its grid.

    Maxima are taken over grid nodes (a lower bound for the continuum sup);
    pointwise magnitude is the Euclidean norm across components, gradient
    magnitude the Frobenius norm of the d x c Jacobian at a node.
    """

    sup_norm: float
    grad_sup_norm: float
    divergence_sup_norm: float | None
    sup_profile: np.ndarray        # (M+1,)
    grad_profile: np.ndarray       # (M+1,)
    divergence_profile: np.ndarray | None


class SpaceTimeField:
    """Grid samples of a function of (t, x) with multilinear evaluation.

    Attributes:
        domain: DomainDescriptor.
        times: (M + 1,) strictly increasing, uniform.
        n: grid points per axis.
        values: (M + 1, n**d, c) float64, C-contiguous.
    """

    def __init__(self, domain: DomainDescriptor, times: np.ndarray, n: int,
                 values: np.ndarray):
        times = np.asarray(times, dtype=np.float64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("need at least two time nodes")
        if values.ndim != 3:
            raise ValueError("values must have shape (M+1, n**d, c)")
        if values.shape[0] != times.size:
            raise ValueError("time axis mismatch")
        if values.shape[1] != n ** domain.dim:
            raise ValueError("spatial axis must have n**d nodes")
        dt = np.diff(times)
        if not np.allclose(dt, dt[0], rtol=1e-12, atol=1e-15):
            raise ValueError("time grid must be uniform")
        self.domain = domain
        self.times = times
        self.n = int(n)
        self.values = values

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zeros(domain: DomainDescriptor, times, n: int, c: int) -> "SpaceTimeField":
        times = np.asarray(times, dtype=np.float64)
        return SpaceTimeField(domain, times, n,
                              np.zeros((times.size, n ** domain.dim, c)))

    @staticmethod
    def from_callable(domain: DomainDescriptor, times, n: int, fn,
                      c: int | None = None) -> "SpaceTimeField":
        """Rasterize fn(t, nodes) -> (n**d, c) on the grid."""
        times = np.asarray(times, dtype=np.float64)
        nodes = grid_nodes(domain, n)
        first = np.asarray(fn(float(times[0]), nodes), dtype=np.float64)
        if first.ndim == 1:
            first = first[:, None]
        c = first.shape[1] if c is None else c
        values = np.empty((times.size, n ** domain.dim, c))
        values[0] = first
        for m in range(1, times.size):
            row = np.asarray(fn(float(times[m]), nodes), dtype=np.float64)
            values[m] = row[:, None] if row.ndim == 1 else row
        return SpaceTimeField(domain, times, n, values)

    # -- basic properties ----------------------------------------------------

    @property
    def c(self) -> int:
        return self.values.shape[2]

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def copy(self) -> "SpaceTimeField":
        return SpaceTimeField(self.domain, self.times.copy(), self.n,
                              self.values.copy())

    def nodes(self) -> np.ndarray:
        return grid_nodes(self.domain, self.n)

    # -- evaluation ----------------------------------------------------------

    def time_cell(self, t: float):
        """Index k and weight w with t = (1-w)*times[k] + w*times[k+1]."""
        m = self.times.size - 1
        span = self.times[-1] - self.times[0]
        if t < self.t0 - 1e-12 * max(1.0, abs(span)) or \
           t > self.t1 + 1e-12 * max(1.0, abs(span)):
            raise ValueError(f"time {t} outside field range [{self.t0}, {self.t1}]")
        g = (t - self.t0) / self.dt
        k = int(min(max(np.floor(g), 0), m - 1))
        w = g - k
        return k, w

    def interp(self, t: float, x: np.ndarray) -> np.ndarray:
        """Evaluate at time t and positions x.

        x has shape (..., d); returns (..., c). Linear in time between the
        two bracketing slices, multilinear in space.
        """
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        pts = x.reshape(-1, self.domain.dim)
        k, w = self.time_cell(float(t))
        v0 = interp_grid(self.values[k], self.domain, self.n, pts)
        if w == 0.0:
            out = v0
        else:
            v1 = interp_grid(self.values[k + 1], self.domain, self.n, pts)
            out = _lerp(v0, v1, w)
        return out.reshape(lead + (self.c,))

    # -- calculus -------------------------------------------------------------

    def gradient(self, order: int = 2) -> np.ndarray:
        return gradient_values(self.values, self.domain, self.n, order=order)

    def laplacian(self, order: int = 2) -> np.ndarray:
        return laplacian_values(self.values, self.domain, self.n, order=order)

    def divergence(self, order: int = 2) -> np.ndarray:
        return divergence_values(self.values, self.domain, self.n, order=order)

    def norm_report(self) -> FieldNormReport:
        mag = np.sqrt(np.sum(self.values ** 2, axis=2))
        sup_profile = mag.max(axis=1)
        grad = self.gradient()
        gmag = np.sqrt(np.sum(grad ** 2, axis=(2, 3)))
        grad_profile = gmag.max(axis=1)
        if self.c == self.domain.dim:
            div = np.abs(self.divergence())
            div_profile = div.max(axis=1)
            div_sup = float(div_profile.max())
        else:
            div_profile = None
            div_sup = None
        return FieldNormReport(
            sup_norm=float(sup_profile.max()),
            grad_sup_norm=float(grad_profile.max()),
            divergence_sup_norm=div_sup,
            sup_profile=sup_profile,
            grad_profile=grad_profile,
            divergence_profile=div_profile,
        )


def subsample_field(field: SpaceTimeField, n_out: int, m_out: int | None = None
                    ) -> SpaceTimeField:
    """Restrict a field to a coarser nested grid.

    n_out must divide field.n (torus) and m_out must divide the number of
    time intervals; the coarse nodes then coincide exactly with fine nodes,
    so no interpolation happens.
    """
    if not field.domain.is_torus:
        raise ValueError("subsampling is defined for torus grids")
    n, d = field.n, field.domain.dim
    M = field.times.size - 1
    m_out = M if m_out is None else m_out
    if n % n_out or M % m_out:
        raise ValueError("output grid must nest inside the field grid")
    sn, sm = n // n_out, M // m_out
    mesh = _as_mesh(field.values, n, d)
    sl = (slice(None, None, sm),) + (slice(None, None, sn),) * d + (slice(None),)
    vals = mesh[sl].reshape(m_out + 1, n_out ** d, field.c)
    return SpaceTimeField(field.domain, field.times[::sm], n_out, vals)


# ---------------------------------------------------------------------------
# FDNS1 dump format


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_fdns1(field: SpaceTimeField, path_or_buf) -> None:
    """Write a field as FDNS1 ASCII.

    Line 1: ``FDNS1 <kind> <d> <c> <n> <M> <T>``; then one CSV row per
    (time node, grid node): ``t,x1..xd,v1..vc``. All floats use 17
    significant digits, which round-trips IEEE doubles exactly.
    """
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w") if own else path_or_buf
    try:
        M = field.times.size - 1
        fh.write(f"FDNS1 {field.domain.kind} {field.domain.dim} {field.c} "
                 f"{field.n} {M} {_fmt(field.t1 - field.t0)}\n")
        nodes = field.nodes()
        for m, t in enumerate(field.times):
            ts = _fmt(t)
            for g in range(nodes.shape[0]):
                coords = ",".join(_fmt(v) for v in nodes[g])
                vals = ",".join(_fmt(v) for v in field.values[m, g])
                fh.write(f"{ts},{coords},{vals}\n")
    finally:
        if own:
            fh.close()


def read_fdns1(path_or_buf) -> SpaceTimeField:
    """Read a field written by `write_fdns1` (bit-exact round trip)."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "r") if own else path_or_buf
    try:
        header = fh.readline().split()
        if len(header) != 7 or header[0] != "FDNS1":
            raise ValueError("not an FDNS1 stream")
        kind = header[1]
        d, c, n, M = (int(v) for v in header[2:6])
        body = np.loadtxt(io.StringIO(fh.read()), delimiter=",", ndmin=2)
    finally:
        if own:
            fh.close()
    nn = n ** d
    rows = (M + 1) * nn
    if body.shape != (rows, 1 + d + c):
        raise ValueError(f"FDNS1 body has shape {body.shape}, "
                         f"expected {(rows, 1 + d + c)}")
    times = body[::nn, 0].copy()
    values = body[:, 1 + d:].reshape(M + 1, nn, c).copy()
    if kind == TORUS:
        domain = DomainDescriptor.torus(d)
    else:
        lo = tuple(body[0, 1 + k] for k in range(d))
        hi = tuple(body[nn - 1, 1 + k] for k in range(d))
        domain = DomainDescriptor.box(d, lo, hi)
    return SpaceTimeField(domain, times, n, values)
