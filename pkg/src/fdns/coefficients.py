"""Problem coefficients: diffusion, base drift, initial velocity, forcing.

A `CoefficientSet` bundles everything the particle engine needs about one
problem instance. Evaluators take positions of shape (B, d); on the torus
every public evaluation wraps positions into [0, 1)^d first, which makes
periodicity exact: f(x + k) and f(x) see bit-identical arguments for any
integer shift k.

Diffusion comes in three flavors, from cheap to general: ``a = kappa * I``
(scalar noise), a constant SPD matrix, or a callable a(t, x). The fused
fixed-point solver requires one of the first two; the generic path engine
accepts all three.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .fields import DomainDescriptor, grid_nodes, periodic_wrap
from .oracles import heat_sine, taylor_green_force, taylor_green_pressure, taylor_green_u

__all__ = [
    "CoefficientSet",
    "CoefficientReport",
    "sqrt_2a",
    "coefficient_set_for",
    "validate_coefficients",
]


def sqrt_2a(a: np.ndarray) -> np.ndarray:
    """Symmetric positive-definite square root of 2a.

    Args:
        a: (..., d, d) symmetric positive-definite matrices.

    Returns:
        sigma with sigma @ sigma = 2a, symmetric, same shape.

    Raises:
        ValueError if a is not symmetric or not positive definite, or if the
        reconstruction error exceeds 1e-12 relative Frobenius norm.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("diffusion matrix must be square")
    sym_err = np.max(np.abs(a - np.swapaxes(a, -1, -2)))
    if sym_err > 1e-12 * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError(f"diffusion matrix not symmetric (max asymmetry {sym_err:.3e})")
    w, v = np.linalg.eigh(2.0 * a)
    if np.min(w) <= 0.0:
        raise ValueError(f"2a must be positive definite, min eigenvalue {np.min(w):.3e}")
    root = (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)
    err = np.linalg.norm(root @ root - 2.0 * a, axis=(-2, -1))
    ref = np.linalg.norm(2.0 * a, axis=(-2, -1))
    if np.max(err / np.maximum(ref, 1e-300)) > 1e-12:
        raise ValueError("matrix square root failed its reconstruction check")
    return root


@dataclass
class CoefficientSet:
    """One problem instance.

    Attributes:
        domain: spatial domain.
        T: horizon.
        kappa: scalar diffusion strength when `a_matrix` and `a_fn` are None.
        u0: callable (B, d) -> (B, d), terminal/initial velocity data.
        b: optional callable (t, (B, d)) -> (B, d), base drift.
        V: optional callable (t, (B, d)) -> (B, d), forcing (for the flow
            problems this is minus the pressure gradient).
        pressure: optional callable (t, (B, d)) -> (B,).
        a_matrix: optional constant SPD diffusion matrix (d, d).
        a_fn: optional callable (t, (B, d)) -> (B, d, d).
        name: preset label.
        sup_u0 / sup_b / int_sup_V: analytic bounds when known (else None).
    """

    domain: DomainDescriptor
    T: float
    kappa: float
    u0: object
    b: object = None
    V: object = None
    pressure: object = None
    a_matrix: np.ndarray = None
    a_fn: object = None
    name: str = "custom"
    sup_u0: float = None
    sup_b: float = None
    int_sup_V: float = None

    def __post_init__(self):
        if self.a_matrix is not None and self.a_fn is not None:
            raise ValueError("give at most one of a_matrix and a_fn")
        if self.a_matrix is not None:
            self.a_matrix = np.asarray(self.a_matrix, dtype=np.float64)
            self._sigma_const = sqrt_2a(self.a_matrix)
        elif self.a_fn is None:
            if not self.kappa > 0:
                raise ValueError("kappa must be positive")
            self._sigma_const = None

    # -- position canonicalization ------------------------------------------

    def _canon(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return periodic_wrap(x) if self.domain.is_torus else x

    # -- evaluation ----------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def is_kappa_identity(self) -> bool:
        return self.a_matrix is None and self.a_fn is None

    @property
    def has_constant_diffusion(self) -> bool:
        return self.a_fn is None

    def sigma_constant(self) -> np.ndarray | float:
        """sqrt(2a) when diffusion is constant: a scalar for kappa*I, else (d, d)."""
        if self.is_kappa_identity:
            return float(np.sqrt(2.0 * self.kappa))
        if self.a_matrix is not None:
            return self._sigma_const
        raise ValueError("diffusion is not constant")

    def eval_u0(self, x: np.ndarray) -> np.ndarray:
        v = np.asarray(self.u0(self._canon(x)), dtype=np.float64)
        return v[:, None] if v.ndim == 1 else v

    def eval_b(self, t: float, x: np.ndarray) -> np.ndarray | None:
        if self.b is None:
            return None
        v = np.asarray(self.b(float(t), self._canon(x)), dtype=np.float64)
        return v[:, None] if v.ndim == 1 else v

    def eval_V(self, t: float, x: np.ndarray) -> np.ndarray | None:
        if self.V is None:
            return None
        v = np.asarray(self.V(float(t), self._canon(x)), dtype=np.float64)
        return v[:, None] if v.ndim == 1 else v

    def eval_pressure(self, t: float, x: np.ndarray) -> np.ndarray | None:
        if self.pressure is None:
            return None
        return np.asarray(self.pressure(float(t), self._canon(x)), dtype=np.float64)

    def eval_a(self, t: float, x: np.ndarray) -> np.ndarray:
        x = self._canon(x)
        B, d = x.shape
        if self.is_kappa_identity:
            return np.broadcast_to(self.kappa * np.eye(d), (B, d, d))
        if self.a_matrix is not None:
            return np.broadcast_to(self.a_matrix, (B, d, d))
        return np.asarray(self.a_fn(float(t), x), dtype=np.float64)

    def eval_sigma(self, t: float, x: np.ndarray) -> np.ndarray:
        """sqrt(2 a(t, x)) per point, shape (B, d, d)."""
        if self.has_constant_diffusion:
            s = self.sigma_constant()
            x = np.atleast_2d(x)
            d = self.dim
            if np.isscalar(s) or np.ndim(s) == 0:
                return np.broadcast_to(s * np.eye(d), (x.shape[0], d, d))
            return np.broadcast_to(s, (x.shape[0], d, d))
        return sqrt_2a(self.eval_a(t, x))


# ---------------------------------------------------------------------------
# presets


def _zero_u0(d):
    return lambda x: np.zeros((np.atleast_2d(x).shape[0], d))


def _const_u0(vec):
    vec = np.asarray(vec, dtype=np.float64)

    def u0(x):
        return np.broadcast_to(vec, (np.atleast_2d(x).shape[0], vec.size)).copy()

    return u0


def _sine_u0(A):
    def u0(x):
        x = np.atleast_2d(x)
        return (A * np.sin(2.0 * np.pi * x[:, 0]))[:, None]

    return u0


TRIVIAL_CONSTANT = (0.3, -0.2, 0.1)


def coefficient_set_for(cfg: RunConfig) -> CoefficientSet:
    """Build the CoefficientSet for a resolved config's preset."""
    dom = cfg.domain_descriptor()
    d = cfg.dimension
    amp = cfg.amplitude
    name = cfg.preset

    if name == "zero-all":
        return CoefficientSet(dom, cfg.T, cfg.kappa, _zero_u0(d), name=name,
                              sup_u0=0.0, sup_b=0.0, int_sup_V=0.0)
    if name == "trivial-constant":
        vec = amp * np.asarray(TRIVIAL_CONSTANT[:d])
        return CoefficientSet(dom, cfg.T, cfg.kappa, _const_u0(vec), name=name,
                              sup_u0=float(np.linalg.norm(vec)), sup_b=0.0,
                              int_sup_V=0.0)
    if name == "burgers1d":
        if d != 1:
            raise ValueError("burgers1d preset requires dimension = 1")
        A = 0.5 * amp
        return CoefficientSet(dom, cfg.T, cfg.kappa, _sine_u0(A), name=name,
                              sup_u0=abs(A), sup_b=0.0, int_sup_V=0.0)
    if name in ("taylor-green", "taylor-green-nopressure"):
        if d != 2:
            raise ValueError(f"{name} preset requires dimension = 2")
        A = 0.5 * amp
        u_fn = taylor_green_u(A, cfg.kappa)
        u0 = lambda x: u_fn(0.0, x)
        if name == "taylor-green":
            V = taylor_green_force(A, cfg.kappa)
            p = taylor_green_pressure(A, cfg.kappa)
            lam = 16.0 * np.pi ** 2 * cfg.kappa
            int_v = np.sqrt(2.0) * np.pi * A ** 2 * (1.0 - np.exp(-lam * cfg.T)) / lam
            return CoefficientSet(dom, cfg.T, cfg.kappa, u0, V=V, pressure=p,
                                  name=name, sup_u0=abs(A), sup_b=0.0,
                                  int_sup_V=float(int_v))
        return CoefficientSet(dom, cfg.T, cfg.kappa, u0, name=name,
                              sup_u0=abs(A), sup_b=0.0, int_sup_V=0.0)
    if name == "heat-limit":
        if d != 1:
            raise ValueError("heat-limit preset requires dimension = 1")
        A = 1e-6 * amp
        return CoefficientSet(dom, cfg.T, cfg.kappa, _sine_u0(A), name=name,
                              sup_u0=abs(A), sup_b=0.0, int_sup_V=0.0)
    raise ValueError(f"no coefficient preset named {name!r}")


# ---------------------------------------------------------------------------
# validation


@dataclass
class CoefficientReport:
    """Sampled coefficient diagnostics.

    Sampled suprema are taken over a near-uniform grid (deterministic), so
    they are reproducible lower bounds of the continuum suprema.
    """

    sup_u0: float
    mean_u0: np.ndarray
    sup_b: float
    sup_V_profile: np.ndarray      # (n_time + 1,)
    int_sup_V: float
    spd_ok: bool
    min_eig_2a: float
    periodic_ok: bool
    n_space_samples: int

    def as_dict(self) -> dict:
        return {
            "sup_u0": self.sup_u0,
            "mean_u0": [float(v) for v in np.atleast_1d(self.mean_u0)],
            "sup_b": self.sup_b,
            "int_sup_V": self.int_sup_V,
            "spd_ok": self.spd_ok,
            "min_eig_2a": self.min_eig_2a,
            "periodic_ok": self.periodic_ok,
            "n_space_samples": self.n_space_samples,
        }


def validate_coefficients(cs: CoefficientSet, n_samples: int = 10000,
                          n_time: int = 200) -> CoefficientReport:
    """Sample-based sanity report for a coefficient set.

    Args:
        cs: the coefficient set.
        n_samples: target number of spatial sample points (rounded to a
            uniform grid of side round(n_samples**(1/d))).
        n_time: time intervals for the forcing supremum profile.
    """
    d = cs.dim
    side = max(2, int(round(n_samples ** (1.0 / d))))
    nodes = grid_nodes(cs.domain, side)
    nn = nodes.shape[0]

    u0v = cs.eval_u0(nodes)
    sup_u0 = float(np.max(np.sqrt(np.sum(u0v ** 2, axis=1))))
    mean_u0 = u0v.mean(axis=0)

    ts = np.linspace(0.0, cs.T, n_time + 1)
    sup_b = 0.0
    if cs.b is not None:
        for t in ts:
            bv = cs.eval_b(float(t), nodes)
            sup_b = max(sup_b, float(np.max(np.sqrt(np.sum(bv ** 2, axis=1)))))

    sup_V = np.zeros(n_time + 1)
    if cs.V is not None:
        for i, t in enumerate(ts):
            vv = cs.eval_V(float(t), nodes)
            sup_V[i] = float(np.max(np.sqrt(np.sum(vv ** 2, axis=1))))
    int_sup_V = float(np.trapezoid(sup_V, ts))

    # diffusion: SPD at a thinned set of sample points and times
    thin = nodes[:: max(1, nn // 64)]
    min_eig = np.inf
    spd_ok = True
    for t in (0.0, 0.5 * cs.T, cs.T):
        av = cs.eval_a(float(t), thin)
        sym = np.max(np.abs(av - np.swapaxes(av, -1, -2)))
        if sym > 1e-12 * max(1.0, float(np.max(np.abs(av)))):
            spd_ok = False
        w = np.linalg.eigvalsh(2.0 * av)
        min_eig = min(min_eig, float(w.min()))
        if w.min() <= 0:
            spd_ok = False

    periodic_ok = True
    if cs.domain.is_torus:
        # dyadic probe points: x + 1 is then exactly representable, so
        # bitwise equality of f(x) and f(x + e_1) is a fair requirement
        probe = grid_nodes(cs.domain, {1: 64, 2: 16, 3: 8}[d])
        shift = np.zeros(d)
        shift[0] = 1.0
        for f, needs_t in ((cs.eval_u0, False), (cs.eval_b, True),
                           (cs.eval_V, True)):
            base = f(0.0, probe) if needs_t else f(probe)
            if base is None:
                continue
            moved = f(0.0, probe + shift) if needs_t else f(probe + shift)
            if not np.array_equal(base, moved):
                periodic_ok = False

    return CoefficientReport(
        sup_u0=sup_u0,
        mean_u0=mean_u0,
        sup_b=sup_b,
        sup_V_profile=sup_V,
        int_sup_V=int_sup_V,
        spd_ok=spd_ok,
        min_eig_2a=min_eig,
        periodic_ok=periodic_ok,
        n_space_samples=nn,
    )
