"""Constitutive updates at material points.

Both models use the same finite-strain kinematics: an elastic predictor
``b_tr = dF b_n dF^T``, principal logarithmic (Hencky) strains and a return
mapping in principal space, followed by back rotation to the spatial frame.

* :func:`j2_update` -- von Mises plasticity with linear isotropic hardening,
  closed-form radial return.
* :func:`jc_update` -- Johnson-Cook flow stress (strain, rate and thermal
  brackets), scalar safeguarded Newton for the plastic multiplier, adiabatic
  heating and the Johnson-Cook fracture locus.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

SQRT23 = math.sqrt(2.0 / 3.0)
SQRT32 = math.sqrt(1.5)

ST_OK = 0
ST_NOT_SPD = 1
ST_NO_CONVERGENCE = 2


class ConstitutiveError(RuntimeError):
    pass


class StateCorruptionError(ConstitutiveError):
    """The elastic trial tensor is not symmetric positive definite."""


class ConstitutiveFailureError(ConstitutiveError):
    """The Johnson-Cook return mapping did not converge."""


def lame_from_young(E: float, nu: float) -> tuple[float, float]:
    """Bulk (compression) modulus and shear modulus from ``(E, nu)``."""
    return E / (3.0 * (1.0 - 2.0 * nu)), E / (2.0 * (1.0 + nu))


@dataclass(frozen=True)
class J2Params:
    E: float
    nu: float
    H: float
    sigma_y0: float
    rho0: float

    def __post_init__(self):
        if self.E <= 0 or self.sigma_y0 <= 0 or self.rho0 <= 0 or self.H < 0:
            raise ValueError("J2 moduli, yield stress and density must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio {self.nu} outside (-1, 0.5)")

    @property
    def K(self) -> float:
        return lame_from_young(self.E, self.nu)[0]

    @property
    def mu(self) -> float:
        return lame_from_young(self.E, self.nu)[1]


@dataclass(frozen=True)
class JcParams:
    E: float
    nu: float
    rho0: float
    A: float
    B: float
    n: float
    C: float
    m: float
    eps_dot0: float
    T_m: float
    T_r: float
    beta_tq: float
    C_p: float
    d1: float = 0.0
    d2: float = 0.0
    d3: float = 0.0
    d4: float = 0.0
    d5: float = 0.0

    def __post_init__(self):
        if self.T_m <= self.T_r:
            raise ValueError("melting temperature must exceed room temperature")
        if not 0.0 < self.beta_tq <= 1.0:
            raise ValueError("Taylor-Quinney coefficient must lie in (0, 1]")
        if self.A <= 0 or self.eps_dot0 <= 0 or self.C_p <= 0 or self.rho0 <= 0:
            raise ValueError("A, eps_dot0, C_p and rho0 must be positive")

    @property
    def K(self) -> float:
        return lame_from_young(self.E, self.nu)[0]

    @property
    def mu(self) -> float:
        return lame_from_young(self.E, self.nu)[1]

    def as_array(self) -> np.ndarray:
        return np.array([self.A, self.B, self.n, self.C, self.m, self.eps_dot0,
                         self.T_m, self.T_r, self.beta_tq, self.C_p, self.rho0,
                         self.d1, self.d2, self.d3, self.d4, self.d5])


@dataclass
class J2State:
    be: np.ndarray = field(default_factory=lambda: np.eye(3))
    eps_p_bar: float = 0.0


@dataclass
class JcState(J2State):
    T: float = 25.0
    fractured: bool = False


# ---------------------------------------------------------------------------
# tensor kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def sym_eig3(A, w, V):
    """Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix.

    Columns of ``V`` are eigenvectors. Eigenvalues closer than 1e-12
    (relative) are replaced by their mean so that isotropic functions of a
    tensor with repeated eigenvalues are reassembled without spurious
    anisotropy.
    """
    a = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            a[i, j] = 0.5 * (A[i, j] + A[j, i])
            V[i, j] = 1.0 if i == j else 0.0
    for _ in range(50):
        off = a[0, 1] * a[0, 1] + a[0, 2] * a[0, 2] + a[1, 2] * a[1, 2]
        diag = a[0, 0] * a[0, 0] + a[1, 1] * a[1, 1] + a[2, 2] * a[2, 2]
        if off <= 1e-34 * diag or off == 0.0:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            for k in range(3):
                akp = a[k, p]
                akq = a[k, q]
                a[k, p] = c * akp - s * akq
                a[k, q] = s * akp + c * akq
            for k in range(3):
                apk = a[p, k]
                aqk = a[q, k]
                a[p, k] = c * apk - s * aqk
                a[q, k] = s * apk + c * aqk
            for k in range(3):
                vkp = V[k, p]
                vkq = V[k, q]
                V[k, p] = c * vkp - s * vkq
                V[k, q] = s * vkp + c * vkq
    for i in range(3):
        w[i] = a[i, i]
    scale = max(abs(w[0]), abs(w[1]), abs(w[2]))
    tol = 1e-12 * scale
    d01 = abs(w[0] - w[1]) <= tol
    d02 = abs(w[0] - w[2]) <= tol
    d12 = abs(w[1] - w[2]) <= tol
    if (d01 and d02) or (d01 and d12) or (d02 and d12):
        m = (w[0] + w[1] + w[2]) / 3.0
        w[0] = m
        w[1] = m
        w[2] = m
    elif d01:
        m = 0.5 * (w[0] + w[1])
        w[0] = m
        w[1] = m
    elif d02:
        m = 0.5 * (w[0] + w[2])
        w[0] = m
        w[2] = m
    elif d12:
        m = 0.5 * (w[1] + w[2])
        w[1] = m
        w[2] = m


@njit(cache=True, nogil=True)
def _assemble(V, vals, out):
    for i in range(3):
        for j in range(3):
            s = 0.0
            for a in range(3):
                s = s + vals[a] * V[i, a] * V[j, a]
            out[i, j] = s


@njit(cache=True, nogil=True)
def _trial(dF, be, btr):
    tmp = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s = s + dF[i, k] * be[k, j]
            tmp[i, j] = s
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s = s + tmp[i, k] * dF[j, k]
            btr[i, j] = s


@njit(cache=True, nogil=True)
def _principal_strains(dF, be, V, eps):
    """Trial principal Hencky strains; returns False when not SPD."""
    btr = np.empty((3, 3))
    _trial(dF, be, btr)
    w = np.empty(3)
    sym_eig3(btr, w, V)
    for a in range(3):
        if not w[a] > 0.0:
            return False
        eps[a] = 0.5 * math.log(w[a])
    return True


@njit(cache=True, nogil=True)
def _finish(V, e, tr, K, mu, sigma, be_out):
    """Principal deviatoric strains ``e`` + volumetric ``tr`` -> sigma, b_e."""
    J = math.exp(tr)
    tau = np.empty(3)
    bvals = np.empty(3)
    for a in range(3):
        tau[a] = (K * tr + 2.0 * mu * e[a]) / J
        bvals[a] = math.exp(2.0 * (e[a] + tr / 3.0))
    _assemble(V, tau, sigma)
    _assemble(V, bvals, be_out)


@njit(cache=True, nogil=True)
def j2_kernel(dF, be, eps_p, K, mu, H, sy0, sigma, be_out):
    """Radial return. Returns ``(status, eps_p_new, dgamma)``."""
    V = np.empty((3, 3))
    eps = np.empty(3)
    if not _principal_strains(dF, be, V, eps):
        return ST_NOT_SPD, eps_p, 0.0
    tr = eps[0] + eps[1] + eps[2]
    e = np.empty(3)
    for a in range(3):
        e[a] = eps[a] - tr / 3.0
    nrm = math.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
    f = 2.0 * mu * nrm - SQRT23 * (sy0 + H * eps_p)
    dgamma = 0.0
    if f > 0.0:
        dgamma = f / (2.0 * mu + 2.0 / 3.0 * H)
        scale = 1.0 - dgamma / nrm
        for a in range(3):
            e[a] = e[a] * scale
        eps_p = eps_p + SQRT23 * dgamma
    _finish(V, e, tr, K, mu, sigma, be_out)
    return ST_OK, eps_p, dgamma


@njit(cache=True, nogil=True)
def _rate_ratio(eps_dot, eps_dot0):
    r = eps_dot / eps_dot0
    return r if r > 1.0 else 1.0


@njit(cache=True, nogil=True)
def _homologous(T, T_r, T_m):
    return (T - T_r) / (T_m - T_r)


@njit(cache=True, nogil=True)
def _thermal(ts, m):
    # 1 - ts^m without cancellation near the melt temperature
    return 1.0 if ts <= 0.0 else -math.expm1(m * math.log(ts))


@njit(cache=True, nogil=True)
def jc_flow_kernel(eps_p, eps_dot, T, A, B, n, C, m, eps_dot0, T_r, T_m):
    ts = _homologous(T, T_r, T_m)
    if ts >= 1.0:
        return 0.0
    thermal = _thermal(ts, m)
    hard = A + B * eps_p ** n if eps_p > 0.0 else A
    rate = 1.0 + C * math.log(_rate_ratio(eps_dot, eps_dot0))
    return hard * rate * thermal


@njit(cache=True, nogil=True)
def _jc_flow_deriv(eps_p, dgamma, dt, T, A, B, n, C, m, eps_dot0, T_r, T_m):
    """Flow stress and its derivative along the return path."""
    ts = _homologous(T, T_r, T_m)
    if ts >= 1.0:
        return 0.0, 0.0
    thermal = _thermal(ts, m)
    if eps_p > 0.0:
        hard = A + B * eps_p ** n
        dhard = n * B * eps_p ** (n - 1.0) * SQRT23
    else:
        hard = A
        dhard = 0.0 if n >= 1.0 else np.inf
    ratio = SQRT23 * dgamma / dt / eps_dot0
    if ratio > 1.0:
        rate = 1.0 + C * math.log(ratio)
        drate = C / dgamma
    else:
        rate = 1.0
        drate = 0.0
    return hard * rate * thermal, (dhard * rate + hard * drate) * thermal


@njit(cache=True, nogil=True)
def jc_kernel(dF, be, eps_p, T, dt, K, mu, P, sigma, be_out):
    """Johnson-Cook return mapping.

    ``P`` is :meth:`JcParams.as_array`. Returns
    ``(status, eps_p_new, T_new, dgamma, eps_dot)``; ``dgamma`` is the
    multiplier on the unit deviatoric flow direction, the equivalent plastic
    strain increment is ``sqrt(2/3) dgamma``.
    """
    A, B, n, C, m, e0, T_m, T_r = P[0], P[1], P[2], P[3], P[4], P[5], P[6], P[7]
    beta_tq, C_p, rho0 = P[8], P[9], P[10]
    V = np.empty((3, 3))
    eps = np.empty(3)
    if not _principal_strains(dF, be, V, eps):
        return ST_NOT_SPD, eps_p, T, 0.0, 0.0
    tr = eps[0] + eps[1] + eps[2]
    e = np.empty(3)
    for a in range(3):
        e[a] = eps[a] - tr / 3.0
    nrm = math.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
    s_tr = 2.0 * mu * nrm
    sy = jc_flow_kernel(eps_p, 0.0, T, A, B, n, C, m, e0, T_r, T_m)
    f0 = SQRT32 * s_tr - sy
    dgamma = 0.0
    status = ST_OK
    if f0 > 0.0:
        tol = 1e-8 * A
        lo = 0.0
        hi = nrm
        if sy > 0.0:
            x = f0 / (SQRT32 * 2.0 * mu)
            if x >= hi:
                x = 0.5 * hi
        else:
            x = hi
        converged = sy == 0.0
        for _ in range(100):
            if converged:
                break
            sy_x, dsy = _jc_flow_deriv(eps_p + SQRT23 * x, x, dt, T,
                                       A, B, n, C, m, e0, T_r, T_m)
            f = SQRT32 * (s_tr - 2.0 * mu * x) - sy_x
            if abs(f) <= tol:
                converged = True
                break
            if f > 0.0:
                lo = x
            else:
                hi = x
            df = -SQRT32 * 2.0 * mu - dsy
            xn = x - f / df if np.isfinite(df) and df < 0.0 else -1.0
            if not (lo < xn < hi):
                xn = 0.5 * (lo + hi)
            x = xn
        if not converged:
            status = ST_NO_CONVERGENCE
        dgamma = x
        scale = 1.0 - dgamma / nrm
        for a in range(3):
            e[a] = e[a] * scale
        deps = SQRT23 * dgamma
        eps_p = eps_p + deps
        tau_v = SQRT32 * 2.0 * mu * math.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        # Kirchhoff measure over reference density == Cauchy over current
        T = T + beta_tq * tau_v * deps / (rho0 * C_p)
    _finish(V, e, tr, K, mu, sigma, be_out)
    eps_dot = SQRT23 * dgamma / dt
    return status, eps_p, T, dgamma, eps_dot


@njit(cache=True, nogil=True)
def von_mises_kernel(s):
    p = (s[0, 0] + s[1, 1] + s[2, 2]) / 3.0
    acc = 0.0
    for i in range(3):
        for j in range(3):
            d = s[i, j] - (p if i == j else 0.0)
            acc = acc + d * d
    return SQRT32 * math.sqrt(acc), p


@njit(cache=True, nogil=True)
def fracture_strain_kernel(eta, eps_dot, T, P):
    e0, T_m, T_r = P[5], P[6], P[7]
    d1, d2, d3, d4, d5 = P[11], P[12], P[13], P[14], P[15]
    return ((d1 + d2 * math.exp(d3 * eta))
            * (1.0 + d4 * math.log(_rate_ratio(eps_dot, e0)))
            * (1.0 + d5 * _homologous(T, T_r, T_m)))


# ---------------------------------------------------------------------------
# batched updates used by the solver
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def j2_batch(idx, dF, be, eps_p, sigma, K, mu, H, sy0):
    """Update the listed material points in place; returns first failing row or -1."""
    s = np.empty((3, 3))
    b = np.empty((3, 3))
    for q in range(idx.shape[0]):
        p = idx[q]
        st, ep, _ = j2_kernel(dF[p], be[p], eps_p[p], K, mu, H, sy0, s, b)
        if st != ST_OK:
            return p
        eps_p[p] = ep
        sigma[p] = s
        be[p] = b
    return -1


@njit(cache=True, nogil=True)
def jc_batch(idx, dF, be, eps_p, temp, sigma, fractured, dt, K, mu, P, check_fracture):
    """Johnson-Cook update with fracture check; returns ``(row, status)``."""
    s = np.empty((3, 3))
    b = np.empty((3, 3))
    for q in range(idx.shape[0]):
        p = idx[q]
        st, ep, T, _, rate = jc_kernel(dF[p], be[p], eps_p[p], temp[p], dt, K, mu, P, s, b)
        if st != ST_OK:
            return p, st
        eps_p[p] = ep
        temp[p] = T
        be[p] = b
        sigma[p] = s
        if check_fracture and ep > 0.0:
            sv, pm = von_mises_kernel(s)
            if sv > 0.0:
                if ep >= fracture_strain_kernel(pm / sv, rate, T, P):
                    fractured[p] = True
                    for i in range(3):
                        for j in range(3):
                            sigma[p, i, j] = 0.0
    return -1, ST_OK


# ---------------------------------------------------------------------------
# Python API
# ---------------------------------------------------------------------------

def von_mises(sigma) -> float:
    return float(von_mises_kernel(np.asarray(sigma, dtype=float))[0])


def triaxiality(sigma) -> float:
    """Mean stress over von Mises stress (nan for a purely hydrostatic state)."""
    sv, p = von_mises_kernel(np.asarray(sigma, dtype=float))
    return p / sv if sv > 0 else float("nan")


def j2_update(state: J2State, dF, params: J2Params, dt: float = 0.0):
    """Finite-strain J2 update; returns ``(sigma, new_state)``.

    ``dt`` is accepted for interface symmetry with :func:`jc_update`; the
    rate-independent model does not use it.
    """
    dF = np.ascontiguousarray(dF, dtype=float)
    if np.linalg.det(dF) <= 0:
        raise ValueError("deformation increment must have positive determinant")
    sigma = np.empty((3, 3))
    be = np.empty((3, 3))
    st, ep, _ = j2_kernel(dF, np.ascontiguousarray(state.be, dtype=float), state.eps_p_bar,
                          params.K, params.mu, params.H, params.sigma_y0, sigma, be)
    if st != ST_OK:
        raise StateCorruptionError("elastic trial left Cauchy-Green tensor is not SPD")
    return sigma, replace(state, be=be, eps_p_bar=ep)


def j2_plastic_multiplier(state: J2State, dF, params: J2Params) -> float:
    """Plastic multiplier of the radial return (0 for an elastic step)."""
    sigma = np.empty((3, 3))
    be = np.empty((3, 3))
    st, _, dg = j2_kernel(np.ascontiguousarray(dF, dtype=float), np.ascontiguousarray(state.be),
                          state.eps_p_bar, params.K, params.mu, params.H, params.sigma_y0,
                          sigma, be)
    if st != ST_OK:
        raise StateCorruptionError("elastic trial left Cauchy-Green tensor is not SPD")
    return dg


def jc_flow_stress(eps_p_bar: float, eps_dot: float, T: float, params: JcParams) -> float:
    """Johnson-Cook flow stress.

    The strain-rate bracket is clamped to 1 below the reference rate, the
    thermal bracket to 1 below room temperature; at or above the melting
    temperature the material has no strength.
    """
    if T >= params.T_m:
        logger.warning("temperature %.1f reached melting point %.1f: zero strength",
                       T, params.T_m)
        return 0.0
    return float(jc_flow_kernel(eps_p_bar, eps_dot, T, params.A, params.B, params.n,
                                params.C, params.m, params.eps_dot0, params.T_r, params.T_m))


def jc_update(state: JcState, dF, params: JcParams, dt: float):
    """Johnson-Cook return mapping with adiabatic heating.

    Returns ``(sigma, new_state)``; the fracture flag is not evaluated here,
    see :func:`jc_fracture_check`.
    """
    if state.fractured:
        raise ValueError("fractured material points are not updated")
    dF = np.ascontiguousarray(dF, dtype=float)
    sigma = np.empty((3, 3))
    be = np.empty((3, 3))
    st, ep, T, _, _ = jc_kernel(dF, np.ascontiguousarray(state.be, dtype=float),
                                state.eps_p_bar, state.T, dt, params.K, params.mu,
                                params.as_array(), sigma, be)
    if st == ST_NOT_SPD:
        raise StateCorruptionError("elastic trial left Cauchy-Green tensor is not SPD")
    if st == ST_NO_CONVERGENCE:
        raise ConstitutiveFailureError(
            f"Johnson-Cook return mapping failed (eps_p={state.eps_p_bar}, T={state.T})")
    return sigma, replace(state, be=be, eps_p_bar=ep, T=T)


def jc_fracture_strain(eta: float, eps_dot: float, T: float, params: JcParams) -> float:
    return float(fracture_strain_kernel(eta, eps_dot, T, params.as_array()))


def jc_fracture_check(state: JcState, eta: float, eps_dot: float, params: JcParams) -> bool:
    """True when the accumulated plastic strain reaches the fracture strain.

    An undefined triaxiality (zero von Mises stress) never fractures.
    """
    if state.fractured:
        return True
    if eta is None or not math.isfinite(eta):
        return False
    return state.eps_p_bar >= jc_fracture_strain(eta, eps_dot, state.T, params)


# ---------------------------------------------------------------------------
# material objects used by the time stepper
# ---------------------------------------------------------------------------

class J2Material:
    name = "j2"

    def __init__(self, params: J2Params):
        self.params = params
        self.rho0 = params.rho0
        self.E = params.E

    def update(self, mps, idx: np.ndarray, dt: float) -> None:
        p = self.params
        bad = j2_batch(idx, mps.dF, mps.be, mps.eps_p, mps.sigma, p.K, p.mu, p.H, p.sigma_y0)
        if bad >= 0:
            raise StateCorruptionError(
                f"material point {int(mps.ids[bad])}: elastic trial tensor not SPD")


class JohnsonCookMaterial:
    name = "johnson_cook"

    def __init__(self, params: JcParams, check_fracture: bool = True):
        self.params = params
        self.rho0 = params.rho0
        self.E = params.E
        self.check_fracture = check_fracture
        self._P = params.as_array()

    def update(self, mps, idx: np.ndarray, dt: float) -> None:
        p = self.params
        bad, st = jc_batch(idx, mps.dF, mps.be, mps.eps_p, mps.temperature, mps.sigma,
                           mps.fractured, dt, p.K, p.mu, self._P, self.check_fracture)
        if bad >= 0:
            pid = int(mps.ids[bad])
            if st == ST_NOT_SPD:
                raise StateCorruptionError(f"material point {pid}: elastic trial tensor not SPD")
            raise ConstitutiveFailureError(
                f"material point {pid}: Johnson-Cook return mapping did not converge "
                f"(eps_p={mps.eps_p[bad]:.6g}, T={mps.temperature[bad]:.6g})")
        hot = mps.temperature[idx] >= p.T_m
        if hot.any():
            logger.warning("%d material points at or above the melting temperature",
                           int(hot.sum()))
