"""Mean-element orbit representations, relative states, and linear maps.

Two relative-element conventions are supported:

* ``"qns"``: quasi-nonsingular differences built from the eccentricity and
  inclination vectors. Degenerate for equatorial chiefs.
* ``"eccentric"``: an eccentricity-scaled form whose along-track component
  absorbs the mean-anomaly difference through 1/eta. Degenerate for circular
  chiefs on inversion.

All relative-element states are dimensionless. Positions and velocities are
SI (meters, meters per second); angles are radians.

The step transition matrix, control influence matrix, and the local linear
map to the radial/transverse/normal (RTN) frame are all built as central
finite-difference Jacobians of the exact nonlinear maps, so the three stay
mutually consistent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Literal

import numpy as np

TWO_PI = 2.0 * math.pi

RoeConvention = Literal["qns", "eccentric"]

#: Finite-difference step for dimensionless relative-element perturbations.
ROE_FD_STEP = 1.0e-6
#: Finite-difference step for impulse perturbations [m/s].
IMPULSE_FD_STEP = 1.0e-4

_MIN_SIN_INCLINATION = 1.0e-12
_MIN_ECCENTRICITY = 1.0e-8


@dataclass(frozen=True)
class GravityModel:
    """Central-body constants for secular mean-element propagation.

    Setting ``j2`` to zero recovers pure Keplerian motion.
    """

    mu: float = 3.986004418e14
    j2: float = 1.08262668e-3
    radius: float = 6378.137e3


EARTH = GravityModel()
KEPLERIAN_EARTH = GravityModel(j2=0.0)


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [0, 2*pi)."""
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    return wrapped


def wrap_diff(theta: float) -> float:
    """Wrap an angle difference to the principal value in [-pi, pi]."""
    return math.remainder(theta, TWO_PI)


@dataclass(frozen=True)
class ClassicalOE:
    """Classical mean orbital elements (a [m], angles [rad])."""

    a: float
    e: float
    i: float
    raan: float
    argp: float
    mean_anomaly: float

    def validate(self) -> None:
        if not self.a > 0.0:
            raise ValueError(f"semimajor axis must be positive, got {self.a}")
        if not 0.0 <= self.e < 1.0:
            raise ValueError(f"eccentricity must lie in [0, 1), got {self.e}")
        if not 0.0 <= self.i <= math.pi:
            raise ValueError(f"inclination must lie in [0, pi], got {self.i}")

    def mean_motion(self, gravity: GravityModel = EARTH) -> float:
        return math.sqrt(gravity.mu / self.a**3)

    @property
    def eta(self) -> float:
        return math.sqrt(1.0 - self.e * self.e)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.a, self.e, self.i, self.raan, self.argp, self.mean_anomaly]
        )

    @staticmethod
    def from_array(values: np.ndarray) -> "ClassicalOE":
        a, e, i, raan, argp, m = (float(v) for v in values)
        return ClassicalOE(a, e, i, raan, argp, m)


@dataclass(frozen=True)
class Roe:
    """Relative orbital elements of a deputy about a chief (dimensionless)."""

    da: float
    dlambda: float
    dex: float
    dey: float
    dix: float
    diy: float
    convention: RoeConvention = "qns"

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.da, self.dlambda, self.dex, self.dey, self.dix, self.diy]
        )

    @staticmethod
    def from_array(values: np.ndarray, convention: RoeConvention = "qns") -> "Roe":
        da, dl, dex, dey, dix, diy = (float(v) for v in values)
        return Roe(da, dl, dex, dey, dix, diy, convention)


@dataclass(frozen=True)
class RtnState:
    """Relative state in the chief's RTN frame [m, m/s]."""

    r_r: float
    r_t: float
    r_n: float
    v_r: float
    v_t: float
    v_n: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.r_r, self.r_t, self.r_n, self.v_r, self.v_t, self.v_n]
        )

    @staticmethod
    def from_array(values: np.ndarray) -> "RtnState":
        rr, rt, rn, vr, vt, vn = (float(v) for v in values)
        return RtnState(rr, rt, rn, vr, vt, vn)

    @property
    def position_norm(self) -> float:
        return math.sqrt(self.r_r**2 + self.r_t**2 + self.r_n**2)


@dataclass(frozen=True)
class LinearMaps:
    """Local linear maps at one epoch.

    stm
        6x6 transition of the relative elements over [t, t + dt].
    cim
        6x3 control influence: dimensionless element change per unit
        impulse [m/s] applied in the deputy RTN frame at t.
    psi
        6x6 map from relative elements to the RTN relative state at t.
    """

    stm: np.ndarray
    cim: np.ndarray
    psi: np.ndarray


def _check_inclination(chief: ClassicalOE) -> None:
    if abs(math.sin(chief.i)) < _MIN_SIN_INCLINATION:
        raise ValueError(
            "relative elements are degenerate for near-equatorial chiefs; "
            "perturb the inclination (e.g. by 1e-9 rad) before converting"
        )


def roe_from_pair(
    chief: ClassicalOE, deputy: ClassicalOE, convention: RoeConvention = "qns"
) -> Roe:
    """Relative orbital elements of ``deputy`` with respect to ``chief``."""
    _check_inclination(chief)
    d_raan = wrap_diff(deputy.raan - chief.raan)
    if convention == "qns":
        da = (deputy.a - chief.a) / chief.a
        dl = (
            wrap_diff(
                (deputy.mean_anomaly + deputy.argp)
                - (chief.mean_anomaly + chief.argp)
            )
            + d_raan * math.cos(chief.i)
        )
        dex = deputy.e * math.cos(deputy.argp) - chief.e * math.cos(chief.argp)
        dey = deputy.e * math.sin(deputy.argp) - chief.e * math.sin(chief.argp)
        dix = wrap_diff(deputy.i - chief.i)
        diy = d_raan * math.sin(chief.i)
        return Roe(da, dl, dex, dey, dix, diy, "qns")
    if convention == "eccentric":
        eta = chief.eta
        eta2 = eta * eta
        d_m = wrap_diff(deputy.mean_anomaly - chief.mean_anomaly)
        d_argp = wrap_diff(deputy.argp - chief.argp)
        da = eta2 * (deputy.a - chief.a) / chief.a
        dl = d_m / eta + eta2 * (d_argp + d_raan * math.cos(chief.i))
        de = deputy.e - chief.e
        cw, sw = math.cos(chief.argp), math.sin(chief.argp)
        ratio = chief.e / eta
        dex = de * cw + ratio * d_m * sw
        dey = de * sw - ratio * d_m * cw
        dix = eta2 * wrap_diff(deputy.i - chief.i)
        diy = eta2 * d_raan * math.sin(chief.i)
        return Roe(da, dl, dex, dey, dix, diy, "eccentric")
    raise ValueError(f"unknown convention {convention!r}")


def pair_from_roe(chief: ClassicalOE, roe: Roe) -> ClassicalOE:
    """Deputy mean elements recovered from ``chief`` and relative elements.

    Exact inverse of :func:`roe_from_pair` for the matching convention
    (deputy angles are returned wrapped to [0, 2*pi)).
    """
    _check_inclination(chief)
    cos_i = math.cos(chief.i)
    sin_i = math.sin(chief.i)
    if roe.convention == "qns":
        a_d = chief.a * (1.0 + roe.da)
        i_d = chief.i + roe.dix
        d_raan = roe.diy / sin_i
        ex_d = roe.dex + chief.e * math.cos(chief.argp)
        ey_d = roe.dey + chief.e * math.sin(chief.argp)
        e_d = math.hypot(ex_d, ey_d)
        argp_d = math.atan2(ey_d, ex_d) if e_d > 0.0 else 0.0
        m_d = (
            chief.mean_anomaly
            + chief.argp
            - argp_d
            + roe.dlambda
            - d_raan * cos_i
        )
        return ClassicalOE(
            a_d,
            e_d,
            i_d,
            wrap_angle(chief.raan + d_raan),
            wrap_angle(argp_d),
            wrap_angle(m_d),
        )
    if roe.convention == "eccentric":
        if chief.e < _MIN_ECCENTRICITY:
            raise ValueError(
                "eccentric-form inversion is degenerate for a circular chief"
            )
        eta = chief.eta
        eta2 = eta * eta
        a_d = chief.a * (1.0 + roe.da / eta2)
        i_d = chief.i + roe.dix / eta2
        d_raan = roe.diy / (eta2 * sin_i)
        cw, sw = math.cos(chief.argp), math.sin(chief.argp)
        de = roe.dex * cw + roe.dey * sw
        d_m = (eta / chief.e) * (roe.dex * sw - roe.dey * cw)
        d_argp = (roe.dlambda - d_m / eta) / eta2 - d_raan * cos_i
        return ClassicalOE(
            a_d,
            chief.e + de,
            i_d,
            wrap_angle(chief.raan + d_raan),
            wrap_angle(chief.argp + d_argp),
            wrap_angle(chief.mean_anomaly + d_m),
        )
    raise ValueError(f"unknown convention {roe.convention!r}")


def secular_rates(oe: ClassicalOE, gravity: GravityModel = EARTH) -> np.ndarray:
    """Secular drift rates [d(raan)/dt, d(argp)/dt, dM/dt] in rad/s."""
    n = oe.mean_motion(gravity)
    eta = oe.eta
    p = oe.a * eta * eta
    k = 0.75 * gravity.j2 * n * (gravity.radius / p) ** 2
    cos_i = math.cos(oe.i)
    raan_dot = -2.0 * k * cos_i
    argp_dot = k * (5.0 * cos_i * cos_i - 1.0)
    m_dot = n + k * eta * (3.0 * cos_i * cos_i - 1.0)
    return np.array([raan_dot, argp_dot, m_dot])


def mean_propagate(
    oe: ClassicalOE, dt: float, gravity: GravityModel = EARTH
) -> ClassicalOE:
    """Propagate mean elements by ``dt`` seconds under secular rates."""
    raan_dot, argp_dot, m_dot = secular_rates(oe, gravity)
    return replace(
        oe,
        raan=wrap_angle(oe.raan + raan_dot * dt),
        argp=wrap_angle(oe.argp + argp_dot * dt),
        mean_anomaly=wrap_angle(oe.mean_anomaly + m_dot * dt),
    )


def kepler_eccentric_anomaly(mean_anomaly: float, e: float) -> float:
    """Solve Kepler's equation E - e*sin(E) = M by Newton iteration."""
    m = wrap_diff(mean_anomaly)
    E = m + e * math.sin(m)
    for _ in range(50):
        f = E - e * math.sin(E) - m
        fp = 1.0 - e * math.cos(E)
        step = f / fp
        E -= step
        if abs(step) < 1.0e-14:
            break
    return E


def eci_from_oe(
    oe: ClassicalOE, gravity: GravityModel = EARTH
) -> tuple[np.ndarray, np.ndarray]:
    """Inertial position/velocity of an element set via the two-body map."""
    E = kepler_eccentric_anomaly(oe.mean_anomaly, oe.e)
    cos_e, sin_e = math.cos(E), math.sin(E)
    eta = oe.eta
    nu = math.atan2(eta * sin_e, cos_e - oe.e)
    r_mag = oe.a * (1.0 - oe.e * cos_e)
    p = oe.a * eta * eta
    cos_nu, sin_nu = math.cos(nu), math.sin(nu)
    r_pqw = np.array([r_mag * cos_nu, r_mag * sin_nu, 0.0])
    v_scale = math.sqrt(gravity.mu / p)
    v_pqw = np.array([-v_scale * sin_nu, v_scale * (oe.e + cos_nu), 0.0])
    rot = _pqw_to_eci(oe.raan, oe.i, oe.argp)
    return rot @ r_pqw, rot @ v_pqw


def _pqw_to_eci(raan: float, i: float, argp: float) -> np.ndarray:
    co, so = math.cos(raan), math.sin(raan)
    ci, si = math.cos(i), math.sin(i)
    cw, sw = math.cos(argp), math.sin(argp)
    return np.array(
        [
            [co * cw - so * sw * ci, -co * sw - so * cw * ci, so * si],
            [so * cw + co * sw * ci, -so * sw + co * cw * ci, -co * si],
            [sw * si, cw * si, ci],
        ]
    )


def oe_from_eci(
    r: np.ndarray, v: np.ndarray, gravity: GravityModel = EARTH
) -> ClassicalOE:
    """Classical elements from an inertial state via the two-body map.

    Angles are extracted with atan2 forms throughout, which stay uniformly
    well conditioned (acos-based extraction loses half the significant digits
    near 0 and pi, which in turn poisons finite-difference Jacobians).
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    r_mag = float(np.linalg.norm(r))
    v_sq = float(v @ v)
    h = np.cross(r, v)
    h_mag = float(np.linalg.norm(h))
    h_hat = h / h_mag
    a = 1.0 / (2.0 / r_mag - v_sq / gravity.mu)
    e_vec = ((v_sq - gravity.mu / r_mag) * r - float(r @ v) * v) / gravity.mu
    # Orbit-plane component only: roundoff can leave a stray out-of-plane part.
    e_vec = e_vec - float(e_vec @ h_hat) * h_hat
    e = float(np.linalg.norm(e_vec))
    i = math.atan2(math.hypot(h[0], h[1]), h[2])
    node = np.array([-h[1], h[0], 0.0])
    node_mag = float(np.linalg.norm(node))
    if node_mag < 1.0e-12 * h_mag:
        node = np.array([1.0, 0.0, 0.0])
        raan = 0.0
    else:
        node = node / node_mag
        raan = math.atan2(node[1], node[0])
    node_perp = np.cross(h_hat, node)
    if e > 1.0e-15:
        argp = math.atan2(float(e_vec @ node_perp), float(e_vec @ node))
        e_hat = e_vec / e
        e_perp = np.cross(h_hat, e_hat)
        nu = math.atan2(float(r @ e_perp), float(r @ e_hat))
    else:
        argp = 0.0
        nu = math.atan2(float(r @ node_perp), float(r @ node))
    E = 2.0 * math.atan2(
        math.sqrt(1.0 - e) * math.sin(nu / 2.0),
        math.sqrt(1.0 + e) * math.cos(nu / 2.0),
    )
    m = E - e * math.sin(E)
    return ClassicalOE(a, e, i, wrap_angle(raan), wrap_angle(argp), wrap_angle(m))


def rtn_rotation(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotation matrix whose rows map inertial vectors into the RTN frame."""
    r_hat = r / np.linalg.norm(r)
    h = np.cross(r, v)
    n_hat = h / np.linalg.norm(h)
    t_hat = np.cross(n_hat, r_hat)
    return np.vstack([r_hat, t_hat, n_hat])


def rtn_from_pair(
    chief: ClassicalOE, deputy: ClassicalOE, gravity: GravityModel = EARTH
) -> RtnState:
    """Deputy state relative to chief, expressed in the chief's RTN frame."""
    r_c, v_c = eci_from_oe(chief, gravity)
    r_d, v_d = eci_from_oe(deputy, gravity)
    rot = rtn_rotation(r_c, v_c)
    dr = r_d - r_c
    dv = v_d - v_c
    omega = np.cross(r_c, v_c) / float(r_c @ r_c)
    rel_r = rot @ dr
    rel_v = rot @ (dv - np.cross(omega, dr))
    return RtnState.from_array(np.concatenate([rel_r, rel_v]))


def rtn_from_roe(
    chief: ClassicalOE, roe: Roe, gravity: GravityModel = EARTH
) -> RtnState:
    """Nonlinear map from relative elements to the RTN relative state."""
    return rtn_from_pair(chief, pair_from_roe(chief, roe), gravity)


def _jacobian(
    func: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, step: float
) -> np.ndarray:
    """Central-difference Jacobian of ``func`` about ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    columns = []
    for j in range(x0.size):
        x_plus = x0.copy()
        x_plus[j] += step
        x_minus = x0.copy()
        x_minus[j] -= step
        columns.append((func(x_plus) - func(x_minus)) / (2.0 * step))
    return np.column_stack(columns)


def stm_roe(
    chief: ClassicalOE,
    dt: float,
    convention: RoeConvention = "qns",
    gravity: GravityModel = EARTH,
    step: float = ROE_FD_STEP,
) -> np.ndarray:
    """Transition matrix of the relative elements over [t, t + dt].

    Built as the Jacobian of invert -> propagate both -> re-difference,
    evaluated at zero separation. ``dt == 0`` returns the identity exactly.
    """
    if dt == 0.0:
        return np.eye(6)
    chief_next = mean_propagate(chief, dt, gravity)

    def advance(roe_vec: np.ndarray) -> np.ndarray:
        deputy = pair_from_roe(chief, Roe.from_array(roe_vec, convention))
        deputy_next = mean_propagate(deputy, dt, gravity)
        return roe_from_pair(chief_next, deputy_next, convention).as_array()

    return _jacobian(advance, np.zeros(6), step)


def control_influence(
    chief: ClassicalOE,
    convention: RoeConvention = "qns",
    gravity: GravityModel = EARTH,
    step: float = IMPULSE_FD_STEP,
) -> np.ndarray:
    """6x3 relative-element change per unit impulse in the deputy RTN frame.

    Linearized about zero separation, where the deputy RTN frame coincides
    with the chief's.
    """
    r0, v0 = eci_from_oe(chief, gravity)
    rot = rtn_rotation(r0, v0)

    def kick(dv_rtn: np.ndarray) -> np.ndarray:
        deputy = oe_from_eci(r0, v0 + rot.T @ dv_rtn, gravity)
        return roe_from_pair(chief, deputy, convention).as_array()

    return _jacobian(kick, np.zeros(3), step)


def roe_to_rtn_map(
    chief: ClassicalOE,
    convention: RoeConvention = "qns",
    gravity: GravityModel = EARTH,
    step: float = ROE_FD_STEP,
) -> np.ndarray:
    """6x6 linearization of the relative-element -> RTN state map."""

    def to_rtn(roe_vec: np.ndarray) -> np.ndarray:
        state = rtn_from_roe(chief, Roe.from_array(roe_vec, convention), gravity)
        return state.as_array()

    return _jacobian(to_rtn, np.zeros(6), step)


def linear_maps_at(
    chief: ClassicalOE,
    dt: float,
    convention: RoeConvention = "qns",
    gravity: GravityModel = EARTH,
) -> LinearMaps:
    """Bundle of stm (over [t, t+dt]), cim, and psi at the chief's epoch."""
    return LinearMaps(
        stm=stm_roe(chief, dt, convention, gravity),
        cim=control_influence(chief, convention, gravity),
        psi=roe_to_rtn_map(chief, convention, gravity),
    )
