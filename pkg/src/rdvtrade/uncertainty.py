"""Navigation, execution, and drift uncertainty models.

Covariances live in the dimensionless relative-element space used by the
dynamics. The range-dependent navigation floor and the per-substep process
noise are specified in meter-scaled relative elements, so both take the
chief semimajor axis explicitly and divide it out (once for standard
deviations, twice for covariances).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special


def inv_norm_cdf(p: float) -> float:
    """Inverse of the standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    return float(special.ndtri(p))


@dataclass(frozen=True)
class UncertaintyParams:
    """Navigation-floor, execution-noise, and process-noise parameters.

    nav_far / nav_near
        Per-component position-scaled standard deviations [m] applied above
        ``range_far`` and below ``range_near`` respectively, blended linearly
        in between. The navigation covariance is range-scaled:
        ``Sigma_nav = range * s s^T`` (rank one) or its diagonal variant.
    sigma_fixed_mag / sigma_prop_mag
        Execution noise along the thrust axis: fixed floor [m/s] and
        magnitude-proportional part [-].
    sigma_fixed_dir / sigma_prop_dir
        Same split for the two axes transverse to the thrust.
    process_noise
        Per-substep white acceleration-equivalent variance [m^2], isotropic.
    violation_prob
        Per-step probability budget for the keep-out constraint.
    rank_one_nav
        Keep the specified rank-one navigation structure; the diagonal
        variant is available for sensitivity studies.
    """

    nav_far: np.ndarray = field(
        default_factory=lambda: np.array([4.0, 400.0, 4.0, 2.0, 2.0, 4.0]) * 1e-5
    )
    nav_near: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 40.0, 20.0, 20.0, 20.0, 20.0]) * 1e-4
    )
    range_far: float = 1.0e4
    range_near: float = 1.0e3
    sigma_fixed_mag: float = 2.0e-3
    sigma_prop_mag: float = 3.0e-4
    sigma_fixed_dir: float = 0.3e-3
    sigma_prop_dir: float = 3.0e-4
    process_noise: float = 1.0e-6
    violation_prob: float = 0.003
    rank_one_nav: bool = True

    @property
    def qbar(self) -> float:
        """Tightening quantile |q(violation_prob)|."""
        return abs(inv_norm_cdf(self.violation_prob))


def nav_floor(range_m: float, params: UncertaintyParams) -> np.ndarray:
    """Blended navigation floor vector [m] at the given separation."""
    if range_m >= params.range_far:
        return params.nav_far.copy()
    if range_m <= params.range_near:
        return params.nav_near.copy()
    span = params.range_far - params.range_near
    w_far = (range_m - params.range_near) / span
    return w_far * params.nav_far + (1.0 - w_far) * params.nav_near


def nav_cov(
    roe: np.ndarray,
    psi: np.ndarray,
    params: UncertaintyParams,
    a_scale: float,
) -> np.ndarray:
    """Range-scaled navigation covariance in dimensionless elements.

    ``psi`` is the local linear map to the RTN state; the separation that
    drives the floor schedule is the mapped position norm in meters.
    """
    rho = float(np.linalg.norm((psi @ np.asarray(roe, dtype=float))[:3]))
    s = nav_floor(rho, params) / a_scale
    if params.rank_one_nav:
        return rho * np.outer(s, s)
    return rho * np.diag(s * s)


# Burn magnitude, in multiples of the fixed execution floor, at which the
# command-aligned error frame is trusted halfway. See gates_cov.
FRAME_HALF_TRUST_FLOORS = 4.0


def gates_cov(u: np.ndarray, params: UncertaintyParams) -> np.ndarray:
    """Execution-noise covariance of one impulse, in the RTN frame [m^2/s^2].

    Fixed-plus-proportional variances along the thrust direction and the two
    transverse axes. The command-aligned error frame only makes sense for
    burns large enough that the realized impulse actually points near the
    commanded direction; a burn smaller than its own fixed execution floor
    is noise-dominated and its commanded direction carries no information
    about the error geometry. The frame-attached anisotropy therefore fades
    in quadratically with the magnitude relative to the fixed floor, falling
    back to RTN-axis-aligned floors for vanishing burns. Without the fade
    the covariance gradient grows like 1/|u| near zero thrust, which poisons
    any consumer that differentiates or locally freezes it. The half-trust
    point sits a few floors up because realized-direction scatter is still
    tens of degrees at twice the floor, and anything that consumes a frozen
    or differentiated copy of this matrix needs the crossover to be wide,
    not just centred correctly.
    """
    u = np.asarray(u, dtype=float)
    mag = float(np.linalg.norm(u))
    var_along = params.sigma_fixed_mag**2 + (params.sigma_prop_mag * mag) ** 2
    var_across = params.sigma_fixed_dir**2 + (params.sigma_prop_dir * mag) ** 2
    unaligned = np.diag([var_along, var_across, var_across])
    if mag < 1e-12:
        return unaligned
    e1 = u / mag
    pivot = np.array([0.0, 0.0, 1.0])
    lateral = np.cross(e1, pivot)
    if np.linalg.norm(lateral) < 1e-12:
        pivot = np.array([1.0, 0.0, 0.0])
        lateral = np.cross(e1, pivot)
    e2 = lateral / np.linalg.norm(lateral)
    e3 = np.cross(e1, e2)
    frame = np.column_stack([e1, e2, e3])
    aligned = frame @ np.diag([var_along, var_across, var_across]) @ frame.T
    half_trust = FRAME_HALF_TRUST_FLOORS * params.sigma_fixed_mag
    weight = mag * mag / (mag * mag + half_trust * half_trust)
    return weight * aligned + (1.0 - weight) * unaligned


def dispersion_cov(
    roe: np.ndarray,
    u: np.ndarray,
    psi: np.ndarray,
    cim: np.ndarray,
    params: UncertaintyParams,
    a_scale: float,
) -> np.ndarray:
    """Post-burn state dispersion: navigation floor plus executed-impulse noise."""
    sigma = nav_cov(roe, psi, params, a_scale)
    exe = gates_cov(u, params)
    return sigma + cim @ exe @ cim.T


def drift_cov_sequence(
    sigma0: np.ndarray,
    substep_stms: np.ndarray,
    params: UncertaintyParams,
    a_scale: float,
) -> np.ndarray:
    """Covariance at each drift substep under the linear recursion.

    ``substep_stms`` has shape (n_s, 6, 6), entry i mapping substep i to
    substep i+1. Returns shape (n_s, 6, 6): the covariance after 1..n_s
    substeps. Process noise is isotropic in meter-scaled elements.
    """
    q = (params.process_noise / a_scale**2) * np.eye(6)
    out = np.empty_like(substep_stms)
    sigma = np.asarray(sigma0, dtype=float)
    for i in range(substep_stms.shape[0]):
        stm = substep_stms[i]
        sigma = stm @ sigma @ stm.T + q
        out[i] = sigma
    return out
