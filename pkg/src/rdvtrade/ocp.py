"""Rendezvous problem definitions: scenarios, trajectories, safety margins.

A scenario fixes the target orbit, the impulse grid (n_steps burns spaced
dt seconds apart), dimensionless relative-element boundary conditions, the
per-burn magnitude cap, and the passive-safety drift specification: after
every burn the spacecraft must be able to coast for ``drift_horizon_s``
seconds without entering a keep-out sphere around the target, up to the
per-step violation probability budget.

The transition/control/output maps for one scenario are precomputed into a
:class:`DynamicsBundle`; bundles depend only on the target, the grid, and
the drift specification, so families that share a target reuse them via a
process-level cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import orbits as ob
from . import uncertainty as unc


@dataclass(frozen=True)
class SafetySchedule:
    """Keep-out radius schedule: a larger sphere until t_switch, then a
    smaller one for the close approach."""

    radius_before: float
    radius_after: float
    t_switch: float

    def radius_at(self, t: float) -> float:
        return self.radius_before if t < self.t_switch else self.radius_after

    def validate(self) -> None:
        if self.radius_before < self.radius_after:
            raise ValueError(
                "keep-out schedule must shrink at t_switch: "
                f"{self.radius_before} < {self.radius_after}"
            )
        if min(self.radius_before, self.radius_after) <= 0.0:
            raise ValueError("keep-out radii must be positive")


@dataclass(frozen=True)
class Scenario:
    """One rendezvous instance in dimensionless relative elements."""

    scenario_id: str
    family: str
    target: ob.ClassicalOE
    convention: ob.RoeConvention
    n_steps: int
    dt: float
    u_max: float
    x_init: np.ndarray
    x_final: np.ndarray
    drift_horizon_s: float
    n_substeps: int
    safety: SafetySchedule
    relax_terminal_safety: bool = False
    gravity: ob.GravityModel = ob.EARTH

    def validate(self) -> None:
        self.target.validate()
        self.safety.validate()
        if self.family not in ("leo", "elliptic"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.n_steps < 2:
            raise ValueError("need at least two impulse epochs")
        if self.dt <= 0.0 or self.drift_horizon_s <= 0.0:
            raise ValueError("time steps must be positive")
        if self.n_substeps < 1:
            raise ValueError("need at least one drift substep")
        if self.u_max <= 0.0:
            raise ValueError("per-burn cap must be positive")
        if np.asarray(self.x_init).shape != (6,) or np.asarray(self.x_final).shape != (6,):
            raise ValueError("boundary states must be 6-vectors")

    @property
    def flight_time(self) -> float:
        return (self.n_steps - 1) * self.dt

    def step_times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    def maps_key(self) -> tuple:
        t = self.target
        g = self.gravity
        return (
            round(t.a, 6),
            round(t.e, 12),
            round(t.i, 12),
            round(t.raan, 12),
            round(t.argp, 12),
            round(t.mean_anomaly, 12),
            g.mu,
            g.j2,
            g.radius,
            self.convention,
            self.n_steps,
            round(self.dt, 9),
            round(self.drift_horizon_s, 6),
            self.n_substeps,
        )

    def to_dict(self) -> dict:
        t = self.target
        return {
            "scenario_id": self.scenario_id,
            "family": self.family,
            "target": {
                "a": t.a,
                "e": t.e,
                "i": t.i,
                "raan": t.raan,
                "argp": t.argp,
                "mean_anomaly": t.mean_anomaly,
            },
            "convention": self.convention,
            "n_steps": self.n_steps,
            "dt": self.dt,
            "u_max": self.u_max,
            "x_init": [float(v) for v in self.x_init],
            "x_final": [float(v) for v in self.x_final],
            "drift_horizon_s": self.drift_horizon_s,
            "n_substeps": self.n_substeps,
            "safety": {
                "radius_before": self.safety.radius_before,
                "radius_after": self.safety.radius_after,
                "t_switch": self.safety.t_switch,
            },
            "relax_terminal_safety": self.relax_terminal_safety,
            "gravity": {
                "mu": self.gravity.mu,
                "j2": self.gravity.j2,
                "radius": self.gravity.radius,
            },
        }


def scenario_from_dict(data: dict) -> Scenario:
    target = ob.ClassicalOE(**data["target"])
    safety = SafetySchedule(**data["safety"])
    gravity = ob.GravityModel(**data.get("gravity", {}))
    scenario = Scenario(
        scenario_id=data["scenario_id"],
        family=data["family"],
        target=target,
        convention=data["convention"],
        n_steps=int(data["n_steps"]),
        dt=float(data["dt"]),
        u_max=float(data["u_max"]),
        x_init=np.asarray(data["x_init"], dtype=float),
        x_final=np.asarray(data["x_final"], dtype=float),
        drift_horizon_s=float(data["drift_horizon_s"]),
        n_substeps=int(data["n_substeps"]),
        safety=safety,
        relax_terminal_safety=bool(data.get("relax_terminal_safety", False)),
        gravity=gravity,
    )
    scenario.validate()
    return scenario


@dataclass(frozen=True)
class Trajectory:
    """Impulse plan plus the pre-burn state at every epoch."""

    states: np.ndarray
    controls: np.ndarray
    scenario_id: str = ""
    source: str = ""

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    @property
    def cost(self) -> float:
        return float(np.linalg.norm(self.controls, axis=1).sum())

    def with_source(self, source: str) -> "Trajectory":
        return replace(self, source=source)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "source": self.source,
            "states": [[float(v) for v in row] for row in self.states],
            "controls": [[float(v) for v in row] for row in self.controls],
        }


def trajectory_from_dict(data: dict) -> Trajectory:
    return Trajectory(
        states=np.asarray(data["states"], dtype=float),
        controls=np.asarray(data["controls"], dtype=float),
        scenario_id=data.get("scenario_id", ""),
        source=data.get("source", ""),
    )


@dataclass(frozen=True)
class DynamicsBundle:
    """Precomputed linear maps for one scenario grid.

    step_stm[k] advances epoch k to k+1 (k < n-1). cim/psi are per-epoch.
    Drift arrays cover the coast after each burn: drift_stm[k, i] is the
    accumulated transition from epoch k to substep time tau_{i+1}; drift_sub
    is the corresponding per-substep chain, and drift_map composes the local
    output map at the substep with the accumulated transition (relative
    elements at burn epoch -> RTN state at the substep).
    """

    key: tuple
    times: np.ndarray
    step_stm: np.ndarray
    cim: np.ndarray
    psi: np.ndarray
    drift_stm: np.ndarray
    drift_stm_inv_t: np.ndarray
    drift_sub: np.ndarray
    drift_map: np.ndarray
    target_at_step: tuple[ob.ClassicalOE, ...]
    a_scale: float

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def n_substeps(self) -> int:
        return self.drift_stm.shape[1]


def build_bundle(scenario: Scenario) -> DynamicsBundle:
    """Evaluate every linear map a scenario needs. Pure function of maps_key."""
    n = scenario.n_steps
    n_s = scenario.n_substeps
    conv = scenario.convention
    grav = scenario.gravity
    tau = scenario.drift_horizon_s / n_s

    times = scenario.step_times()
    chiefs = [scenario.target]
    for _ in range(n - 1):
        chiefs.append(ob.mean_propagate(chiefs[-1], scenario.dt, grav))

    step_stm = np.stack(
        [ob.stm_roe(chiefs[k], scenario.dt, conv, grav) for k in range(n - 1)]
    ) if n > 1 else np.zeros((0, 6, 6))
    cim = np.stack([ob.control_influence(c, conv, grav) for c in chiefs])
    psi = np.stack([ob.roe_to_rtn_map(c, conv, grav) for c in chiefs])

    drift_stm = np.empty((n, n_s, 6, 6))
    drift_map = np.empty((n, n_s, 6, 6))
    for k, chief in enumerate(chiefs):
        for i in range(n_s):
            t_i = (i + 1) * tau
            acc = ob.stm_roe(chief, t_i, conv, grav)
            drift_stm[k, i] = acc
            chief_i = ob.mean_propagate(chief, t_i, grav)
            drift_map[k, i] = ob.roe_to_rtn_map(chief_i, conv, grav) @ acc

    drift_stm_inv_t = np.linalg.inv(drift_stm).transpose(0, 1, 3, 2)
    drift_sub = np.empty_like(drift_stm)
    drift_sub[:, 0] = drift_stm[:, 0]
    for i in range(1, n_s):
        drift_sub[:, i] = drift_stm[:, i] @ np.linalg.inv(drift_stm[:, i - 1])

    return DynamicsBundle(
        key=scenario.maps_key(),
        times=times,
        step_stm=step_stm,
        cim=cim,
        psi=psi,
        drift_stm=drift_stm,
        drift_stm_inv_t=drift_stm_inv_t,
        drift_sub=drift_sub,
        drift_map=drift_map,
        target_at_step=tuple(chiefs),
        a_scale=scenario.target.a,
    )


_BUNDLE_CACHE: dict[tuple, DynamicsBundle] = {}


def dynamics_bundle(scenario: Scenario, use_cache: bool = True) -> DynamicsBundle:
    """Cached :func:`build_bundle`."""
    key = scenario.maps_key()
    if use_cache and key in _BUNDLE_CACHE:
        return _BUNDLE_CACHE[key]
    bundle = build_bundle(scenario)
    if use_cache:
        _BUNDLE_CACHE[key] = bundle
    return bundle


def clear_bundle_cache() -> None:
    _BUNDLE_CACHE.clear()


def propagate_controls(
    scenario: Scenario, bundle: DynamicsBundle, controls: np.ndarray
) -> np.ndarray:
    """States induced by an impulse plan: x_{k+1} = stm_k (x_k + cim_k u_k)."""
    controls = np.asarray(controls, dtype=float)
    n = scenario.n_steps
    states = np.empty((n, 6))
    states[0] = scenario.x_init
    for k in range(n - 1):
        states[k + 1] = bundle.step_stm[k] @ (
            states[k] + bundle.cim[k] @ controls[k]
        )
    return states


def terminal_state(
    bundle: DynamicsBundle, states: np.ndarray, controls: np.ndarray
) -> np.ndarray:
    """Post-burn state at the last epoch."""
    return states[-1] + bundle.cim[-1] @ controls[-1]


def terminal_residual(
    scenario: Scenario, bundle: DynamicsBundle, traj: Trajectory
) -> np.ndarray:
    return scenario.x_final - terminal_state(bundle, traj.states, traj.controls)


def dynamics_residual(
    scenario: Scenario, bundle: DynamicsBundle, traj: Trajectory
) -> float:
    """Worst-case defect of the transition chain, plus the initial tie-in."""
    expected = propagate_controls(scenario, bundle, traj.controls)
    return float(np.abs(expected - traj.states).max())


def safety_matrix(drift_map_ki: np.ndarray, radius: float) -> np.ndarray:
    """Quadratic keep-out form for one (step, substep) pair.

    ``x^T S x >= 1`` keeps the drifted position outside the sphere.
    """
    pos_rows = drift_map_ki[:3] / radius
    return pos_rows.T @ pos_rows


def chance_margin(
    x0: np.ndarray,
    drift_map_k: np.ndarray,
    drift_stm_inv_t_k: np.ndarray,
    sigmas: np.ndarray,
    radius: float,
    qbar: float,
) -> np.ndarray:
    """Tightened keep-out margins over all drift substeps of one burn epoch.

    Returns ``1 - x0^T S_i x0 + qbar * sqrt(g_i^T Sigma_i g_i)`` per substep;
    any positive entry means the chance constraint is violated there.
    """
    x0 = np.asarray(x0, dtype=float)
    pos = drift_map_k[:, :3, :] @ x0 / radius
    quad = np.einsum("ij,ij->i", pos, pos)
    s_x0 = np.einsum("ikj,ik->ij", drift_map_k[:, :3, :] / radius, pos)
    g = -2.0 * np.einsum("ijk,ik->ij", drift_stm_inv_t_k, s_x0)
    var = np.einsum("ij,ijk,ik->i", g, sigmas, g)
    return 1.0 - quad + qbar * np.sqrt(np.maximum(var, 0.0))


def dispersion_at_step(
    bundle: DynamicsBundle,
    params: unc.UncertaintyParams,
    x_k: np.ndarray,
    u_k: np.ndarray,
    k: int,
) -> np.ndarray:
    """Post-burn dispersion covariance at epoch k."""
    return unc.dispersion_cov(
        x_k, u_k, bundle.psi[k], bundle.cim[k], params, bundle.a_scale
    )


def safety_steps(scenario: Scenario) -> range:
    """Epoch indices whose post-burn drift is safety-constrained."""
    last = scenario.n_steps if not scenario.relax_terminal_safety else scenario.n_steps - 1
    return range(0, last)


def step_margins(
    scenario: Scenario,
    bundle: DynamicsBundle,
    params: unc.UncertaintyParams,
    states: np.ndarray,
    controls: np.ndarray,
    steps: Iterable[int] | None = None,
) -> dict[int, np.ndarray]:
    """Chance margins for each requested epoch (default: all constrained)."""
    if steps is None:
        steps = safety_steps(scenario)
    qbar = params.qbar
    out: dict[int, np.ndarray] = {}
    for k in steps:
        x0 = states[k] + bundle.cim[k] @ controls[k]
        sigma0 = dispersion_at_step(bundle, params, states[k], controls[k], k)
        sigmas = unc.drift_cov_sequence(
            sigma0, bundle.drift_sub[k], params, bundle.a_scale
        )
        radius = scenario.safety.radius_at(bundle.times[k])
        out[k] = chance_margin(
            x0,
            bundle.drift_map[k],
            bundle.drift_stm_inv_t[k],
            sigmas,
            radius,
            qbar,
        )
    return out


def violation_flags(
    scenario: Scenario,
    bundle: DynamicsBundle,
    params: unc.UncertaintyParams,
    traj: Trajectory,
    tol: float = 1e-6,
) -> np.ndarray:
    """Per-epoch violation indicators over all n steps.

    An epoch counts when its drift breaches the keep-out chance constraint
    (only constrained epochs can) or its burn exceeds the per-burn cap.
    """
    flags = np.zeros(scenario.n_steps, dtype=int)
    margins = step_margins(
        scenario, bundle, params, traj.states, traj.controls
    )
    for k, m in margins.items():
        if float(m.max()) > tol:
            flags[k] = 1
    over_cap = np.linalg.norm(traj.controls, axis=1) > scenario.u_max + tol
    flags[over_cap] = 1
    return flags


def violation_suffix(flags: np.ndarray) -> np.ndarray:
    """Remaining-violation counts c_k = sum of flags from k on."""
    return np.cumsum(np.asarray(flags, dtype=int)[::-1])[::-1]


def count_violations(
    scenario: Scenario,
    bundle: DynamicsBundle,
    params: unc.UncertaintyParams,
    traj: Trajectory,
    tol: float = 1e-6,
) -> int:
    """Cumulative violation count c_1 for a trajectory."""
    return int(
        violation_flags(scenario, bundle, params, traj, tol).sum()
    )


def roe_from_rtn_linear(psi_k: np.ndarray, rtn: np.ndarray) -> np.ndarray:
    """Invert the local linear output map (RTN state -> relative elements)."""
    return np.linalg.solve(psi_k, np.asarray(rtn, dtype=float))
