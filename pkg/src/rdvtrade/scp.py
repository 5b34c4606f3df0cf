"""Sequential convex refinement of relaxed or surrogate-generated plans.

Each iteration linearizes the worst-substep keep-out margin of every
constrained burn epoch about the reference plan (dispersion covariances
frozen at the reference), solves the penalized conic subproblem, and scores
the candidate with a merit function

    J + w * (sum of positive margins + l1 terminal slack)

in which J stays in physical m/s (it is order one for every supported
family) and the slack terms are normalized. A three-zone acceptance rule on
the actual-versus-predicted merit decrease drives the trust region; the
penalty weight grows whenever an accepted iterate fails to shrink its
constraint violation fast enough.

The weight-growth rule is applied per violation class, with separate
weights for the safety slacks and the terminal slack. A single shared
weight cannot resolve references that trade one slack class against the
other: both sides of the trade scale together, so no amount of growth
changes the subproblem's preference. Class weights let the price of the
stagnating class rise relative to the satisfied one, which steers the
subproblem toward closing it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import convex, ocp
from . import uncertainty as unc


@dataclass(frozen=True)
class ScpConfig:
    """Refiner tuning constants; defaults are the benchmark set."""

    eps: float = 1e-3
    rho0: float = 0.0
    rho1: float = 0.25
    rho2: float = 0.7
    alpha1: float = 2.0
    alpha2: float = 2.0
    beta: float = 1.5
    gamma_shrink: float = 0.9
    r_init: float = 0.5
    r_min: float = 1e-6
    r_max: float = 10.0
    w_init: float = 10.0
    w_max: float = 1e9
    max_iter: int = 50
    viol_tol: float = 1e-6
    backend: str = "clarabel"
    trust_norm: str = "ball"

    def validate(self) -> None:
        if not 0.0 <= self.rho0 < self.rho1 < self.rho2 < 1.0:
            raise ValueError("need 0 <= rho0 < rho1 < rho2 < 1")
        if min(self.alpha1, self.alpha2) <= 1.0 or self.beta <= 1.0:
            raise ValueError("step/penalty growth factors must exceed 1")
        if not 0.0 < self.gamma_shrink < 1.0:
            raise ValueError("gamma_shrink must lie in (0, 1)")
        if not 0.0 < self.r_min <= self.r_init <= self.r_max:
            raise ValueError("trust radii must satisfy r_min <= r_init <= r_max")
        if not 0.0 < self.w_init <= self.w_max:
            raise ValueError("penalty weights must satisfy 0 < w_init <= w_max")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.eps <= 0.0 or self.viol_tol <= 0.0:
            raise ValueError("tolerances must be positive")


# Clearance buffer applied to the linearized margins inside subproblems, in
# the dimensionless margin units. Candidates then land strictly inside the
# feasible side rather than exactly on the boundary. The constant floor
# absorbs the model error the linearization cannot see at any step size:
# only the worst substep of each coast is linearized, so when a control
# change shifts the drift close pass in time, a neighbouring substep whose
# reference margin trailed the worst by less than the floor can overtake it
# without the model noticing. Measured overtakes cluster below a few 1e-3.
# In physical terms the floor is well under a metre of extra standoff at the
# zone boundary, which is fuel-free for all practical purposes. Merit and
# feasibility checks always measure the true margins against zero.
SAFETY_CLEARANCE = 3e-3

# The first-order truncation error grows quadratically with the step, so the
# buffer also carries an r^2 term. Without it, every large accepted step near
# the boundary is followed by a string of rejections while the trust radius
# walks back down, which wastes most of the iteration budget in the terminal
# fuel-polish phase. The term is capped so the opening iterations, which run
# at radii near r_init where the quadratic would dwarf every margin in the
# problem, keep a workable corridor.
CURVATURE_GAIN = 1.0
CURVATURE_CAP = 1e-2


def _clearance(radius: float) -> float:
    return SAFETY_CLEARANCE + CURVATURE_GAIN * min(radius * radius, CURVATURE_CAP)


@dataclass(frozen=True)
class SafetyLinearization:
    """Worst-substep margins and their gradients over the stacked plan."""

    rows: np.ndarray
    offsets: np.ndarray
    steps: np.ndarray
    substeps: np.ndarray


@dataclass(frozen=True)
class ScpResult:
    traj: ocp.Trajectory | None
    converged: bool
    status: str  # CONVERGED | MAX_ITER | NUMERICS | SUBPROBLEM_FAIL
    objective: float | None
    iterations: int
    history: list[dict] = field(default_factory=list)
    worst_margin: float = float("nan")
    terminal_residual_inf: float = float("nan")


@dataclass(frozen=True)
class _Evaluation:
    fuel: float
    margins: dict[int, np.ndarray]
    worst_margin: float
    viol_safety: float
    term_resid: np.ndarray
    viol_terminal: float

    @property
    def viol_total(self) -> float:
        return self.viol_safety + self.viol_terminal

    def merit(self, w_safe: float, w_term: float, u_scale: float = 1.0) -> float:
        # All three terms are dimensionless: fuel in units of the reference
        # control scale, margins already normalized, terminal slack in state
        # scale units.
        return (
            self.fuel / u_scale
            + w_safe * self.viol_safety
            + w_term * self.viol_terminal
        )


def _evaluate(
    scenario: ocp.Scenario,
    bundle: ocp.DynamicsBundle,
    params: unc.UncertaintyParams,
    states: np.ndarray,
    controls: np.ndarray,
    x_scale: np.ndarray,
) -> _Evaluation:
    margins = ocp.step_margins(scenario, bundle, params, states, controls)
    per_step_worst = (
        np.array([m.max() for m in margins.values()]) if margins else np.zeros(0)
    )
    term = scenario.x_final - ocp.terminal_state(bundle, states, controls)
    term_norm = term / x_scale
    return _Evaluation(
        fuel=float(np.linalg.norm(controls, axis=1).sum()),
        margins=margins,
        worst_margin=float(per_step_worst.max()) if per_step_worst.size else -np.inf,
        viol_safety=float(np.clip(per_step_worst, 0.0, None).sum()),
        term_resid=term_norm,
        viol_terminal=float(np.abs(term_norm).sum()),
    )


def linearize_safety(
    scenario: ocp.Scenario,
    bundle: ocp.DynamicsBundle,
    params: unc.UncertaintyParams,
    states: np.ndarray,
    controls: np.ndarray,
    blocks: np.ndarray,
    margins: dict[int, np.ndarray] | None = None,
) -> SafetyLinearization:
    """First-order model of each epoch's worst margin in the stacked plan.

    Dispersion covariances are held at the reference, so the margin at the
    worst substep i* of epoch k is h(x0) = 1 - x0^T S x0 + qbar sqrt(x0^T W x0)
    with W = B^T Sigma B, B = -2 Phi^{-T} S, and x0 the post-burn state. The
    gradient chains through every impulse j <= k.
    """
    if margins is None:
        margins = ocp.step_margins(scenario, bundle, params, states, controls)
    n = scenario.n_steps
    qbar = params.qbar
    steps = sorted(margins.keys())
    rows = np.zeros((len(steps), 3 * n))
    offsets = np.zeros(len(steps))
    worst_idx = np.zeros(len(steps), dtype=int)
    for m_row, k in enumerate(steps):
        margin_k = margins[k]
        i_star = int(np.argmax(margin_k))
        worst_idx[m_row] = i_star
        offsets[m_row] = float(margin_k[i_star])
        x0 = states[k] + bundle.cim[k] @ controls[k]
        radius = scenario.safety.radius_at(bundle.times[k])
        s_mat = ocp.safety_matrix(bundle.drift_map[k, i_star], radius)
        sigma0 = ocp.dispersion_at_step(bundle, params, states[k], controls[k], k)
        sigma_i = unc.drift_cov_sequence(
            sigma0, bundle.drift_sub[k], params, bundle.a_scale
        )[i_star]
        b_mat = -2.0 * bundle.drift_stm_inv_t[k, i_star] @ s_mat
        w_mat = b_mat.T @ sigma_i @ b_mat
        wx = w_mat @ x0
        sx = s_mat @ x0
        sigma_term = float(x0 @ wx)
        grad_x0 = -2.0 * sx
        if sigma_term > 1e-300:
            grad_x0 = grad_x0 + qbar * wx / np.sqrt(sigma_term)
        for j in range(k + 1):
            sens = blocks[k, j] if j < k else bundle.cim[k]
            rows[m_row, 3 * j : 3 * j + 3] = grad_x0 @ sens
    return SafetyLinearization(
        rows=rows,
        offsets=offsets,
        steps=np.asarray(steps, dtype=int),
        substeps=worst_idx,
    )


def run_scp(
    scenario: ocp.Scenario,
    bundle: ocp.DynamicsBundle,
    params: unc.UncertaintyParams,
    init: ocp.Trajectory,
    config: ScpConfig | None = None,
) -> ScpResult:
    """Refine ``init`` until the tightened constraints hold at a local optimum."""
    config = config or ScpConfig()
    config.validate()
    n = scenario.n_steps
    blocks = convex.influence_blocks(bundle)
    a_term, b_term = convex.terminal_system(scenario, bundle, blocks)

    u_ref = np.asarray(init.controls, dtype=float).copy()
    cap = np.linalg.norm(u_ref, axis=1)
    over = cap > scenario.u_max
    if np.any(over):  # tolerate slightly out-of-cap warm starts
        u_ref[over] *= (scenario.u_max / cap[over])[:, None]
    states_ref = ocp.propagate_controls(scenario, bundle, u_ref)

    u_scale = max(float(np.abs(u_ref).max()), 1e-3)
    x_scale = convex.default_state_scale(scenario, states_ref)
    ref = _evaluate(scenario, bundle, params, states_ref, u_ref, x_scale)

    w_safe = config.w_init
    w_term = config.w_init
    radius = config.r_init
    # Violation levels at the moment each weight last grew. Growth triggers
    # compare against these anchors rather than the previous iterate, so a
    # slow but compounding crawl is never punished: the weight rises only
    # when the violation has genuinely stopped shrinking since it last rose.
    anchor_safe = ref.viol_safety
    anchor_term = ref.viol_terminal
    history: list[dict] = []
    status = "MAX_ITER"
    converged = False
    lin: SafetyLinearization | None = None
    iterations = 0

    def grow(weight: float) -> float | None:
        weight = config.beta * weight
        return None if weight > config.w_max else weight

    for iterations in range(1, config.max_iter + 1):
        if lin is None:
            lin = linearize_safety(
                scenario, bundle, params, states_ref, u_ref, blocks, ref.margins
            )
        problem = convex.ConicSubproblem(
            n_steps=n,
            u_max=scenario.u_max,
            terminal_map=a_term,
            terminal_target=b_term,
            reference=u_ref,
            x_scale=x_scale,
            u_scale=u_scale,
            safety_rows=lin.rows,
            safety_offsets=lin.offsets + _clearance(radius),
            trust_radius=radius,
            trust_norm=config.trust_norm,
            penalty_weight=w_safe,
            terminal_weight=w_term,
            soft_terminal=True,
        )
        sol = convex.solve_subproblem(problem, backend=config.backend)
        if not sol.ok and config.backend == "clarabel":
            # The interior-point backend can give up late in a run when the
            # penalty weights are large; the first-order backend is slower
            # but far less sensitive to that conditioning.
            sol = convex.solve_subproblem(problem, backend="scs")
        if not sol.ok:
            status = "SUBPROBLEM_FAIL"
            break

        u_new = sol.u
        lin_margins = lin.offsets + lin.rows @ (u_new - u_ref).ravel()
        lin_viol = float(np.clip(lin_margins, 0.0, None).sum())
        term_lin = (b_term - a_term @ u_new.ravel()) / x_scale
        merit_cand_lin = (
            float(np.linalg.norm(u_new, axis=1).sum()) / u_scale
            + w_safe * lin_viol
            + w_term * float(np.abs(term_lin).sum())
        )
        merit_ref = ref.merit(w_safe, w_term, u_scale)
        predicted = merit_ref - merit_cand_lin

        ref_safety_ok = ref.worst_margin <= config.viol_tol
        ref_terminal_ok = float(np.abs(ref.term_resid).max()) <= config.viol_tol

        if predicted <= config.eps:
            # No candidate in the trust region can change the merit by eps:
            # the subproblem itself certifies merit stagnation. Either the
            # reference is feasible (done), or the binding limit must move.
            # When the step sits on the trust boundary the ball itself is
            # what stops progress, so widen it; otherwise the weight of
            # whichever class is still violated is too low and must grow.
            if ref_safety_ok and ref_terminal_ok:
                status = "CONVERGED"
                converged = True
                break
            history.append(
                {
                    "iteration": iterations,
                    "rho": float("nan"),
                    "accepted": False,
                    "stalled": True,
                    "radius": radius,
                    "w_safe": w_safe,
                    "w_term": w_term,
                    "merit_ref": merit_ref,
                    "merit_new": merit_ref,
                    "violation": ref.viol_total,
                }
            )
            grown_safe = grow(w_safe) if not ref_safety_ok else w_safe
            grown_term = grow(w_term) if not ref_terminal_ok else w_term
            if grown_safe is None or grown_term is None:
                status = "NUMERICS"
                break
            if not ref_safety_ok:
                anchor_safe = ref.viol_safety
            if not ref_terminal_ok:
                anchor_term = ref.viol_terminal
            w_safe, w_term = grown_safe, grown_term
            continue

        states_new = ocp.propagate_controls(scenario, bundle, u_new)
        cand = _evaluate(scenario, bundle, params, states_new, u_new, x_scale)
        actual = merit_ref - cand.merit(w_safe, w_term, u_scale)
        rho = actual / predicted
        accepted = rho >= config.rho0
        history.append(
            {
                "iteration": iterations,
                "rho": float(rho),
                "accepted": bool(accepted),
                "stalled": False,
                "radius": radius,
                "w_safe": w_safe,
                "w_term": w_term,
                "merit_ref": float(merit_ref),
                "merit_new": float(cand.merit(w_safe, w_term, u_scale)),
                "violation": float(cand.viol_total),
            }
        )

        if not accepted:
            radius = max(radius / config.alpha1, config.r_min)
            continue

        prev_merit = merit_ref
        u_ref, states_ref = u_new, states_new
        ref = cand
        lin = None
        if rho >= config.rho2:
            radius = min(config.alpha2 * radius, config.r_max)

        feasible_now = (
            ref.worst_margin <= config.viol_tol
            and float(np.abs(ref.term_resid).max()) <= config.viol_tol
        )
        if abs(prev_merit - ref.merit(w_safe, w_term, u_scale)) < config.eps and feasible_now:
            status = "CONVERGED"
            converged = True
            break
        # A class fails the shrink test when it is violated now and has not
        # shrunk by gamma relative to the best level it has reached. The
        # ratchet covers both a class springing from satisfied to violated
        # (never a shrink) and a plateau after steady progress.
        anchor_safe = min(anchor_safe, ref.viol_safety)
        anchor_term = min(anchor_term, ref.viol_terminal)
        stagnant_safe = (
            ref.viol_safety > config.viol_tol
            and ref.viol_safety > config.gamma_shrink * anchor_safe
        )
        stagnant_term = (
            ref.viol_terminal > config.viol_tol
            and ref.viol_terminal > config.gamma_shrink * anchor_term
        )
        grown_safe = grow(w_safe) if stagnant_safe else w_safe
        grown_term = grow(w_term) if stagnant_term else w_term
        if grown_safe is None or grown_term is None:
            status = "NUMERICS"
            break
        w_safe, w_term = grown_safe, grown_term

    traj = ocp.Trajectory(
        states=states_ref,
        controls=u_ref,
        scenario_id=scenario.scenario_id,
        source="SCP",
    )
    return ScpResult(
        traj=traj,
        converged=converged,
        status=status,
        objective=ref.fuel,
        iterations=iterations,
        history=history,
        worst_margin=ref.worst_margin,
        terminal_residual_inf=float(np.abs(ref.term_resid).max()),
    )


def refine(
    scenario: ocp.Scenario,
    params: unc.UncertaintyParams | None = None,
    init: ocp.Trajectory | None = None,
    config: ScpConfig | None = None,
) -> ScpResult:
    """Convenience wrapper: relax first when no warm start is supplied."""
    params = params or unc.UncertaintyParams()
    bundle = ocp.dynamics_bundle(scenario)
    if init is None:
        relaxed = convex.solve_relaxed(scenario, bundle)
        if not relaxed.traj:
            return ScpResult(
                traj=None,
                converged=False,
                status="SUBPROBLEM_FAIL",
                objective=None,
                iterations=0,
            )
        init = relaxed.traj
    return run_scp(scenario, bundle, params, init, config)
