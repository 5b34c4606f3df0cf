"""Conic subproblem assembly and the fuel-optimal convex relaxation.

States are eliminated through the linear transition chain, leaving the
stacked impulse vector as the only physical decision variable. The full
subproblem (used by the sequential refiner) carries linearized keep-out
half-spaces with nonnegative violation slacks, an l1-penalized soft
terminal equality, a trust-region ball in normalized controls, and per-burn
second-order-cone caps. Dropping all of those except the hard terminal
equality and the caps gives the relaxation.

Assembly targets the standard embedded form ``A z + s = b, s in K`` with
cones ordered (zero, nonnegative, second-order), which both supported
backends consume directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import ocp


@dataclass(frozen=True)
class ConicSubproblem:
    """One fuel-plus-penalty subproblem over stacked impulses."""

    n_steps: int
    u_max: float
    terminal_map: np.ndarray
    terminal_target: np.ndarray
    reference: np.ndarray
    x_scale: np.ndarray
    u_scale: float = 1.0
    safety_rows: np.ndarray | None = None
    safety_offsets: np.ndarray | None = None
    trust_radius: float | None = None
    trust_norm: str = "ball"
    penalty_weight: float = 0.0
    terminal_weight: float | None = None
    soft_terminal: bool = False

    @property
    def n_safety(self) -> int:
        return 0 if self.safety_rows is None else self.safety_rows.shape[0]

    def validate(self) -> None:
        n = self.n_steps
        if self.terminal_map.shape != (6, 3 * n):
            raise ValueError("terminal map must be 6 x 3n")
        if self.reference.shape != (n, 3):
            raise ValueError("reference plan must be n x 3")
        if (self.safety_rows is None) != (self.safety_offsets is None):
            raise ValueError("safety rows and offsets must come together")
        if self.safety_rows is not None and self.safety_rows.shape[1] != 3 * n:
            raise ValueError("safety rows must span the stacked impulse vector")
        if self.trust_norm not in ("ball", "box"):
            raise ValueError("trust_norm must be 'ball' or 'box'")
        w_term = (
            self.penalty_weight
            if self.terminal_weight is None
            else self.terminal_weight
        )
        if self.soft_terminal and w_term <= 0.0:
            raise ValueError("soft terminal needs a positive penalty weight")


@dataclass(frozen=True)
class ConicSolution:
    """Backend-independent subproblem outcome.

    ``objective`` is the physical fuel cost sum ||u_k||; ``penalty`` is the
    weighted slack total in normalized units. Residuals are recomputed from
    the returned point, not taken on faith from the backend.
    """

    status: str
    u: np.ndarray | None
    objective: float | None
    penalty: float
    safety_slack: np.ndarray
    terminal_slack: np.ndarray
    iterations: int
    solve_time: float
    gap_abs: float
    primal_residual: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "OPTIMAL" and self.u is not None


def influence_blocks(bundle: ocp.DynamicsBundle) -> np.ndarray:
    """Sensitivities of pre-burn states to impulses: blocks[k, j] = dx_k/du_j.

    Upper-triangular part (j >= k) is zero: impulses act causally.
    """
    n = bundle.n_steps
    blocks = np.zeros((n, n, 6, 3))
    for k in range(n - 1):
        stm = bundle.step_stm[k]
        if k > 0:
            blocks[k + 1, :k] = np.einsum("ab,jbc->jac", stm, blocks[k, :k])
        blocks[k + 1, k] = stm @ bundle.cim[k]
    return blocks


def terminal_system(
    scenario: ocp.Scenario,
    bundle: ocp.DynamicsBundle,
    blocks: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Linear map A u = b equivalent to the post-burn terminal equality."""
    n = scenario.n_steps
    if blocks is None:
        blocks = influence_blocks(bundle)
    a_term = np.zeros((6, 3 * n))
    for j in range(n - 1):
        a_term[:, 3 * j : 3 * j + 3] = blocks[n - 1, j]
    a_term[:, 3 * (n - 1) :] = bundle.cim[n - 1]
    free_drift = scenario.x_init.copy()
    for k in range(n - 1):
        free_drift = bundle.step_stm[k] @ free_drift
    b_term = scenario.x_final - free_drift
    return a_term, b_term


def default_state_scale(
    scenario: ocp.Scenario, reference_states: np.ndarray | None = None
) -> np.ndarray:
    """Per-dimension normalization for terminal residuals.

    Uses the larger of the boundary conditions and reference sweep per
    dimension, floored at 1% of the global scale so that identically-zero
    dimensions (planar scenarios) stay well posed.
    """
    stack = [np.abs(scenario.x_init), np.abs(scenario.x_final)]
    if reference_states is not None:
        stack.append(np.abs(reference_states).max(axis=0))
    per_dim = np.max(np.vstack(stack), axis=0)
    floor = max(1e-2 * per_dim.max(), 1e-12)
    return np.maximum(per_dim, floor)


def solve_subproblem(
    problem: ConicSubproblem, backend: str = "clarabel"
) -> ConicSolution:
    """Assemble the conic program and hand it to the requested backend."""
    problem.validate()
    n = problem.n_steps
    m_safe = problem.n_safety
    soft = problem.soft_terminal
    n_u = 3 * n
    n_t = n
    n_slack = m_safe
    n_elastic = 12 if soft else 0
    n_vars = n_u + n_t + n_slack + n_elastic
    off_t = n_u
    off_s = n_u + n_t
    off_e = off_s + n_slack  # e_plus then e_minus

    q = np.zeros(n_vars)
    q[off_t : off_t + n_t] = 1.0
    if n_slack:
        q[off_s : off_s + n_slack] = problem.penalty_weight
    if n_elastic:
        w_term = (
            problem.penalty_weight
            if problem.terminal_weight is None
            else problem.terminal_weight
        )
        q[off_e : off_e + n_elastic] = w_term
    # Uniform objective scaling leaves the minimizer unchanged but keeps the
    # coefficient spread seen by the solver bounded when penalty weights have
    # grown by many orders of magnitude.
    q_span = float(q.max())
    if q_span > 1e4:
        q = q * (1e4 / q_span)

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    b_parts: list[np.ndarray] = []
    row0 = 0

    def add_coo(r, c, v):
        rows.append(np.asarray(r, dtype=np.int64))
        cols.append(np.asarray(c, dtype=np.int64))
        vals.append(np.asarray(v, dtype=float))

    # --- zero cone: terminal equality, row-normalized ---------------------
    a_norm = problem.terminal_map / problem.x_scale[:, None]
    b_norm = problem.terminal_target / problem.x_scale
    rr, cc = np.nonzero(a_norm)
    add_coo(row0 + rr, cc, a_norm[rr, cc])
    if soft:
        idx = np.arange(6)
        add_coo(row0 + idx, off_e + idx, -np.ones(6))
        add_coo(row0 + idx, off_e + 6 + idx, np.ones(6))
    b_parts.append(b_norm)
    row0 += 6
    n_zero = 6

    # --- nonnegative cone --------------------------------------------------
    nonneg_start = row0
    if m_safe:
        # g^T (u - u_ref) + h <= s  ->  b - (G u - s) >= 0, b = G u_ref - h
        g = problem.safety_rows
        rr, cc = np.nonzero(g)
        add_coo(row0 + rr, cc, g[rr, cc])
        idx = np.arange(m_safe)
        add_coo(row0 + idx, off_s + idx, -np.ones(m_safe))
        b_parts.append(g @ problem.reference.ravel() - problem.safety_offsets)
        row0 += m_safe
        # s >= 0
        add_coo(row0 + idx, off_s + idx, -np.ones(m_safe))
        b_parts.append(np.zeros(m_safe))
        row0 += m_safe
    if n_elastic:
        idx = np.arange(n_elastic)
        add_coo(row0 + idx, off_e + idx, -np.ones(n_elastic))
        b_parts.append(np.zeros(n_elastic))
        row0 += n_elastic
    if problem.trust_radius is not None and problem.trust_norm == "box":
        # Elementwise |u_i - ref_i| / u_scale <= r as paired one-sided rows.
        u_ref = problem.reference.ravel()
        idx = np.arange(n_u)
        inv = np.full(n_u, 1.0 / problem.u_scale)
        add_coo(row0 + idx, idx, inv)
        b_parts.append(problem.trust_radius + u_ref / problem.u_scale)
        row0 += n_u
        add_coo(row0 + idx, idx, -inv)
        b_parts.append(problem.trust_radius - u_ref / problem.u_scale)
        row0 += n_u
    n_nonneg = row0 - nonneg_start

    # --- second-order cones: trust ball, then epigraph and cap per burn -----
    soc_dims: list[int] = []
    if problem.trust_radius is not None and problem.trust_norm == "ball":
        # ||u - u_ref||_2 / u_scale <= r. The total normalized step is
        # capped, so the model error the subproblem can accumulate does not
        # grow with the number of burns the plan happens to have.
        u_ref = problem.reference.ravel()
        idx = np.arange(n_u)
        add_coo(row0 + 1 + idx, idx, np.full(n_u, 1.0 / problem.u_scale))
        head = np.array([problem.trust_radius])
        b_parts.append(np.concatenate([head, u_ref / problem.u_scale]))
        row0 += 1 + n_u
        soc_dims.append(1 + n_u)
    for k in range(n):
        add_coo([row0], [off_t + k], [-1.0])
        idx = np.arange(3)
        add_coo(row0 + 1 + idx, 3 * k + idx, -np.ones(3))
        b_parts.append(np.zeros(4))
        row0 += 4
        soc_dims.append(4)
    for k in range(n):
        idx = np.arange(3)
        add_coo(row0 + 1 + idx, 3 * k + idx, -np.ones(3))
        b_parts.append(np.array([problem.u_max, 0.0, 0.0, 0.0]))
        row0 += 4
        soc_dims.append(4)

    a_mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row0, n_vars),
    ).tocsc()
    b_vec = np.concatenate(b_parts)

    if backend == "clarabel":
        raw = _solve_clarabel(a_mat, b_vec, q, n_zero, n_nonneg, soc_dims)
    elif backend == "scs":
        raw = _solve_scs(a_mat, b_vec, q, n_zero, n_nonneg, soc_dims)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    status, z, iterations, solve_time, gap, detail = raw

    if z is None or status not in ("OPTIMAL",):
        return ConicSolution(
            status=status,
            u=None,
            objective=None,
            penalty=0.0,
            safety_slack=np.zeros(m_safe),
            terminal_slack=np.zeros(n_elastic),
            iterations=iterations,
            solve_time=solve_time,
            gap_abs=gap,
            primal_residual=float("nan"),
            detail=detail,
        )

    u = z[:n_u].reshape(n, 3)
    slack = z[off_s : off_s + n_slack] if n_slack else np.zeros(0)
    elastic = z[off_e : off_e + n_elastic] if n_elastic else np.zeros(0)
    fuel = float(np.linalg.norm(u, axis=1).sum())
    penalty = float(problem.penalty_weight * (slack.sum() + elastic.sum()))
    term_resid = a_norm @ z[:n_u] - b_norm
    if soft:
        term_resid = term_resid - elastic[:6] + elastic[6:]
    primal_residual = float(np.abs(term_resid).max())
    return ConicSolution(
        status=status,
        u=u,
        objective=fuel,
        penalty=penalty,
        safety_slack=np.maximum(slack, 0.0),
        terminal_slack=np.maximum(elastic, 0.0),
        iterations=iterations,
        solve_time=solve_time,
        gap_abs=gap,
        primal_residual=primal_residual,
        detail=detail,
    )


def _solve_clarabel(a_mat, b_vec, q, n_zero, n_nonneg, soc_dims):
    import clarabel

    cones = []
    if n_zero:
        cones.append(clarabel.ZeroConeT(n_zero))
    if n_nonneg:
        cones.append(clarabel.NonnegativeConeT(n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(d) for d in soc_dims)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-9
    settings.tol_gap_rel = 1e-9
    settings.tol_feas = 1e-9
    p_mat = sparse.csc_matrix((q.size, q.size))
    solver = clarabel.DefaultSolver(p_mat, q, a_mat, b_vec, cones, settings)
    sol = solver.solve()
    name = str(sol.status)
    if name == "Solved":
        status = "OPTIMAL"
    elif name in ("MaxIterations", "MaxTime"):
        status = "MAX_ITER"
    else:
        status = "INFEASIBLE_NUMERICS"
    z = np.asarray(sol.x) if status == "OPTIMAL" else None
    gap = abs(float(sol.obj_val) - float(sol.obj_val_dual))
    return status, z, int(sol.iterations), float(sol.solve_time), gap, name


def _solve_scs(a_mat, b_vec, q, n_zero, n_nonneg, soc_dims):
    import scs

    data = {"A": a_mat, "b": b_vec, "c": q}
    cone = {"z": n_zero, "l": n_nonneg, "q": soc_dims}
    solver = scs.SCS(
        data, cone, eps_abs=1e-9, eps_rel=1e-9, verbose=False, max_iters=100000
    )
    out = solver.solve()
    name = out["info"]["status"]
    if "solved" in name.lower():
        status = "OPTIMAL"
    elif "iteration" in name.lower() or "time" in name.lower():
        status = "MAX_ITER"
    else:
        status = "INFEASIBLE_NUMERICS"
    z = np.asarray(out["x"]) if status == "OPTIMAL" else None
    gap = abs(float(out["info"]["pobj"]) - float(out["info"]["dobj"]))
    iters = int(out["info"]["iter"])
    solve_time = float(out["info"]["solve_time"]) / 1e3
    return status, z, iters, solve_time, gap, name


@dataclass(frozen=True)
class ConvexSolution:
    """Outcome of the safety-free relaxation."""

    status: str
    traj: ocp.Trajectory | None
    objective: float | None
    subproblem: ConicSolution
    detail: str = ""


def solve_relaxed(
    scenario: ocp.Scenario,
    bundle: ocp.DynamicsBundle | None = None,
    backend: str = "clarabel",
) -> ConvexSolution:
    """Minimum-fuel plan under dynamics, boundary, and per-burn cap only."""
    bundle = bundle or ocp.dynamics_bundle(scenario)
    a_term, b_term = terminal_system(scenario, bundle)
    problem = ConicSubproblem(
        n_steps=scenario.n_steps,
        u_max=scenario.u_max,
        terminal_map=a_term,
        terminal_target=b_term,
        reference=np.zeros((scenario.n_steps, 3)),
        x_scale=default_state_scale(scenario),
    )
    sol = solve_subproblem(problem, backend=backend)
    if not sol.ok:
        detail = sol.detail
        if sol.status == "INFEASIBLE_NUMERICS":
            detail = (
                "terminal state unreachable within the per-burn cap "
                f"(backend: {sol.detail})"
            )
        return ConvexSolution(sol.status, None, None, sol, detail)
    states = ocp.propagate_controls(scenario, bundle, sol.u)
    traj = ocp.Trajectory(
        states=states,
        controls=sol.u,
        scenario_id=scenario.scenario_id,
        source="CVX",
    )
    return ConvexSolution("OPTIMAL", traj, sol.objective, sol)
