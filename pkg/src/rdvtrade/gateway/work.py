"""Pipeline work shared by the command line and the job service.

These functions compute first and write to the store afterward, under the
owning scenario's lock, so long solves never hold a lock and concurrent
jobs on one scenario serialize only their file writes. Everything they
return is plain JSON-safe data: non-finite floats are mapped to null
because the transport layer refuses NaN.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from rdvtrade import dataset, ocp, scp, tradespace
from rdvtrade import uncertainty as unc
from rdvtrade.gateway.store import JobStore
from rdvtrade.surrogate.training import ModelState


def json_safe(value):
    """Recursively convert numpy scalars and drop non-finite floats."""
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    if isinstance(value, (float, np.floating)):
        as_float = float(value)
        return as_float if math.isfinite(as_float) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def parse_n_range(text: str) -> list[int]:
    """Parse ``start:stop:step`` into an inclusive horizon list."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"expected start:stop:step, got {text!r}")
    try:
        start, stop, step = (int(p) for p in parts)
    except ValueError as exc:
        raise ValueError(f"non-integer bound in {text!r}") from exc
    if step <= 0 or stop < start:
        raise ValueError(f"need start <= stop and step > 0 in {text!r}")
    return list(range(start, stop + 1, step))


def horizon_grid(n_min: int, n_max: int, count: int) -> list[int]:
    """``count`` horizons spread evenly over [n_min, n_max], deduplicated."""
    if n_min < 2:
        raise ValueError("horizons need at least two epochs")
    if n_max < n_min:
        raise ValueError("need n_min <= n_max")
    if count < 1:
        raise ValueError("need at least one horizon")
    grid = np.unique(np.rint(np.linspace(n_min, n_max, count)).astype(int))
    return [int(n) for n in grid]


def normalize_methods(methods, have_model: bool) -> tuple[str, ...]:
    """Uppercase, validate, and enforce the model requirement."""
    upper = tuple(dict.fromkeys(m.upper() for m in methods))
    bad = set(upper) - set(tradespace.SWEEP_METHODS)
    if bad:
        raise ValueError(f"unknown methods: {sorted(bad)}")
    if not upper:
        raise ValueError("need at least one method")
    needs_model = {"ART", "ART_SCP"} & set(upper)
    if needs_model and not have_model:
        raise ValueError(f"methods {sorted(needs_model)} need a model checkpoint")
    return upper


def refined_source(init_source: str) -> str:
    return "ART_SCP" if init_source.startswith("ART") else "CVX_SCP"


def explore_result(
    store: JobStore,
    scenario: ocp.Scenario,
    n_list: list[int],
    methods: tuple[str, ...],
    model_state: ModelState | None = None,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> dict:
    """Sweep one scenario and persist every produced trajectory.

    The result rows keep the sweep's emission order; ``front`` holds the
    indices of the nondominated rows so clients highlight exactly the set
    the service computed. SCP_MIN rows share the trajectory id of the
    refinement they duplicate.
    """
    result = tradespace.sweep(
        scenario,
        n_list,
        methods=methods,
        model_state=model_state,
        params=params,
        scp_config=scp_config,
    )
    front_ids = {id(p) for p in tradespace.nondominated(result.points)}

    rows = []
    stored: dict[int, str] = {}
    with store.scenario_lock(scenario.scenario_id):
        for point in result.points:
            traj_id = None
            if point.traj is not None:
                key = id(point.traj)
                if key not in stored:
                    per_n = point_scenario(scenario, point)
                    stored[key] = store.put_trajectory(per_n, point.traj)
                traj_id = stored[key]
            rows.append({**point.to_dict(), "trajectory_id": traj_id})

    return json_safe(
        {
            "scenario_id": scenario.scenario_id,
            "n_list": [int(n) for n in n_list],
            "methods": list(methods),
            "points": rows,
            "front": [i for i, p in enumerate(result.points) if id(p) in front_ids],
            "failures": result.failures,
            "timings": {f"{n}:{m}": s for (n, m), s in result.timings.items()},
        }
    )


def point_scenario(base: ocp.Scenario, point: tradespace.ParetoPoint) -> ocp.Scenario:
    """Rebuild the per-horizon scenario a sweep point was solved under."""
    n = point.traj.controls.shape[0]
    return dataclasses.replace(base, n_steps=n, scenario_id=point.scenario_id)


def refine_result(
    store: JobStore,
    traj_id: str,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> dict:
    """Refine a stored trajectory and persist the outcome if it converged."""
    stored = store.get_trajectory(traj_id)
    if stored is None:
        raise KeyError(traj_id)
    scenario = ocp.scenario_from_dict(stored["scenario"])
    init = ocp.trajectory_from_dict(stored)
    params = params or unc.UncertaintyParams()
    bundle = ocp.dynamics_bundle(scenario)
    result = scp.run_scp(scenario, bundle, params, init, scp_config or scp.ScpConfig())

    source = refined_source(stored.get("source", ""))
    refined_id = None
    point = None
    if result.converged and result.traj is not None:
        traj = result.traj.with_source(source)
        c1 = ocp.count_violations(scenario, bundle, params, traj)
        refined_id = store.put_trajectory(scenario, traj)
        point = {
            "tof": scenario.flight_time,
            "dv": traj.cost,
            "source": source,
            "feasible": c1 == 0,
            "c1": int(c1),
            "scenario_id": scenario.scenario_id,
            "trajectory_id": refined_id,
        }

    return json_safe(
        {
            "init_trajectory_id": traj_id,
            "init_source": stored.get("source", ""),
            "scenario_id": scenario.scenario_id,
            "converged": result.converged,
            "status": result.status,
            "objective": result.objective,
            "iterations": result.iterations,
            "history": result.history,
            "worst_margin": result.worst_margin,
            "terminal_residual_inf": result.terminal_residual_inf,
            "trajectory_id": refined_id,
            "point": point,
        }
    )


def trajectory_view(stored: dict, params: unc.UncertaintyParams | None = None) -> dict:
    """Stored trajectory plus per-epoch keep-out margins and flags.

    ``margins`` holds each constrained epoch's worst chance margin over
    its drift: positive means the keep-out constraint is breached there,
    matching the epoch's entry in ``violations``.
    """
    scenario = ocp.scenario_from_dict(stored["scenario"])
    traj = ocp.trajectory_from_dict(stored)
    params = params or unc.UncertaintyParams()
    bundle = ocp.dynamics_bundle(scenario)
    margins = ocp.step_margins(scenario, bundle, params, traj.states, traj.controls)
    flags = ocp.violation_flags(scenario, bundle, params, traj)
    c1 = int(np.sum(flags))
    return json_safe(
        {
            "id": stored["id"],
            "scenario_id": stored["scenario_id"],
            "source": stored.get("source", ""),
            "states": stored["states"],
            "controls": stored["controls"],
            "cost": traj.cost,
            "margins": {str(k): float(v.max()) for k, v in margins.items()},
            "violations": [bool(f) for f in flags],
            "c1": c1,
            "feasible": c1 == 0,
            "scenario": stored["scenario"],
        }
    )


def bench_report(
    records,
    evals=None,
    header: str = "",
) -> str:
    """Deterministic benchmark text: binned refinement stats, and when a
    model's evaluations are supplied, the cost-offset table as well.

    Wall-clock numbers never appear here; two runs with the same seed and
    inputs must produce identical bytes.
    """
    lines = []
    if header:
        lines.append(header)
    if evals is not None:
        table = tradespace.benchmark(records, evals=evals)
        offsets = tradespace.cost_offsets(records, evals=evals)
        lines.append(table.to_text().rstrip("\n"))
        lines.append(
            f"# offsets excluded={offsets.excluded} "
            f"winning_fraction={offsets.winning_fraction:.4f}"
        )
        lines.append(offsets.to_text().rstrip("\n"))
    else:
        lines.append(cvx_refinement_table(records).to_text().rstrip("\n"))
    return "\n".join(lines) + "\n"


def cvx_refinement_table(records) -> tradespace.BenchTable:
    """Relaxation-started refinement stats only, for model-free runs.

    The inference columns are present with zero attempts rather than
    absent, so the table shape matches the with-model report.
    """
    bins: dict[str, dict] = {}
    for record in records:
        name = tradespace.c1_bin(record.cvx_c1)
        b = bins.setdefault(
            name, {"count": 0, "successes": 0, "offsets": [], "iterations": []}
        )
        b["count"] += 1
        if record.scp_converged and record.scp_objective is not None:
            b["successes"] += 1
            b["offsets"].append(record.scp_objective - record.cvx_objective)
            b["iterations"].append(record.scp_iterations)
    table = tradespace.BenchTable(
        bins={
            name: {
                "count": b["count"],
                "CVX_SCP": tradespace.MethodStats(
                    attempts=b["count"],
                    successes=b["successes"],
                    offsets=b["offsets"],
                    iterations=b["iterations"],
                ),
                "ART_SCP": tradespace.MethodStats(0, 0, [], []),
            }
            for name, b in bins.items()
        }
    )
    table.validate(len(records))
    return table


def desk_records(seed: int, count: int) -> list[dataset.DatasetRecord]:
    """Seeded benchmark suite: sample, relax, refine."""
    scenarios = dataset.sample_scenarios(dataset.LeoFamily(), count, seed)
    return dataset.build_dataset(scenarios)
