"""Flight-time sweeps, Pareto filtering, and warm-start benchmarks.

A sweep solves one rendezvous geometry over a list of horizons and emits
one point per (horizon, method). The relaxation always runs because its
objective doubles as the return initialization for the sequence model;
refinements are optional per method. Dominance is non-strict: a point
falls only to another that is at least as good in both objectives and
strictly better in one, so exact ties survive to the front.

The benchmark tables mirror the dataset split of labeled instances: each
record already carries the relaxed plan and its refinement, and the model
adds an inferred plan plus a refinement started from it. Results are binned
by the relaxed plan's violation count, which is the natural difficulty
axis: the more of the keep-out corridor the relaxation cuts, the harder
the repair.
"""

from __future__ import annotations

import dataclasses
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from rdvtrade import convex, dataset, ocp, scp
from rdvtrade import uncertainty as unc
from rdvtrade.surrogate.inference import infer_batch
from rdvtrade.surrogate.training import ModelState

SOURCES = ("CVX", "ART", "CVX_SCP", "ART_SCP", "SCP_MIN")
SWEEP_METHODS = ("CVX", "ART", "CVX_SCP", "ART_SCP")

#: Difficulty bins over the relaxed plan's cumulative violation count.
C1_BINS = ("0", "1-5", "6-15", ">15")


@dataclass(frozen=True)
class ParetoPoint:
    """One (flight time, fuel) outcome of a single method."""

    tof: float
    dv: float
    source: str
    feasible: bool
    c1: int
    scenario_id: str
    traj: ocp.Trajectory | None = None

    def validate(self) -> None:
        if self.dv < 0.0:
            raise ValueError("fuel cost cannot be negative")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.c1 < 0:
            raise ValueError("violation count cannot be negative")

    def to_dict(self) -> dict:
        return {
            "tof": self.tof,
            "dv": self.dv,
            "source": self.source,
            "feasible": self.feasible,
            "c1": self.c1,
            "scenario_id": self.scenario_id,
        }


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """Non-strict dominance: never true for exact ties."""
    if a.tof > b.tof or a.dv > b.dv:
        return False
    return a.tof < b.tof or a.dv < b.dv


def nondominated(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points no other point dominates, in ascending flight-time order.

    One pass over the points grouped by flight time: within a group only
    the minimal-fuel points can survive, and they survive exactly when no
    faster group has reached their fuel level already.
    """
    for p in points:
        if not (np.isfinite(p.tof) and np.isfinite(p.dv)):
            raise ValueError("dominance needs finite objectives")
    by_tof: dict[float, list[ParetoPoint]] = {}
    for p in points:
        by_tof.setdefault(p.tof, []).append(p)
    front: list[ParetoPoint] = []
    best = np.inf
    for tof in sorted(by_tof):
        group = by_tof[tof]
        group_min = min(p.dv for p in group)
        if group_min < best:
            front.extend(p for p in group if p.dv == group_min)
            best = group_min
    return front


def scp_minima(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Per-flight-time minimum over the converged refinement points."""
    by_tof: dict[float, ParetoPoint] = {}
    for p in points:
        if p.source not in ("CVX_SCP", "ART_SCP"):
            continue
        held = by_tof.get(p.tof)
        if held is None or p.dv < held.dv:
            by_tof[p.tof] = p
    return [
        dataclasses.replace(by_tof[tof], source="SCP_MIN")
        for tof in sorted(by_tof)
    ]


@dataclass(frozen=True)
class SweepResult:
    points: list[ParetoPoint]
    failures: list[dict]
    #: Wall-clock seconds per (n_steps, method), excluding the transition
    #: map precomputation, which is shared by every method anyway.
    timings: dict = field(default_factory=dict)


def sweep(
    base: ocp.Scenario,
    n_list: Sequence[int],
    methods: Sequence[str] = ("CVX",),
    model_state: ModelState | None = None,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> SweepResult:
    """Solve one geometry across horizons and collect Pareto points.

    The horizon is the only knob: each entry of ``n_list`` re-solves the
    base scenario with that many burn epochs, so flight time grows in
    whole drift periods. Failures (infeasible relaxations, refinements
    that stall, horizons beyond the model's context) are recorded and the
    sweep moves on.
    """
    bad = set(methods) - set(SWEEP_METHODS)
    if bad:
        raise ValueError(f"unknown sweep methods: {sorted(bad)}")
    if ("ART" in methods or "ART_SCP" in methods) and model_state is None:
        raise ValueError("inference methods need a trained model")
    params = params or unc.UncertaintyParams()
    scp_config = scp_config or scp.ScpConfig()

    points: list[ParetoPoint] = []
    failures: list[dict] = []
    timings: dict = {}
    relaxed_by_n: dict[int, tuple[ocp.Scenario, ocp.DynamicsBundle, ocp.Trajectory, float]] = {}

    def add_point(scn, bundle, traj, source):
        c1 = ocp.count_violations(scn, bundle, params, traj)
        point = ParetoPoint(
            tof=scn.flight_time,
            dv=traj.cost,
            source=source,
            feasible=c1 == 0,
            c1=c1,
            scenario_id=scn.scenario_id,
            traj=traj,
        )
        point.validate()
        points.append(point)
        return point

    for n in n_list:
        scn = dataclasses.replace(
            base, n_steps=int(n), scenario_id=f"{base.scenario_id}-n{int(n):02d}"
        )
        scn.validate()
        bundle = ocp.dynamics_bundle(scn)
        t0 = time.perf_counter()
        relaxed = convex.solve_relaxed(scn, bundle)
        timings[(int(n), "CVX")] = time.perf_counter() - t0
        if relaxed.status != "OPTIMAL" or relaxed.traj is None:
            failures.append(
                {"n": int(n), "method": "CVX", "detail": relaxed.detail or relaxed.status}
            )
            continue
        add_point(scn, bundle, relaxed.traj, "CVX")
        relaxed_by_n[int(n)] = (scn, bundle, relaxed.traj, relaxed.objective)

    art_by_n: dict[int, ocp.Trajectory] = {}
    if "ART" in methods or "ART_SCP" in methods:
        context = model_state.model.config.context_steps
        batch_ns = []
        for n in sorted(relaxed_by_n):
            if n > context:
                failures.append(
                    {
                        "n": n,
                        "method": "ART",
                        "detail": f"horizon {n} exceeds the {context}-step context",
                    }
                )
            else:
                batch_ns.append(n)
        if batch_ns:
            scenarios = [relaxed_by_n[n][0] for n in batch_ns]
            inits = [-relaxed_by_n[n][3] for n in batch_ns]
            t0 = time.perf_counter()
            trajs = infer_batch(model_state, scenarios, inits)
            elapsed = time.perf_counter() - t0
            for n, traj in zip(batch_ns, trajs):
                timings[(n, "ART")] = elapsed / len(batch_ns)
                art_by_n[n] = traj
                if "ART" in methods:
                    scn, bundle, _, _ = relaxed_by_n[n]
                    add_point(scn, bundle, traj, "ART")

    def refine(n, init_traj, source):
        scn, bundle, _, _ = relaxed_by_n[n]
        t0 = time.perf_counter()
        result = scp.run_scp(scn, bundle, params, init_traj, scp_config)
        timings[(n, source)] = time.perf_counter() - t0
        if not result.converged or result.traj is None:
            failures.append({"n": n, "method": source, "detail": result.status})
            return
        add_point(scn, bundle, result.traj.with_source(source), source)

    for n in sorted(relaxed_by_n):
        if "CVX_SCP" in methods:
            refine(n, relaxed_by_n[n][2], "CVX_SCP")
        if "ART_SCP" in methods and n in art_by_n:
            refine(n, art_by_n[n], "ART_SCP")

    points.extend(scp_minima(points))
    return SweepResult(points=points, failures=failures, timings=timings)


def points_table(points: Sequence[ParetoPoint]) -> str:
    """Plot-ready text table, one point per line."""
    lines = ["tof_s,dv_mps,source,feasible,c1,scenario_id"]
    for p in points:
        lines.append(
            f"{p.tof:.6f},{p.dv:.9f},{p.source},{int(p.feasible)},{p.c1},{p.scenario_id}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class InstanceEval:
    """One labeled instance with the model's plan and its refinement."""

    record: dataset.DatasetRecord
    art_traj: ocp.Trajectory
    art_objective: float
    art_c1: int
    art_scp_traj: ocp.Trajectory | None
    art_scp_objective: float | None
    art_scp_converged: bool
    art_scp_iterations: int


def evaluate_instances(
    records: Sequence[dataset.DatasetRecord],
    model_state: ModelState,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> list[InstanceEval]:
    """Run inference and inference-started refinement over a record set.

    The records already carry the relaxation and the relaxation-started
    refinement, so this fills in the two model-dependent columns.
    """
    params = params or unc.UncertaintyParams()
    scp_config = scp_config or scp.ScpConfig()
    if not records:
        return []
    scenarios = [r.scenario for r in records]
    inits = [-r.cvx_objective for r in records]
    art_trajs = infer_batch(model_state, scenarios, inits)
    out = []
    for record, art in zip(records, art_trajs):
        bundle = ocp.dynamics_bundle(record.scenario)
        result = scp.run_scp(record.scenario, bundle, params, art, scp_config)
        converged = result.converged and result.traj is not None
        out.append(
            InstanceEval(
                record=record,
                art_traj=art,
                art_objective=art.cost,
                art_c1=ocp.count_violations(record.scenario, bundle, params, art),
                art_scp_traj=result.traj.with_source("ART_SCP") if result.traj else None,
                art_scp_objective=result.objective if converged else None,
                art_scp_converged=converged,
                art_scp_iterations=result.iterations,
            )
        )
    return out


def c1_bin(c1: int) -> str:
    if c1 == 0:
        return "0"
    if c1 <= 5:
        return "1-5"
    if c1 <= 15:
        return "6-15"
    return ">15"


@dataclass(frozen=True)
class MethodStats:
    """Refinement outcomes for one warm-start source within a bin."""

    attempts: int
    successes: int
    offsets: list[float]
    iterations: list[int]

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


@dataclass(frozen=True)
class BenchTable:
    bins: dict[str, dict]

    def validate(self, n_instances: int) -> None:
        total = sum(b["count"] for b in self.bins.values())
        if total != n_instances:
            raise ValueError(
                f"bin populations sum to {total}, expected {n_instances}"
            )

    def to_text(self) -> str:
        lines = [
            "bin,count,method,attempts,successes,success_rate,"
            "mean_offset,mean_iterations"
        ]
        for name in C1_BINS:
            if name not in self.bins:
                continue
            b = self.bins[name]
            for method in ("CVX_SCP", "ART_SCP"):
                m: MethodStats = b[method]
                mean_off = float(np.mean(m.offsets)) if m.offsets else float("nan")
                mean_it = float(np.mean(m.iterations)) if m.iterations else float("nan")
                lines.append(
                    f"{name},{b['count']},{method},{m.attempts},{m.successes},"
                    f"{m.success_rate:.4f},{mean_off:.9f},{mean_it:.2f}"
                )
        return "\n".join(lines) + "\n"


def benchmark(
    records: Sequence[dataset.DatasetRecord],
    model_state: ModelState | None = None,
    evals: Sequence[InstanceEval] | None = None,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> BenchTable:
    """Warm-start comparison binned by the relaxed plan's violation count.

    Per bin and per initialization: how often the refiner converged, the
    converged objective's offset against the relaxed objective, and the
    iteration counts. Offsets and iterations are recorded for converged
    runs only.
    """
    if evals is None:
        if model_state is None:
            raise ValueError("need either precomputed evals or a model")
        evals = evaluate_instances(records, model_state, params, scp_config)
    if len(evals) != len(records):
        raise ValueError("need one evaluation per record")

    bins: dict[str, dict] = {}
    for record, ev in zip(records, evals):
        name = c1_bin(record.cvx_c1)
        b = bins.setdefault(
            name,
            {
                "count": 0,
                "CVX_SCP": {"attempts": 0, "successes": 0, "offsets": [], "iterations": []},
                "ART_SCP": {"attempts": 0, "successes": 0, "offsets": [], "iterations": []},
            },
        )
        b["count"] += 1
        cvx = b["CVX_SCP"]
        cvx["attempts"] += 1
        if record.scp_converged and record.scp_objective is not None:
            cvx["successes"] += 1
            cvx["offsets"].append(record.scp_objective - record.cvx_objective)
            cvx["iterations"].append(record.scp_iterations)
        art = b["ART_SCP"]
        art["attempts"] += 1
        if ev.art_scp_converged and ev.art_scp_objective is not None:
            art["successes"] += 1
            art["offsets"].append(ev.art_scp_objective - record.cvx_objective)
            art["iterations"].append(ev.art_scp_iterations)

    table = BenchTable(
        bins={
            name: {
                "count": b["count"],
                "CVX_SCP": MethodStats(**b["CVX_SCP"]),
                "ART_SCP": MethodStats(**b["ART_SCP"]),
            }
            for name, b in bins.items()
        }
    )
    table.validate(len(records))
    return table


@dataclass(frozen=True)
class OffsetReport:
    """How well the relaxation and the model predict the refined cost."""

    offsets: list[dict]
    excluded: int
    winning_fraction: float

    def to_text(self) -> str:
        lines = ["scenario_id,j_star,art_offset,cvx_offset"]
        for row in self.offsets:
            lines.append(
                f"{row['scenario_id']},{row['j_star']:.9f},"
                f"{row['art_offset']:.9f},{row['cvx_offset']:.9f}"
            )
        return "\n".join(lines) + "\n"


def cost_offsets(
    records: Sequence[dataset.DatasetRecord],
    model_state: ModelState | None = None,
    evals: Sequence[InstanceEval] | None = None,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> OffsetReport:
    """Cost-prediction offsets against the best refined objective.

    The reference J* is the per-instance minimum over converged
    refinements from either initialization. Instances where neither
    converged carry no reference and are excluded but counted. The winning
    fraction is how often the inferred plan's cost lands closer to J* than
    the relaxed objective does.
    """
    if evals is None:
        if model_state is None:
            raise ValueError("need either precomputed evals or a model")
        evals = evaluate_instances(records, model_state, params, scp_config)
    if len(evals) != len(records):
        raise ValueError("need one evaluation per record")

    offsets: list[dict] = []
    excluded = 0
    wins = 0
    for record, ev in zip(records, evals):
        candidates = []
        if record.scp_converged and record.scp_objective is not None:
            candidates.append(record.scp_objective)
        if ev.art_scp_converged and ev.art_scp_objective is not None:
            candidates.append(ev.art_scp_objective)
        if not candidates:
            excluded += 1
            continue
        j_star = min(candidates)
        art_offset = ev.art_objective - j_star
        cvx_offset = record.cvx_objective - j_star
        if abs(art_offset) < abs(cvx_offset):
            wins += 1
        offsets.append(
            {
                "scenario_id": record.scenario.scenario_id,
                "j_star": j_star,
                "art_offset": art_offset,
                "cvx_offset": cvx_offset,
            }
        )
    fraction = wins / len(offsets) if offsets else 0.0
    return OffsetReport(offsets=offsets, excluded=excluded, winning_fraction=fraction)
