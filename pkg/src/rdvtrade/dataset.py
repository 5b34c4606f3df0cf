"""Scenario families, catalog ingestion, and solution-record datasets.

Two built-in randomization families mirror the benchmark setups: a fixed
low-Earth target with dispersed hold-point initial conditions, and a swept
elliptic-target family parameterized directly in orbital-element deltas.
Grids are discrete: every sampled value comes from a stated linspace, so a
seed pins the dataset bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import convex, ocp, scp
from . import orbits as ob
from . import uncertainty as unc

LEO_TARGET = ob.ClassicalOE(
    a=6738.14e3,
    e=5.58e-4,
    i=math.radians(51.641),
    raan=math.radians(301.037),
    argp=math.radians(26.18),
    mean_anomaly=math.radians(68.23),
)


@dataclass(frozen=True)
class LeoFamily:
    """Hold-point dispersal about a fixed near-circular target.

    Initial conditions are RTN offsets around a co-elliptic hold point
    ~18 km behind and 4 km below the target; the nominal along-track
    velocity cancels the radial offset's energy mismatch (v_t = -1.5 n r_r).
    Terminal conditions are four static waypoints at 750 m.
    """

    target: ob.ClassicalOE = LEO_TARGET
    dt: float = 171.4
    n_choices: tuple[int, ...] = (30, 35, 40, 45, 50)
    u_max: float = 5.0
    drift_horizon_s: float = 91.7 * 60.0
    n_substeps: int = 30
    safety: ocp.SafetySchedule = field(
        default_factory=lambda: ocp.SafetySchedule(1000.0, 500.0, 77.0 * 60.0)
    )
    r_r_center: float = -4000.0
    r_t_center: float = -17500.0
    gravity: ob.GravityModel = ob.EARTH

    @property
    def v_t_center(self) -> float:
        return -1.5 * self.target.mean_motion(self.gravity) * self.r_r_center

    def grids(self) -> dict[str, np.ndarray]:
        return {
            "r_r": self.r_r_center + np.linspace(-1400.0, 1400.0, 1000),
            "r_t": self.r_t_center + np.linspace(-3000.0, 3000.0, 1000),
            "v_t": self.v_t_center + np.linspace(-1.0, 1.0, 100),
        }

    def terminal_options(self) -> np.ndarray:
        w = 750.0
        return np.array(
            [
                [w, 0.0, 0.0, 0.0, 0.0, 0.0],
                [-w, 0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, w, 0.0, 0.0, 0.0, 0.0],
                [0.0, -w, 0.0, 0.0, 0.0, 0.0],
            ]
        )

    def sample(self, rng: np.random.Generator, scenario_id: str) -> ocp.Scenario:
        grids = self.grids()
        n = int(rng.choice(np.asarray(self.n_choices)))
        rtn_init = np.array(
            [
                float(rng.choice(grids["r_r"])),
                float(rng.choice(grids["r_t"])),
                0.0,
                0.0,
                float(rng.choice(grids["v_t"])),
                0.0,
            ]
        )
        rtn_final = self.terminal_options()[int(rng.integers(4))]
        return build_scenario_from_rtn(
            scenario_id=scenario_id,
            family="leo",
            target=self.target,
            convention="qns",
            n_steps=n,
            dt=self.dt,
            u_max=self.u_max,
            rtn_init=rtn_init,
            rtn_final=rtn_final,
            drift_horizon_s=self.drift_horizon_s,
            n_substeps=self.n_substeps,
            safety=self.safety,
            relax_terminal_safety=False,
            gravity=self.gravity,
        )


@dataclass(frozen=True)
class EllipticFamily:
    """Swept elliptic targets with element-delta initial conditions."""

    dt: float = 440.8
    n_choices: tuple[int, ...] = (35, 38, 41, 44, 47, 50)
    u_max: float = 7.0
    drift_horizon_s: float = 360.0 * 60.0
    n_substeps: int = 30
    safety: ocp.SafetySchedule = field(
        default_factory=lambda: ocp.SafetySchedule(6000.0, 1000.0, 198.0 * 60.0)
    )
    gravity: ob.GravityModel = ob.EARTH

    def target_grids(self) -> dict[str, np.ndarray]:
        return {
            "a": np.linspace(6500e3, 11000e3, 10),
            "e": np.linspace(1e-3, 0.35, 10),
            "i": np.linspace(1e-3, math.pi / 2.0, 10),
            "raan": np.linspace(0.0, 9.0 * math.pi / 5.0, 10),
            "argp": np.linspace(0.0, 9.0 * math.pi / 5.0, 10),
            "mean_anomaly": np.linspace(0.0, 9.0 * math.pi / 5.0, 10),
        }

    def delta_grids(self) -> dict[str, np.ndarray]:
        return {
            "da": np.linspace(-20e3, -7e3, 10),
            "de": np.linspace(-3e-4, 3e-4, 10),
            "di": np.linspace(-6e-4, 6e-4, 10),
            "draan": np.linspace(-3e-4, 3e-4, 10),
            "dargp": np.linspace(-3e-3, 3e-3, 10),
            "dm": np.array([-0.03]),
        }

    def terminal_rtn(self) -> np.ndarray:
        return np.array([0.0, 1500.0, 0.0, 0.0, 0.0, 0.0])

    def sample_target(self, rng: np.random.Generator) -> ob.ClassicalOE:
        g = self.target_grids()
        return ob.ClassicalOE(
            a=float(rng.choice(g["a"])),
            e=float(rng.choice(g["e"])),
            i=float(rng.choice(g["i"])),
            raan=float(rng.choice(g["raan"])),
            argp=float(rng.choice(g["argp"])),
            mean_anomaly=float(rng.choice(g["mean_anomaly"])),
        )

    def sample(
        self,
        rng: np.random.Generator,
        scenario_id: str,
        target: ob.ClassicalOE | None = None,
    ) -> ocp.Scenario:
        if target is None:
            target = self.sample_target(rng)
        d = self.delta_grids()
        deputy = ob.ClassicalOE(
            a=target.a + float(rng.choice(d["da"])),
            e=max(target.e + float(rng.choice(d["de"])), 1e-6),
            i=target.i + float(rng.choice(d["di"])),
            raan=target.raan + float(rng.choice(d["draan"])),
            argp=target.argp + float(rng.choice(d["dargp"])),
            mean_anomaly=target.mean_anomaly + float(rng.choice(d["dm"])),
        )
        x_init = ob.roe_from_pair(target, deputy, "eccentric").as_array()
        n = int(rng.choice(np.asarray(self.n_choices)))
        return build_scenario_from_rtn(
            scenario_id=scenario_id,
            family="elliptic",
            target=target,
            convention="eccentric",
            n_steps=n,
            dt=self.dt,
            u_max=self.u_max,
            rtn_init=None,
            rtn_final=self.terminal_rtn(),
            drift_horizon_s=self.drift_horizon_s,
            n_substeps=self.n_substeps,
            safety=self.safety,
            relax_terminal_safety=True,
            gravity=self.gravity,
            x_init=x_init,
        )


def build_scenario_from_rtn(
    scenario_id: str,
    family: str,
    target: ob.ClassicalOE,
    convention: ob.RoeConvention,
    n_steps: int,
    dt: float,
    u_max: float,
    rtn_init: np.ndarray | None,
    rtn_final: np.ndarray,
    drift_horizon_s: float,
    n_substeps: int,
    safety: ocp.SafetySchedule,
    relax_terminal_safety: bool,
    gravity: ob.GravityModel = ob.EARTH,
    x_init: np.ndarray | None = None,
) -> ocp.Scenario:
    """Assemble a scenario, converting RTN boundary rows through the local
    linear output maps at the first and last epochs."""
    if x_init is None:
        if rtn_init is None:
            raise ValueError("provide either rtn_init or x_init")
        psi_0 = ob.roe_to_rtn_map(target, convention, gravity)
        x_init = ocp.roe_from_rtn_linear(psi_0, rtn_init)
    target_end = ob.mean_propagate(target, (n_steps - 1) * dt, gravity)
    psi_end = ob.roe_to_rtn_map(target_end, convention, gravity)
    x_final = ocp.roe_from_rtn_linear(psi_end, rtn_final)
    scenario = ocp.Scenario(
        scenario_id=scenario_id,
        family=family,
        target=target,
        convention=convention,
        n_steps=n_steps,
        dt=dt,
        u_max=u_max,
        x_init=x_init,
        x_final=x_final,
        drift_horizon_s=drift_horizon_s,
        n_substeps=n_substeps,
        safety=safety,
        relax_terminal_safety=relax_terminal_safety,
        gravity=gravity,
    )
    scenario.validate()
    return scenario


def sample_scenarios(
    family: LeoFamily | EllipticFamily, count: int, seed: int
) -> list[ocp.Scenario]:
    """Draw ``count`` scenarios with ids that pin the family and seed."""
    rng = np.random.default_rng(seed)
    name = "leo" if isinstance(family, LeoFamily) else "elliptic"
    return [
        family.sample(rng, f"{name}-{seed:08d}-{idx:05d}")
        for idx in range(count)
    ]


def split_of(scenario_id: str, train_fraction: float = 0.9) -> str:
    """Deterministic hash split on the scenario id."""
    digest = hashlib.md5(scenario_id.encode("utf-8")).hexdigest()
    bucket = int(digest[:8], 16) % 100
    return "train" if bucket < int(round(train_fraction * 100)) else "val"


@dataclass(frozen=True)
class DatasetRecord:
    """One scenario with its relaxed solution and refined solution."""

    scenario: ocp.Scenario
    cvx: ocp.Trajectory
    cvx_objective: float
    cvx_c1: int
    scp_traj: ocp.Trajectory | None
    scp_objective: float | None
    scp_converged: bool
    scp_iterations: int
    scp_c1: int | None
    split: str

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "cvx": self.cvx.to_dict(),
            "cvx_objective": self.cvx_objective,
            "cvx_c1": self.cvx_c1,
            "scp": self.scp_traj.to_dict() if self.scp_traj is not None else None,
            "scp_objective": self.scp_objective,
            "scp_converged": self.scp_converged,
            "scp_iterations": self.scp_iterations,
            "scp_c1": self.scp_c1,
            "split": self.split,
        }


def record_from_dict(data: dict) -> DatasetRecord:
    scp_raw = data.get("scp")
    return DatasetRecord(
        scenario=ocp.scenario_from_dict(data["scenario"]),
        cvx=ocp.trajectory_from_dict(data["cvx"]),
        cvx_objective=float(data["cvx_objective"]),
        cvx_c1=int(data["cvx_c1"]),
        scp_traj=ocp.trajectory_from_dict(scp_raw) if scp_raw else None,
        scp_objective=(
            float(data["scp_objective"]) if data["scp_objective"] is not None else None
        ),
        scp_converged=bool(data["scp_converged"]),
        scp_iterations=int(data["scp_iterations"]),
        scp_c1=int(data["scp_c1"]) if data["scp_c1"] is not None else None,
        split=data["split"],
    )


def save_records(records: Sequence[DatasetRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True))
            fh.write("\n")


def load_records(path: str | Path) -> list[DatasetRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out


def build_dataset(
    scenarios: Sequence[ocp.Scenario],
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
    progress: Callable[[int, DatasetRecord], None] | None = None,
) -> list[DatasetRecord]:
    """Solve each scenario with the relaxation, refine it, and record both.

    Scenarios whose relaxation fails are skipped (they carry no label);
    refinement failures are kept with ``scp_converged = False`` so that
    split statistics stay honest, but the training split of downstream
    consumers keeps converged records only.
    """
    params = params or unc.UncertaintyParams()
    scp_config = scp_config or scp.ScpConfig()
    records: list[DatasetRecord] = []
    for idx, scenario in enumerate(scenarios):
        bundle = ocp.dynamics_bundle(scenario)
        relaxed = convex.solve_relaxed(scenario, bundle)
        if relaxed.status != "OPTIMAL" or relaxed.traj is None:
            continue
        cvx_c1 = ocp.count_violations(scenario, bundle, params, relaxed.traj)
        result = scp.run_scp(scenario, bundle, params, relaxed.traj, scp_config)
        scp_c1 = None
        if result.traj is not None:
            scp_c1 = ocp.count_violations(scenario, bundle, params, result.traj)
        record = DatasetRecord(
            scenario=scenario,
            cvx=relaxed.traj.with_source("CVX"),
            cvx_objective=relaxed.objective,
            cvx_c1=cvx_c1,
            scp_traj=result.traj.with_source("CVX_SCP") if result.traj else None,
            scp_objective=result.objective if result.converged else None,
            scp_converged=result.converged,
            scp_iterations=result.iterations,
            scp_c1=scp_c1,
            split=split_of(scenario.scenario_id),
        )
        records.append(record)
        if progress is not None:
            progress(idx, record)
    return records


def training_records(records: Iterable[DatasetRecord]) -> list[DatasetRecord]:
    """Converged train-split records (the supervision set)."""
    return [r for r in records if r.split == "train" and r.scp_converged]


def validation_records(records: Iterable[DatasetRecord]) -> list[DatasetRecord]:
    return [r for r in records if r.split == "val" and r.scp_converged]


CATALOG_COLUMNS = (
    "object_id",
    "a_km",
    "e",
    "i_deg",
    "raan_deg",
    "argp_deg",
    "M_deg",
    "epoch_iso",
)


@dataclass(frozen=True)
class CatalogEntry:
    object_id: str
    a_km: float
    e: float
    i_deg: float
    raan_deg: float
    argp_deg: float
    m_deg: float
    epoch_iso: str

    def to_classical(self) -> ob.ClassicalOE:
        return ob.ClassicalOE(
            a=self.a_km * 1e3,
            e=self.e,
            i=math.radians(self.i_deg),
            raan=math.radians(self.raan_deg),
            argp=math.radians(self.argp_deg),
            mean_anomaly=math.radians(self.m_deg),
        )


#: Admissible catalog ranges for the elliptic family.
CATALOG_A_KM = (6500.0, 10000.0)
CATALOG_E = (1e-3, 0.3)
CATALOG_I_DEG = (0.0, 90.0)


def ingest_catalog(
    path: str | Path, skipped: list[int] | None = None
) -> list[CatalogEntry]:
    """Parse a catalog CSV and keep rows inside the admissible element box.

    Malformed rows are skipped, not fatal; pass ``skipped`` to receive the
    count (appended as a single integer). An empty result after filtering
    is an error, since every downstream sampler needs a nonempty support.
    """
    entries: list[CatalogEntry] = []
    n_skipped = 0
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CATALOG_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"catalog is missing columns: {sorted(missing)}")
        for row in reader:
            try:
                entry = CatalogEntry(
                    object_id=row["object_id"].strip(),
                    a_km=float(row["a_km"]),
                    e=float(row["e"]),
                    i_deg=float(row["i_deg"]),
                    raan_deg=float(row["raan_deg"]),
                    argp_deg=float(row["argp_deg"]),
                    m_deg=float(row["M_deg"]),
                    epoch_iso=row["epoch_iso"].strip(),
                )
            except (AttributeError, KeyError, TypeError, ValueError):
                n_skipped += 1
                continue
            if not np.isfinite([entry.a_km, entry.e, entry.i_deg]).all():
                n_skipped += 1
                continue
            if not CATALOG_A_KM[0] <= entry.a_km <= CATALOG_A_KM[1]:
                continue
            if not CATALOG_E[0] <= entry.e <= CATALOG_E[1]:
                continue
            if not CATALOG_I_DEG[0] <= entry.i_deg <= CATALOG_I_DEG[1]:
                continue
            entries.append(entry)
    if skipped is not None:
        skipped.append(n_skipped)
    if not entries:
        raise ValueError(f"no admissible catalog rows in {path}")
    entries.sort(key=lambda e: e.object_id)
    return entries


def catalog_weights(entries: Sequence[CatalogEntry], bins: int = 10) -> np.ndarray:
    """Density-flattening weights on a (a, e) occupancy grid.

    Each object weighs log(1 + count(cell)) / count(cell), damping dense
    cells while keeping their aggregate influence growing slowly.
    """
    if not entries:
        return np.zeros(0)
    a_edges = np.linspace(CATALOG_A_KM[0], CATALOG_A_KM[1], bins + 1)
    e_edges = np.linspace(CATALOG_E[0], CATALOG_E[1], bins + 1)
    a_idx = np.clip(
        np.searchsorted(a_edges, [e.a_km for e in entries], side="right") - 1,
        0,
        bins - 1,
    )
    e_idx = np.clip(
        np.searchsorted(e_edges, [e.e for e in entries], side="right") - 1,
        0,
        bins - 1,
    )
    counts = np.zeros((bins, bins), dtype=int)
    for ia, ie in zip(a_idx, e_idx):
        counts[ia, ie] += 1
    weights = np.array(
        [
            math.log1p(counts[ia, ie]) / counts[ia, ie]
            for ia, ie in zip(a_idx, e_idx)
        ]
    )
    return weights


def sample_targets(
    entries: Sequence[CatalogEntry], n: int, rng: np.random.Generator
) -> list[CatalogEntry]:
    """Weighted draw without replacement from a canonically ordered catalog."""
    if n > len(entries):
        raise ValueError(f"requested {n} targets from a catalog of {len(entries)}")
    ordered = sorted(entries, key=lambda e: e.object_id)
    weights = catalog_weights(ordered)
    probs = weights / weights.sum()
    idx = rng.choice(len(ordered), size=n, replace=False, p=probs)
    return [ordered[i] for i in sorted(idx)]
