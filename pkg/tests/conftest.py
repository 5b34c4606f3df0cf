"""Shared scenario builders sized for fast unit tests.

The benchmark families run 30-50 burns with 30 drift substeps each; at that
size a single margin sweep is fine but hundreds per test session are not.
These builders keep the same structure (hold point approach, keep-out
schedule, drift horizon) at a fraction of the grid, which exercises every
code path without the quadratic blowup.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from rdvtrade import dataset, ocp
from rdvtrade import orbits as ob

LEO_TARGET = ob.ClassicalOE(
    a=6738.14e3,
    e=5.58e-4,
    i=math.radians(51.641),
    raan=math.radians(301.037),
    argp=math.radians(26.18),
    mean_anomaly=math.radians(68.23),
)


def toy_scenario(
    n_steps: int = 12,
    n_substeps: int = 6,
    rtn_init: np.ndarray | None = None,
    rtn_final: np.ndarray | None = None,
    radius_before: float = 1000.0,
    radius_after: float = 500.0,
    u_max: float = 5.0,
    relax_terminal_safety: bool = False,
    scenario_id: str = "toy",
    target: ob.ClassicalOE | None = None,
    gravity: ob.GravityModel = ob.EARTH,
) -> ocp.Scenario:
    """Small hold-point repositioning around the benchmark LEO target."""
    if target is None:
        target = LEO_TARGET
    if rtn_init is None:
        rtn_init = np.array([-4000.0, -17500.0, 0.0, 0.0, 0.0, 0.0])
        rtn_init[4] = -1.5 * target.mean_motion(gravity) * rtn_init[0]
    if rtn_final is None:
        rtn_final = np.array([0.0, -750.0, 0.0, 0.0, 0.0, 0.0])
    return dataset.build_scenario_from_rtn(
        scenario_id=scenario_id,
        family="leo",
        target=target,
        convention="qns",
        n_steps=n_steps,
        dt=171.4 * 4,
        u_max=u_max,
        rtn_init=rtn_init,
        rtn_final=rtn_final,
        drift_horizon_s=91.7 * 60.0,
        n_substeps=n_substeps,
        safety=ocp.SafetySchedule(radius_before, radius_after, 77.0 * 60.0),
        relax_terminal_safety=relax_terminal_safety,
        gravity=gravity,
    )


def far_hold_scenario(n_steps: int = 6) -> ocp.Scenario:
    """Stationary far hold point: the zero plan is feasible and optimal.

    Circular Keplerian chief, so the pure along-track offset is an exact
    equilibrium of the relative dynamics and the optimizer has nothing
    to correct.
    """
    import dataclasses

    rtn = np.array([0.0, -60000.0, 0.0, 0.0, 0.0, 0.0])
    return toy_scenario(
        n_steps=n_steps,
        rtn_init=rtn.copy(),
        rtn_final=rtn.copy(),
        scenario_id="toy-hold",
        target=dataclasses.replace(LEO_TARGET, e=0.0),
        gravity=ob.GravityModel(mu=ob.EARTH.mu, j2=0.0, radius=ob.EARTH.radius),
    )


@pytest.fixture(scope="session")
def leo_scenario() -> ocp.Scenario:
    return toy_scenario()


@pytest.fixture(scope="session")
def leo_bundle(leo_scenario) -> ocp.DynamicsBundle:
    return ocp.dynamics_bundle(leo_scenario)


@pytest.fixture(scope="session")
def toy_records():
    """Labeled instances: four repositionings plus two trivial far holds.

    The far holds give the zero-violation difficulty bin something to
    hold, and their near-zero plans anchor the low-cost end of what the
    surrogate sees in training.
    """
    specs = [(-16000.0, 12), (-17500.0, 12), (-19000.0, 10), (-15000.0, 8)]
    scenarios = []
    for i, (along, n) in enumerate(specs):
        rtn = np.array([-4000.0, along, 0.0, 0.0, 0.0, 0.0])
        rtn[4] = -1.5 * LEO_TARGET.mean_motion(ob.EARTH) * rtn[0]
        scenarios.append(
            toy_scenario(n_steps=n, rtn_init=rtn, scenario_id=f"sur-{i:02d}")
        )
    import dataclasses

    for n in (6, 8):
        scenarios.append(
            dataclasses.replace(
                far_hold_scenario(n_steps=n), scenario_id=f"sur-hold-{n:02d}"
            )
        )
    records = dataset.build_dataset(scenarios)
    assert len(records) == len(scenarios)
    assert any(r.scp_converged for r in records)
    return records


@pytest.fixture(scope="session")
def toy_sequences(toy_records):
    import rdvtrade.surrogate as sg

    return sg.sequences_from_records(toy_records)


@pytest.fixture(scope="session")
def desk_state(toy_sequences):
    """One shared training run for every test that rolls the model out."""
    import rdvtrade.surrogate as sg

    config = sg.ModelConfig(learning_rate=3e-3)
    return sg.train(toy_sequences, config, epochs=80, seed=3)


@pytest.fixture(scope="session")
def toy_evals(toy_records, desk_state):
    """Model evaluations over the toy records, shared across test modules."""
    from rdvtrade import tradespace

    state, _ = desk_state
    return tradespace.evaluate_instances(toy_records, state)
