"""Autoregressive rollout with the dynamics in the loop.

Each step feeds the model a query block (goal, current state, remaining
return, a zero count token, and the target observation when the family has
one), reads the control head at the block's last token, clamps the burn to
the per-burn cap, then propagates the state with the scenario's own
transition maps before feeding the executed burn back as the next token.
States therefore satisfy the dynamics exactly no matter what the model
says; only the burns are learned.

The return token starts at minus the relaxed objective, a lower bound on
the cost the model was trained to see, and shrinks in magnitude by the
executed burn each step. The count token stays at zero: the rollout asks
for a trajectory with no remaining violations.
"""

from __future__ import annotations

import numpy as np
import torch

from rdvtrade import ocp
from rdvtrade.surrogate import tokens as tk
from rdvtrade.surrogate.training import ModelState


def infer(
    state: ModelState, scenario: ocp.Scenario, rtg_init: float
) -> ocp.Trajectory:
    """Single-scenario rollout; a one-element batch, so it matches
    infer_batch exactly."""
    return infer_batch(state, [scenario], [rtg_init])[0]


def infer_batch(
    state: ModelState,
    scenarios: list[ocp.Scenario],
    rtg_inits: list[float],
    trace: dict | None = None,
) -> list[ocp.Trajectory]:
    """Roll out a batch of scenarios with one model pass per step.

    Horizons may differ; shorter rollouts are padded past their end and the
    pad positions are never read back. Finished items keep feeding zeros,
    which cannot influence other batch rows or their own earlier steps.

    Passing a dict as ``trace`` fills it with the per-step return tokens
    under key "rtg" ([B, n_max + 1], the last column being the value after
    the final burn), for diagnostics.
    """
    if len(scenarios) != len(rtg_inits):
        raise ValueError("need one return initialization per scenario")
    if not scenarios:
        return []
    with_obs_set = {s.family == "elliptic" for s in scenarios}
    if len(with_obs_set) > 1:
        raise ValueError("cannot batch scenarios across token layouts")
    with_obs = with_obs_set.pop()

    model = state.model
    model.eval()
    torch.set_num_threads(1)
    stats = state.stats
    mean, std = stats.mean, stats.std

    b = len(scenarios)
    n_list = [s.n_steps for s in scenarios]
    n_max = max(n_list)
    if n_max > model.config.context_steps:
        raise ValueError(
            f"horizon {n_max} exceeds the {model.config.context_steps}-step "
            "context window"
        )

    bundles = [ocp.dynamics_bundle(s) for s in scenarios]
    obs_all = [
        tk.target_observation(bd.target_at_step) if with_obs else None
        for bd in bundles
    ]
    g_raw = np.stack([np.asarray(s.x_final, dtype=float) for s in scenarios])
    x = np.stack([np.asarray(s.x_init, dtype=float) for s in scenarios])
    rtg = np.asarray(rtg_inits, dtype=float).copy()
    states_out = np.zeros((b, n_max, 6))
    controls_out = np.zeros((b, n_max, 3))
    rtg_log = np.zeros((b, n_max + 1))
    rtg_log[:, 0] = rtg

    g_z = torch.from_numpy((g_raw - mean["goal"]) / std["goal"])[:, None, :]
    ctg_z = float((0.0 - mean["ctg"][0]) / std["ctg"][0])
    ctg_t = torch.full((b, 1, 1), ctg_z, dtype=torch.float64)

    past = None
    with torch.no_grad():
        for k in range(n_max):
            for i in range(b):
                if k < n_list[i]:
                    states_out[i, k] = x[i]
            x_z = torch.from_numpy((x - mean["state"]) / std["state"])[:, None, :]
            rtg_z = torch.from_numpy(
                (rtg - mean["rtg"][0]) / std["rtg"][0]
            )[:, None, None]
            obs_t = None
            if with_obs:
                rows = np.stack(
                    [obs_all[i][min(k, n_list[i] - 1)] for i in range(b)]
                )
                obs_t = torch.from_numpy((rows - mean["obs"]) / std["obs"])[:, None, :]

            h = model.embed_steps(
                g_z, x_z, rtg_z, ctg_t, u=None, obs=obs_t, step_offset=k
            )
            hidden, past = model.forward(h, past)
            u_z = model.control_head(hidden[:, -1, :]).numpy()
            u_raw = u_z * std["control"] + mean["control"]

            for i in range(b):
                if k >= n_list[i]:
                    u_raw[i] = 0.0
                    continue
                norm = float(np.linalg.norm(u_raw[i]))
                if norm > scenarios[i].u_max:
                    u_raw[i] *= scenarios[i].u_max / norm
                controls_out[i, k] = u_raw[i]
                if k < n_list[i] - 1:
                    x[i] = bundles[i].step_stm[k] @ (
                        x[i] + bundles[i].cim[k] @ u_raw[i]
                    )
                rtg[i] += np.linalg.norm(u_raw[i])
            rtg_log[:, k + 1] = rtg

            u_feed = torch.from_numpy(
                (u_raw - mean["control"]) / std["control"]
            )[:, None, :]
            _, past = model.forward(model.embed_element("control", u_feed, k), past)

    if trace is not None:
        trace["rtg"] = rtg_log
    return [
        ocp.Trajectory(
            states=states_out[i, : n_list[i]].copy(),
            controls=controls_out[i, : n_list[i]].copy(),
            scenario_id=scenarios[i].scenario_id,
            source="ART",
        )
        for i in range(b)
    ]
