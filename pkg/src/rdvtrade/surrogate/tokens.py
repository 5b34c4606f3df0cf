"""Trajectory tokenization for the sequence-model surrogate.

Each burn epoch becomes a short run of element tokens: the goal state, the
current state, the remaining-fuel return, the remaining violation count, an
optional target-orbit observation, and the burn itself. The return token is
the negative cost still to be spent from that step on, so a fresh rollout
starts at minus the full plan cost and climbs toward zero; the count token
is the number of constraint-violating steps from that step on. Observations
encode the target's angular elements as sine/cosine pairs so that nearby
orbits stay nearby in token space instead of jumping across a wrap-around.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from rdvtrade import dataset, ocp
from rdvtrade import orbits as ob
from rdvtrade import uncertainty as unc

#: Per-step token layout. The observation slot is only present for families
#: whose target orbit varies between scenarios.
ELEMENT_TYPES = ("goal", "state", "rtg", "ctg", "obs", "control")

ELEMENT_DIMS = {
    "goal": 6,
    "state": 6,
    "rtg": 1,
    "ctg": 1,
    "obs": 10,
    "control": 3,
}

#: Standard-deviation floor for z-scoring. Planar scenarios have identically
#: zero out-of-plane dimensions, which must not divide the batch by zero.
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class TokenSequence:
    """One trajectory as aligned per-step element arrays."""

    g: np.ndarray
    x: np.ndarray
    rtg: np.ndarray
    ctg: np.ndarray
    u: np.ndarray
    obs: np.ndarray | None
    scenario_id: str
    source: str
    normalized: bool = False

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    @property
    def tokens_per_step(self) -> int:
        return 6 if self.obs is not None else 5

    def validate(self) -> None:
        n = self.n_steps
        if self.g.shape != (n, 6) or self.x.shape != (n, 6):
            raise ValueError("goal and state arrays must be (n, 6)")
        if self.rtg.shape != (n, 1) or self.ctg.shape != (n, 1):
            raise ValueError("return and count arrays must be (n, 1)")
        if self.u.shape != (n, 3):
            raise ValueError("control array must be (n, 3)")
        if self.obs is not None and self.obs.shape != (n, 10):
            raise ValueError("observation array must be (n, 10)")
        if self.normalized:
            return
        # Raw sequences must telescope: each step's return differs from the
        # next by exactly the burn spent in between, and the last return is
        # minus the final burn.
        norms = np.linalg.norm(self.u, axis=1)
        recon = -np.cumsum(norms[::-1])[::-1]
        if np.abs(self.rtg[:, 0] - recon).max() > 1e-9:
            raise ValueError("return tokens do not telescope with the plan")
        if np.any(self.ctg < 0.0):
            raise ValueError("count tokens must be nonnegative")


def target_observation(targets: tuple[ob.ClassicalOE, ...]) -> np.ndarray:
    """Per-epoch target elements with angles as sine/cosine pairs."""
    rows = np.empty((len(targets), 10))
    for k, t in enumerate(targets):
        rows[k] = [
            t.a,
            t.e,
            np.sin(t.i),
            np.cos(t.i),
            np.sin(t.raan),
            np.cos(t.raan),
            np.sin(t.argp),
            np.cos(t.argp),
            np.sin(t.mean_anomaly),
            np.cos(t.mean_anomaly),
        ]
    return rows


def tokenize(
    record: dataset.DatasetRecord,
    which: str = "scp",
    params: unc.UncertaintyParams | None = None,
) -> TokenSequence:
    """Build the raw element arrays for one of a record's trajectories.

    The goal token repeats the terminal state at every step. Counts come
    from the same violation accounting the refiner uses, evaluated on the
    chosen trajectory.
    """
    if which == "cvx":
        traj = record.cvx
    elif which == "scp":
        if record.scp_traj is None:
            raise ValueError(f"record {record.scenario.scenario_id} has no refinement")
        traj = record.scp_traj
    else:
        raise ValueError(f"which must be 'cvx' or 'scp', got {which!r}")

    params = params or unc.UncertaintyParams()
    scenario = record.scenario
    bundle = ocp.dynamics_bundle(scenario)
    n = scenario.n_steps

    norms = np.linalg.norm(traj.controls, axis=1)
    rtg = -np.cumsum(norms[::-1])[::-1]
    flags = ocp.violation_flags(scenario, bundle, params, traj)
    ctg = ocp.violation_suffix(flags).astype(float)

    obs = None
    if scenario.family == "elliptic":
        obs = target_observation(bundle.target_at_step)

    return TokenSequence(
        g=np.tile(scenario.x_final, (n, 1)),
        x=np.asarray(traj.states, dtype=float).copy(),
        rtg=rtg[:, None],
        ctg=ctg[:, None],
        u=np.asarray(traj.controls, dtype=float).copy(),
        obs=obs,
        scenario_id=scenario.scenario_id,
        source=traj.source or which.upper(),
    )


def sequences_from_records(
    records: list[dataset.DatasetRecord],
    params: unc.UncertaintyParams | None = None,
) -> list[TokenSequence]:
    """Both trajectories of every record, with their true count tokens.

    The relaxed plans carry nonzero counts wherever they cut the keep-out
    zone, which is exactly what lets count-conditioning mean something at
    rollout time: asking for zero remaining violations distinguishes the
    refined behaviour from the relaxed one.
    """
    out: list[TokenSequence] = []
    for record in records:
        out.append(tokenize(record, "cvx", params))
        if record.scp_traj is not None:
            out.append(tokenize(record, "scp", params))
    return out


@dataclass(frozen=True)
class NormStats:
    """Per-dimension z-scoring statistics for each element type."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "std": {k: v.tolist() for k, v in self.std.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(
            mean={k: np.asarray(v, dtype=float) for k, v in data["mean"].items()},
            std={k: np.asarray(v, dtype=float) for k, v in data["std"].items()},
        )


def _fields(seq: TokenSequence) -> dict[str, np.ndarray]:
    out = {"goal": seq.g, "state": seq.x, "rtg": seq.rtg, "ctg": seq.ctg, "control": seq.u}
    if seq.obs is not None:
        out["obs"] = seq.obs
    return out


def fit_stats(sequences: list[TokenSequence]) -> NormStats:
    """Training-set statistics, stacked over every step of every sequence."""
    if not sequences:
        raise ValueError("cannot fit statistics on an empty training set")
    stacked: dict[str, list[np.ndarray]] = {}
    for seq in sequences:
        if seq.normalized:
            raise ValueError("fit statistics on raw sequences, not normalized ones")
        for name, arr in _fields(seq).items():
            stacked.setdefault(name, []).append(arr)
    mean = {}
    std = {}
    for name, chunks in stacked.items():
        data = np.concatenate(chunks, axis=0)
        mean[name] = data.mean(axis=0)
        std[name] = np.maximum(data.std(axis=0), SIGMA_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize(seq: TokenSequence, stats: NormStats) -> TokenSequence:
    if seq.normalized:
        raise ValueError("sequence is already normalized")
    f = _fields(seq)
    z = {k: (f[k] - stats.mean[k]) / stats.std[k] for k in f}
    return replace(
        seq,
        g=z["goal"],
        x=z["state"],
        rtg=z["rtg"],
        ctg=z["ctg"],
        u=z["control"],
        obs=z.get("obs"),
        normalized=True,
    )


def denormalize(seq: TokenSequence, stats: NormStats) -> TokenSequence:
    if not seq.normalized:
        raise ValueError("sequence is not normalized")
    f = _fields(seq)
    raw = {k: f[k] * stats.std[k] + stats.mean[k] for k in f}
    return replace(
        seq,
        g=raw["goal"],
        x=raw["state"],
        rtg=raw["rtg"],
        ctg=raw["ctg"],
        u=raw["control"],
        obs=raw.get("obs"),
        normalized=False,
    )
