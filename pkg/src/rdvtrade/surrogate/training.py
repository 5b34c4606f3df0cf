"""Supervised training loop and checkpoint plumbing for the surrogate.

The loss is the summed squared error of the two heads: predicted burns
against the planner's burns, and predicted next states against the rolled
trajectory, averaged over active (unpadded) elements. Runs are deterministic
for a fixed seed: single-threaded float64 torch, seeded parameter init,
seeded shuffling, and seeded dropout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from rdvtrade.surrogate import tokens as tk
from rdvtrade.surrogate.model import ModelConfig, TrajectoryModel

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelState:
    """A trained model with everything needed to run it elsewhere."""

    model: TrajectoryModel
    stats: tk.NormStats
    seed: int
    step: int


@dataclass(frozen=True)
class _Batch:
    g: torch.Tensor
    x: torch.Tensor
    rtg: torch.Tensor
    ctg: torch.Tensor
    u: torch.Tensor
    obs: torch.Tensor | None
    u_mask: torch.Tensor
    x_mask: torch.Tensor


def _collate(seqs: list[tk.TokenSequence]) -> _Batch:
    """Right-pad normalized sequences to a common horizon.

    Padding sits after every real token, so under the causal mask it cannot
    leak into real positions; the loss masks select the active steps.
    """
    b = len(seqs)
    n_max = max(s.n_steps for s in seqs)
    with_obs = seqs[0].obs is not None
    g = torch.zeros(b, n_max, 6, dtype=torch.float64)
    x = torch.zeros(b, n_max, 6, dtype=torch.float64)
    rtg = torch.zeros(b, n_max, 1, dtype=torch.float64)
    ctg = torch.zeros(b, n_max, 1, dtype=torch.float64)
    u = torch.zeros(b, n_max, 3, dtype=torch.float64)
    obs = torch.zeros(b, n_max, 10, dtype=torch.float64) if with_obs else None
    u_mask = torch.zeros(b, n_max, dtype=torch.bool)
    x_mask = torch.zeros(b, n_max, dtype=torch.bool)
    for i, s in enumerate(seqs):
        if (s.obs is not None) != with_obs:
            raise ValueError("cannot batch sequences with and without observations")
        n = s.n_steps
        g[i, :n] = torch.from_numpy(s.g)
        x[i, :n] = torch.from_numpy(s.x)
        rtg[i, :n] = torch.from_numpy(s.rtg)
        ctg[i, :n] = torch.from_numpy(s.ctg)
        u[i, :n] = torch.from_numpy(s.u)
        if obs is not None:
            obs[i, :n] = torch.from_numpy(s.obs)
        u_mask[i, :n] = True
        # The last step's next-state target does not exist.
        x_mask[i, : n - 1] = True
    return _Batch(g, x, rtg, ctg, u, obs, u_mask, x_mask)


def _batch_loss(model: TrajectoryModel, batch: _Batch) -> tuple[torch.Tensor, int]:
    """Summed squared error over active elements, plus the element count."""
    u_hat, x_next_hat = model.predict(
        batch.g, batch.x, batch.rtg, batch.ctg, batch.u, obs=batch.obs
    )
    x_next = torch.zeros_like(batch.x)
    x_next[:, :-1] = batch.x[:, 1:]
    u_err = ((u_hat - batch.u) ** 2).sum(dim=-1)
    x_err = ((x_next_hat - x_next) ** 2).sum(dim=-1)
    sse = (u_err * batch.u_mask).sum() + (x_err * batch.x_mask).sum()
    count = 3 * int(batch.u_mask.sum()) + 6 * int(batch.x_mask.sum())
    return sse, count


def _epoch_loss(model: TrajectoryModel, batches: list[_Batch]) -> float:
    model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for batch in batches:
            sse, n = _batch_loss(model, batch)
            total += float(sse)
            count += n
    return total / count


def train(
    sequences: list[tk.TokenSequence],
    config: ModelConfig | None = None,
    epochs: int = 200,
    seed: int = 0,
    val_sequences: list[tk.TokenSequence] | None = None,
) -> tuple[ModelState, list[dict]]:
    """Fit the surrogate on raw token sequences.

    Normalization statistics come from the training set only and travel with
    the model. Returns the trained state and a per-epoch loss curve; the
    reported loss is the epoch's total error over its total element count,
    so it is invariant to batch composition.
    """
    if not sequences:
        raise ValueError("training set is empty")
    if epochs < 1:
        raise ValueError("need at least one epoch")
    config = config or ModelConfig()
    config.validate()

    torch.set_num_threads(1)
    torch.manual_seed(seed)
    model = TrajectoryModel(config)
    stats = tk.fit_stats(sequences)
    normed = [tk.normalize(s, stats) for s in sequences]
    val_normed = [tk.normalize(s, stats) for s in val_sequences or []]
    val_batches = [
        _collate(val_normed[i : i + config.batch_size])
        for i in range(0, len(val_normed), config.batch_size)
    ]

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    # Cosine decay to zero quenches the end-of-run oscillation that keeps
    # near-duplicate conditioning inputs (same state, different return and
    # count tokens) from separating at a constant step size.
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=epochs, eta_min=0.0
    )
    rng = np.random.default_rng(seed)
    curve: list[dict] = []
    step = 0

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(normed))
        batches = [
            _collate([normed[j] for j in order[i : i + config.batch_size]])
            for i in range(0, len(order), config.batch_size)
        ]
        model.train()
        optimizer.zero_grad()
        total = 0.0
        count = 0
        pending = 0
        for i, batch in enumerate(batches):
            sse, n = _batch_loss(model, batch)
            loss = sse / n
            if not math.isfinite(float(loss.detach())):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch {i} (step {step})"
                )
            (loss / config.accumulation_steps).backward()
            total += float(sse.detach())
            count += n
            pending += 1
            if pending == config.accumulation_steps or i == len(batches) - 1:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
                pending = 0
                step += 1
        scheduler.step()
        entry = {"epoch": epoch, "loss": total / count}
        if val_batches:
            entry["val_loss"] = _epoch_loss(model, val_batches)
        curve.append(entry)

    model.eval()
    return ModelState(model=model, stats=stats, seed=seed, step=step), curve


def save_checkpoint(state: ModelState, path: str) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": state.model.config.to_dict(),
            "stats": state.stats.to_dict(),
            "state_dict": state.model.state_dict(),
            "seed": state.seed,
            "step": state.step,
        },
        path,
    )


def load_checkpoint(path: str) -> ModelState:
    data = torch.load(path, weights_only=True)
    version = data.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    model = TrajectoryModel(ModelConfig(**data["config"]))
    model.load_state_dict(data["state_dict"])
    model.eval()
    return ModelState(
        model=model,
        stats=tk.NormStats.from_dict(data["stats"]),
        seed=int(data["seed"]),
        step=int(data["step"]),
    )


def export_loss_curve(curve: list[dict], path: str) -> None:
    """Write the per-epoch losses as CSV."""
    fields = ["epoch", "loss"]
    if any("val_loss" in row for row in curve):
        fields.append("val_loss")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: row.get(k, "") for k in fields})


def clone_state(state: ModelState) -> ModelState:
    """Deep-copy a model state, for warm starts that must not alias."""
    fresh = TrajectoryModel(state.model.config)
    fresh.load_state_dict(
        {k: v.clone() for k, v in state.model.state_dict().items()}
    )
    fresh.eval()
    return replace(state, model=fresh)
