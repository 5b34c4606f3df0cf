"""Causal-attention sequence model over trajectory element tokens.

The model embeds each element type with its own input projection into a
shared width, adds a learned type embedding and a learned step-index
embedding, and runs a small pre-norm transformer with a causal mask. Two
linear heads read the hidden states: the control head at the token just
before each burn (the observation when present, otherwise the count), and
the state head at the burn token itself, predicting the next state.

Everything runs in float64. Attention keeps an explicit key/value cache so
autoregressive rollouts extend the context one block at a time instead of
re-encoding the prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from rdvtrade.surrogate.tokens import ELEMENT_DIMS

#: Within-step token order. Families without a varying target skip "obs".
TOKEN_ORDER = ("goal", "state", "rtg", "ctg", "obs", "control")
TYPE_INDEX = {name: i for i, name in enumerate(TOKEN_ORDER)}

#: Per-layer attention cache: (keys, values), each [B, heads, T, head_dim].
LayerCache = tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimizer settings."""

    layers: int = 2
    heads: int = 2
    embed_dim: int = 64
    context_steps: int = 50
    dropout: float = 0.0
    learning_rate: float = 1e-3
    grad_clip: float = 1.0
    batch_size: int = 16
    accumulation_steps: int = 1

    def validate(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.embed_dim < 1:
            raise ValueError("layers, heads, and embed dim must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.context_steps < 2:
            raise ValueError("context must cover at least two steps")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be nonnegative")
        if self.grad_clip <= 0.0:
            raise ValueError("gradient clip must be positive")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("batch size and accumulation steps must be positive")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "context_steps": self.context_steps,
            "dropout": self.dropout,
            "learning_rate": self.learning_rate,
            "grad_clip": self.grad_clip,
            "batch_size": self.batch_size,
            "accumulation_steps": self.accumulation_steps,
        }


DESK_CONFIG = ModelConfig()
PAPER_CONFIG = ModelConfig(
    layers=6,
    heads=6,
    embed_dim=384,
    context_steps=50,
    dropout=0.1,
    learning_rate=3e-5,
    grad_clip=1.0,
    batch_size=4,
    accumulation_steps=8,
)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.embed_dim // config.heads
        self.qkv = nn.Linear(config.embed_dim, 3 * config.embed_dim)
        self.proj = nn.Linear(config.embed_dim, config.embed_dim)
        self.drop = nn.Dropout(config.dropout)

    def forward(
        self, h: torch.Tensor, past: LayerCache | None = None
    ) -> tuple[torch.Tensor, LayerCache]:
        b, t_new, e = h.shape
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        shape = (b, t_new, self.heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        t_total = k.shape[2]

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # Queries see the whole cached prefix plus the causal part of the
        # new block. Masked columns get exactly zero weight, so outputs at
        # earlier positions are bitwise independent of later tokens.
        bias = torch.zeros(t_new, t_total, dtype=h.dtype)
        past_len = t_total - t_new
        new_block = torch.triu(
            torch.full((t_new, t_new), -torch.inf, dtype=h.dtype), diagonal=1
        )
        bias[:, past_len:] = new_block
        attn = torch.softmax(scores + bias, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t_new, e)
        return self.drop(self.proj(out)), (k, v)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.embed_dim)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(config.embed_dim, 4 * config.embed_dim),
            nn.GELU(),
            nn.Linear(4 * config.embed_dim, config.embed_dim),
            nn.Dropout(config.dropout),
        )

    def forward(
        self, h: torch.Tensor, past: LayerCache | None = None
    ) -> tuple[torch.Tensor, LayerCache]:
        a, cache = self.attn(self.ln1(h), past)
        h = h + a
        h = h + self.mlp(self.ln2(h))
        return h, cache


class TrajectoryModel(nn.Module):
    """Two-headed causal transformer over per-step element tokens."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        e = config.embed_dim
        self.embed_in = nn.ModuleDict(
            {name: nn.Linear(ELEMENT_DIMS[name], e) for name in TOKEN_ORDER}
        )
        self.type_embed = nn.Embedding(len(TOKEN_ORDER), e)
        self.step_embed = nn.Embedding(config.context_steps, e)
        self.embed_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.ln_out = nn.LayerNorm(e)
        self.control_head = nn.Linear(e, ELEMENT_DIMS["control"])
        self.state_head = nn.Linear(e, ELEMENT_DIMS["state"])
        self.double()

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_steps(
        self,
        g: torch.Tensor,
        x: torch.Tensor,
        rtg: torch.Tensor,
        ctg: torch.Tensor,
        u: torch.Tensor | None = None,
        obs: torch.Tensor | None = None,
        step_offset: int = 0,
    ) -> torch.Tensor:
        """Interleave per-step element arrays into one token tensor.

        Inputs are [B, N, dim] slices of normalized sequences. The control
        slice may be omitted to build the query block of a rollout step,
        whose last token is then the one the control head reads. Returns
        [B, N * tokens_per_step, embed_dim].
        """
        b, n, _ = x.shape
        if step_offset + n > self.config.context_steps:
            raise ValueError(
                f"steps {step_offset}..{step_offset + n} exceed the "
                f"{self.config.context_steps}-step context window"
            )
        parts = [("goal", g), ("state", x), ("rtg", rtg), ("ctg", ctg)]
        if obs is not None:
            parts.append(("obs", obs))
        if u is not None:
            parts.append(("control", u))
        embedded = []
        type_ids = []
        for name, values in parts:
            embedded.append(self.embed_in[name](values))
            type_ids.append(TYPE_INDEX[name])
        h = torch.stack(embedded, dim=2)
        h = h + self.type_embed(torch.tensor(type_ids))
        steps = torch.arange(step_offset, step_offset + n)
        h = h + self.step_embed(steps)[None, :, None, :]
        return self.embed_drop(h.reshape(b, n * len(parts), -1))

    def embed_element(self, name: str, values: torch.Tensor, step: int) -> torch.Tensor:
        """Embed a lone element token, e.g. the burn feedback of a rollout.

        ``values`` is [B, 1, dim] for one step; the token gets the same type
        and step embeddings it would have had inside a full sequence.
        """
        if step >= self.config.context_steps:
            raise ValueError(
                f"step {step} exceeds the {self.config.context_steps}-step "
                "context window"
            )
        h = self.embed_in[name](values)
        h = h + self.type_embed(torch.tensor([TYPE_INDEX[name]]))
        h = h + self.step_embed(torch.tensor([step]))
        return self.embed_drop(h)

    def forward(
        self,
        h: torch.Tensor,
        past: list[LayerCache] | None = None,
    ) -> tuple[torch.Tensor, list[LayerCache]]:
        """Run the transformer core on embedded tokens.

        ``past`` carries the attention cache from earlier blocks of the same
        sequence; the returned cache includes the new tokens.
        """
        caches = []
        for i, block in enumerate(self.blocks):
            h, cache = block(h, past[i] if past is not None else None)
            caches.append(cache)
        return self.ln_out(h), caches

    def predict(
        self,
        g: torch.Tensor,
        x: torch.Tensor,
        rtg: torch.Tensor,
        ctg: torch.Tensor,
        u: torch.Tensor,
        obs: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-step control and next-state predictions for full sequences.

        Returns (u_hat [B, N, 3], x_next_hat [B, N, 6]) in normalized units.
        The last state prediction has no target and is ignored by the loss.
        """
        h = self.embed_steps(g, x, rtg, ctg, u=u, obs=obs)
        hidden, _ = self.forward(h)
        b, n = x.shape[:2]
        d = 6 if obs is not None else 5
        per_step = hidden.view(b, n, d, -1)
        u_hat = self.control_head(per_step[:, :, d - 2, :])
        x_next_hat = self.state_head(per_step[:, :, d - 1, :])
        return u_hat, x_next_hat
