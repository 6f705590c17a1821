"""Embedding layers feeding the Laplacian and the latent dynamics.

All encoders map into one shared embedding dimension ``dim``:

* marker identity embeddings (MLP over one-hot markers),
* a learnable-frequency cosine encoding of continuous time,
* a fixed sinusoidal encoding of discrete trajectory positions,
* a risk-factor encoder shared across markers,
* the initial hidden-state encoder combining all of the above.

Encoders are pure functions of (parameters, input); linear layers use the
torch default uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .errors import DimensionMismatch, IndexOutOfRange


class MarkerEmbedding(nn.Module):
    """Identity embedding per marker: MLP applied to the one-hot encoding."""

    def __init__(self, n_markers: int, dim: int):
        super().__init__()
        self.expand = nn.Linear(n_markers, dim)
        self.mix = nn.Linear(dim, dim)
        self.register_buffer("one_hot", torch.eye(n_markers))

    def forward(self) -> Tensor:
        """Return the (n, dim) table of marker embeddings."""
        return self.mix(F.gelu(self.expand(self.one_hot)))


class TimeEncoder(nn.Module):
    """Bounded continuous-time features cos(w * t + phase) / sqrt(dim).

    Frequencies are learnable, initialized on a geometric grid spanning
    periods from a few months to a few thousand months; phases start at zero.
    Every coordinate stays within [-1/sqrt(dim), 1/sqrt(dim)].
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.frequency = nn.Parameter(
            torch.pow(10.0, -torch.linspace(0.0, 3.0, dim))
        )
        self.phase = nn.Parameter(torch.zeros(dim))

    def forward(self, t: Tensor | float) -> Tensor:
        """Encode timestamps; output shape is input shape + (dim,)."""
        if not torch.is_tensor(t):
            t = torch.as_tensor(t, device=self.frequency.device)
        angles = t.to(self.frequency.dtype).unsqueeze(-1) * self.frequency + self.phase
        return torch.cos(angles) / math.sqrt(self.dim)


class IndexEncoder(nn.Module):
    """Fixed sinusoidal table over trajectory positions 0..max_index."""

    def __init__(self, max_index: int, dim: int, base: float = 10000.0):
        super().__init__()
        self.max_index = max_index
        position = torch.arange(max_index + 1, dtype=torch.float64).unsqueeze(1)
        k = torch.arange(0, dim, 2, dtype=torch.float64)
        rate = torch.pow(torch.tensor(base, dtype=torch.float64), -k / dim)
        table = torch.zeros(max_index + 1, dim, dtype=torch.float64)
        table[:, 0::2] = torch.sin(position * rate)
        table[:, 1::2] = torch.cos(position * rate)[:, : dim // 2]
        self.register_buffer("table", table.to(torch.float32))

    def forward(self, index: int | Tensor) -> Tensor:
        if torch.is_tensor(index):
            if index.numel() and (index.min() < 0 or index.max() > self.max_index):
                raise IndexOutOfRange(
                    f"position outside [0, {self.max_index}]"
                )
            return self.table[index]
        if not 0 <= index <= self.max_index:
            raise IndexOutOfRange(f"position {index} outside [0, {self.max_index}]")
        return self.table[index]


class RiskEncoder(nn.Module):
    """Maps a c-dimensional risk-factor vector into the embedding space."""

    def __init__(self, n_risk: int, dim: int):
        super().__init__()
        self.n_risk = n_risk
        self.hidden = nn.Linear(n_risk, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_risk:
            raise DimensionMismatch(
                f"risk vector has {x.shape[-1]} entries, expected {self.n_risk}"
            )
        return self.out(F.gelu(self.hidden(x)))


class InitStateEncoder(nn.Module):
    """Builds the initial hidden state row-wise from the first encounter.

    Row i combines the marker embedding, the marker's initial status bit, and
    the encoded initial risk factors; rows are independent, so flipping one
    status bit only changes that row.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.hidden = nn.Linear(2 * dim + 1, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, marker_emb: Tensor, status: Tensor, risk_enc: Tensor) -> Tensor:
        n = marker_emb.shape[0]
        if status.shape != (n,):
            raise DimensionMismatch(
                f"status vector shape {tuple(status.shape)} != ({n},)"
            )
        if risk_enc.shape != (self.dim,):
            raise DimensionMismatch(
                f"encoded risk shape {tuple(risk_enc.shape)} != ({self.dim},)"
            )
        joined = torch.cat(
            [
                marker_emb,
                status.to(marker_emb.dtype).unsqueeze(1),
                risk_enc.unsqueeze(0).expand(n, -1),
            ],
            dim=1,
        )
        return self.out(F.gelu(self.hidden(joined)))
