"""Learnable time-dependent hypergraph Laplacian.

Per encounter snapshot the builder produces:

* an adaptive incidence matrix: binary membership modulated by cross
  attention from each trajectory's frontier marker, with separate softmax
  branches over the observed (past) and unobserved (potential) position
  subsets,
* a learnable hyperedge weight matrix: the Gram matrix of projected
  trajectory embeddings pooled from subset-restricted self attention,
* node/edge degrees and the normalized Laplacian
  ``I - Dv^{-1/2} Hp Wp De^{-1} Hp^T Dv^{-1/2}``.

Both learnable pieces can be switched off independently; with both off the
builder reduces exactly to the static Laplacian with binary incidence and
identity edge weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .errors import NonFiniteLaplacian
from .hypergraph import ProgressionHypergraph, TDHypergraph

DEGREE_FLOOR = 1e-8


def masked_softmax(scores: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last dim restricted to ``mask``; empty rows give 0."""
    filled = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    probs = filled.softmax(dim=-1)
    return probs * mask.any(dim=-1, keepdim=True).to(probs.dtype)


def node_edge_degrees(
    incidence: Tensor,
    edge_weights: Tensor,
    floor: float = DEGREE_FLOOR,
    binary_incidence: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Diagonal degree vectors for the normalized Laplacian.

    Node degree i sums ``Hp(i, e) * Wp(e, e)`` over edges; edge degree e sums
    column e of ``Hp`` (or of the binary incidence when supplied). Both are
    floored at ``floor`` so the inverse powers stay finite.
    """
    w_diag = torch.diagonal(edge_weights, dim1=-2, dim2=-1)
    node_deg = (incidence * w_diag.unsqueeze(-2)).sum(-1).clamp_min(floor)
    de_src = incidence if binary_incidence is None else binary_incidence
    edge_deg = de_src.sum(-2).clamp_min(floor)
    if binary_incidence is not None:
        edge_deg = edge_deg.expand(node_deg.shape[:-1] + edge_deg.shape[-1:])
    return node_deg, edge_deg


def assemble_laplacian(
    incidence: Tensor,
    edge_weights: Tensor,
    node_degree: Tensor,
    edge_degree: Tensor,
) -> Tensor:
    """``I - Dv^{-1/2} Hp Wp De^{-1} Hp^T Dv^{-1/2}`` with finiteness check."""
    inv_sqrt_dv = node_degree.rsqrt()
    scaled = (incidence @ edge_weights) / edge_degree.unsqueeze(-2)
    mix = scaled @ incidence.transpose(-1, -2)
    mix = inv_sqrt_dv.unsqueeze(-1) * mix * inv_sqrt_dv.unsqueeze(-2)
    n = incidence.shape[-2]
    eye = torch.eye(n, dtype=incidence.dtype, device=incidence.device)
    lap = eye - mix
    if not torch.isfinite(lap).all():
        raise NonFiniteLaplacian("laplacian contains NaN or Inf")
    return lap


@dataclass
class SnapshotBatch:
    """Tensorized view of B TD-snapshots sharing one base hypergraph."""

    observed: Tensor     # (B, m, E) bool, in-prefix positions
    onset_times: Tensor  # (B, m, E) float, 0 where unobserved
    frontier: Tensor     # (B, m) long
    as_of: Tensor        # (B,) float

    @classmethod
    def from_snapshots(
        cls,
        snaps: Sequence[TDHypergraph],
        max_len: int,
        dtype: torch.dtype = torch.float32,
        device: torch.device | str | None = None,
    ) -> "SnapshotBatch":
        b = len(snaps)
        m = snaps[0].base.m if b else 0
        observed = torch.zeros(b, m, max_len, dtype=torch.bool, device=device)
        times = torch.zeros(b, m, max_len, dtype=dtype, device=device)
        frontier = torch.zeros(b, m, dtype=torch.long, device=device)
        as_of = torch.zeros(b, dtype=dtype, device=device)
        for bi, snap in enumerate(snaps):
            as_of[bi] = snap.as_of
            for j, edge in enumerate(snap.hyperedges):
                k0 = edge.frontier
                frontier[bi, j] = k0
                if k0:
                    observed[bi, j, :k0] = True
                    times[bi, j, :k0] = torch.tensor(
                        edge.entries[:k0], dtype=dtype, device=device
                    )
        return cls(observed, times, frontier, as_of)


@dataclass
class LaplacianBundle:
    """Per-snapshot adaptive incidence, edge weights, degrees, and Laplacian.

    ``node_degree`` / ``edge_degree`` hold the diagonals; ``attention`` holds
    the cross-attention weights per (snapshot, trajectory, position), zero at
    padding, or ``None`` when the adaptive incidence is ablated.
    """

    incidence: Tensor              # Hp (B, n, m)
    edge_weights: Tensor           # Wp (B, m, m)
    node_degree: Tensor            # (B, n)
    edge_degree: Tensor            # (B, m)
    laplacian: Tensor              # (B, n, n)
    attention: Optional[Tensor]    # (B, m, E) or None
    as_of: Tensor                  # (B,)

    def __len__(self) -> int:
        return self.laplacian.shape[0]


class SubsetSelfAttention(nn.Module):
    """Multi-head scaled dot-product attention restricted by an allow mask."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, allow: Tensor) -> Tensor:
        n, t, d = x.shape
        q = self.query(x).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        k = self.key(x).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        v = self.value(x).view(n, t, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = masked_softmax(scores, allow.unsqueeze(1))  # (n, H, t, t)
        ctx = (probs @ v).transpose(1, 2).reshape(n, t, d)
        return self.out(ctx)


class ContextLayer(nn.Module):
    """Self-attention block with expansion-4 feed-forward, GELU, dropout."""

    def __init__(self, dim: int, heads: int, ff_expansion: int, dropout: float):
        super().__init__()
        self.attn = SubsetSelfAttention(dim, heads)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_expansion * dim),
            nn.GELU(),
            nn.Linear(ff_expansion * dim, dim),
        )
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, allow: Tensor) -> Tensor:
        x = self.norm_attn(x + self.drop(self.attn(x, allow)))
        x = self.norm_ff(x + self.drop(self.ff(x)))
        return x


class LaplacianBuilder(nn.Module):
    """Builds per-snapshot Laplacians from marker/time/position encodings.

    The builder owns the attention projections, the virtual-start embedding
    used when a trajectory has no observed prefix, the subset context encoder
    stack, and the trajectory projection behind the edge-weight Gram matrix.
    """

    def __init__(
        self,
        hg: ProgressionHypergraph,
        dim: int,
        heads: int = 8,
        context_layers: int = 2,
        ff_expansion: int = 4,
        dropout: float = 0.1,
        adaptive_incidence: bool = True,
        learnable_weights: bool = True,
        edge_degree_from_binary: bool = False,
        degree_floor: float = DEGREE_FLOOR,
    ):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.n = hg.n
        self.m = hg.m
        self.max_len = hg.max_trajectory_len
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.adaptive_incidence = adaptive_incidence
        self.learnable_weights = learnable_weights
        self.edge_degree_from_binary = edge_degree_from_binary
        self.degree_floor = degree_floor

        member_idx = torch.zeros(self.m, self.max_len, dtype=torch.long)
        member_mask = torch.zeros(self.m, self.max_len, dtype=torch.bool)
        positions = torch.zeros(self.m, self.max_len, dtype=torch.long)
        incidence = torch.zeros(self.n, self.m)
        for traj in hg.trajectories:
            for pos, marker in enumerate(traj.markers):
                member_idx[traj.id, pos] = marker.index
                member_mask[traj.id, pos] = True
                positions[traj.id, pos] = pos + 1  # 1-based trajectory position
                incidence[marker.index, traj.id] = 1.0
        self.register_buffer("member_idx", member_idx)
        self.register_buffer("member_mask", member_mask)
        self.register_buffer("positions", positions)
        self.register_buffer("binary", incidence)
        slot_edge, slot_pos = member_mask.nonzero(as_tuple=True)
        self.register_buffer("slot_edge", slot_edge)
        self.register_buffer("slot_marker", member_idx[slot_edge, slot_pos])

        if adaptive_incidence:
            self.frontier_query = nn.Linear(dim, dim, bias=False)
            self.position_key = nn.Linear(dim, dim, bias=False)
            bound = 1.0 / math.sqrt(dim)
            self.start_token = nn.Parameter(torch.empty(dim).uniform_(-bound, bound))
        if learnable_weights:
            self.position_value = nn.Linear(dim, dim, bias=False)
            self.context = nn.ModuleList(
                ContextLayer(dim, heads, ff_expansion, dropout)
                for _ in range(context_layers)
            )
            self.traj_proj = nn.Linear(dim, dim, bias=False)

    @property
    def needs_tokens(self) -> bool:
        return self.adaptive_incidence or self.learnable_weights

    def forward(
        self,
        marker_table: Tensor,            # (n, d)
        time_feats: Optional[Tensor],    # (B, m, E, d)
        idx_feats: Optional[Tensor],     # (m, E, d)
        start_idx_feat: Optional[Tensor],  # (d,)
        snap: SnapshotBatch,
    ) -> LaplacianBundle:
        b = snap.frontier.shape[0]
        dtype = marker_table.dtype
        member = self.member_mask
        observed = snap.observed

        tokens = None
        marker_feats = marker_table[self.member_idx]  # (m, E, d)
        if self.needs_tokens:
            tokens = marker_feats + torch.where(
                observed.unsqueeze(-1), time_feats, idx_feats
            )  # (B, m, E, d)

        alpha = None
        if self.adaptive_incidence:
            alpha = self._cross_attention(
                tokens, marker_feats, idx_feats, start_idx_feat, snap
            )
            incidence = torch.zeros(b, self.n, self.m, dtype=dtype,
                                    device=marker_table.device)
            incidence[:, self.slot_marker, self.slot_edge] = alpha[:, member]
        else:
            incidence = self.binary.to(dtype).expand(b, -1, -1)

        if self.learnable_weights:
            past = observed & member
            potential = (~observed) & member
            allow = (past.unsqueeze(-1) & past.unsqueeze(-2)) | (
                potential.unsqueeze(-1) & potential.unsqueeze(-2)
            )  # (B, m, E, E): attention stays within each subset
            x = self.position_value(tokens).flatten(0, 1)
            allow_flat = allow.flatten(0, 1)
            for layer in self.context:
                x = layer(x, allow_flat)
            ctx = x.view(b, self.m, self.max_len, self.dim)
            counts = member.sum(-1).to(dtype)  # (m,)
            pooled = (ctx * member.unsqueeze(-1)).sum(2) / counts.unsqueeze(-1)
            latent = self.traj_proj(pooled)  # (B, m, d)
            edge_weights = latent @ latent.transpose(1, 2)
        else:
            eye = torch.eye(self.m, dtype=dtype, device=marker_table.device)
            edge_weights = eye.expand(b, -1, -1)

        binary = self.binary.to(dtype) if self.edge_degree_from_binary else None
        node_deg, edge_deg = node_edge_degrees(
            incidence, edge_weights, self.degree_floor, binary_incidence=binary
        )
        lap = assemble_laplacian(incidence, edge_weights, node_deg, edge_deg)
        return LaplacianBundle(
            incidence, edge_weights, node_deg, edge_deg, lap, alpha, snap.as_of
        )

    def _cross_attention(
        self,
        tokens: Tensor,
        marker_feats: Tensor,
        idx_feats: Tensor,
        start_idx_feat: Tensor,
        snap: SnapshotBatch,
    ) -> Tensor:
        b, m, e, d = tokens.shape
        h, dh = self.heads, self.head_dim
        member = self.member_mask
        observed = snap.observed
        has_past = (snap.frontier > 0).unsqueeze(-1)  # (B, m, 1)
        slot = (snap.frontier - 1).clamp_min(0)
        gather_idx = slot[..., None, None].expand(b, m, 1, d)

        # Past-branch query: frontier marker with its time encoding (the
        # gathered token is time-encoded exactly when a prefix exists).
        time_query_src = tokens.gather(2, gather_idx).squeeze(2)  # (B, m, d)
        marker_at = marker_feats.expand(b, m, e, d).gather(2, gather_idx).squeeze(2)
        idx_at = idx_feats.expand(b, m, e, d).gather(2, gather_idx).squeeze(2)
        start = self.start_token + start_idx_feat
        idx_query_src = torch.where(has_past, marker_at + idx_at, start)

        q_time = self.frontier_query(time_query_src).view(b, m, h, dh)
        q_idx = self.frontier_query(idx_query_src).view(b, m, h, dh)
        keys = self.position_key(tokens).view(b, m, e, h, dh)

        scale = 1.0 / math.sqrt(dh)
        scores_time = torch.einsum("bmhc,bmehc->bmhe", q_time, keys) * scale
        scores_idx = torch.einsum("bmhc,bmehc->bmhe", q_idx, keys) * scale

        past_mask = (observed & member).unsqueeze(2)        # (B, m, 1, E)
        potential_mask = ((~observed) & member).unsqueeze(2)
        alpha_past = masked_softmax(scores_time, past_mask).mean(dim=2)
        alpha_pot = masked_softmax(scores_idx, potential_mask).mean(dim=2)
        return alpha_past + alpha_pot  # disjoint supports, (B, m, E)
