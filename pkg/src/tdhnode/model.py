"""The end-to-end progression model: encoders, Laplacian builder, dynamics.

One rollout follows the per-patient forward pass: encode the first encounter
into the initial hidden state, then for every inter-encounter interval build
the Laplacian from the ground-truth onset snapshot at the interval start,
integrate the latent ODE across the interval, and decode next-encounter
marker probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .data import PatientSequence
from .encoders import (
    IndexEncoder,
    InitStateEncoder,
    MarkerEmbedding,
    RiskEncoder,
    TimeEncoder,
)
from .engine import Readout, SolverConfig, dynamics, rk4_integrate
from .hypergraph import (
    ProgressionHypergraph,
    TDHyperedge,
    TDHypergraph,
    td_snapshot,
)
from .laplacian import LaplacianBuilder, LaplacianBundle, SnapshotBatch


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 8
    context_layers: int = 2
    ff_expansion: int = 4
    dropout: float = 0.1
    rk4_steps: int = 10
    adaptive_incidence: bool = True
    learnable_weights: bool = True
    edge_degree_from_binary: bool = False
    degree_floor: float = 1e-8

    def validate(self) -> None:
        if self.dim < 1 or self.dim % self.heads:
            raise ValueError("dim must be positive and divisible by heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.rk4_steps < 1 or self.context_layers < 0 or self.ff_expansion < 1:
            raise ValueError("solver steps, layers, and expansion must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class RolloutResult:
    """Predictions for encounters 2..L plus the per-interval bundles."""

    probabilities: Tensor          # (L-1, n)
    states: Tensor                 # (L, n, dim)
    bundle: Optional[LaplacianBundle]
    times: Tensor                  # (L,)


class ProgressionModel(nn.Module):
    def __init__(
        self,
        hg: ProgressionHypergraph,
        n_risk: int,
        cfg: ModelConfig | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.hg = hg
        self.cfg = cfg
        self.n_risk = n_risk

        dim = cfg.dim
        self.marker_embed = MarkerEmbedding(hg.n, dim)
        self.time_encoder = TimeEncoder(dim)
        self.index_encoder = IndexEncoder(hg.max_trajectory_len, dim)
        self.risk_encoder = RiskEncoder(n_risk, dim)
        self.init_encoder = InitStateEncoder(dim)
        self.laplacian = LaplacianBuilder(
            hg,
            dim,
            heads=cfg.heads,
            context_layers=cfg.context_layers,
            ff_expansion=cfg.ff_expansion,
            dropout=cfg.dropout,
            adaptive_incidence=cfg.adaptive_incidence,
            learnable_weights=cfg.learnable_weights,
            edge_degree_from_binary=cfg.edge_degree_from_binary,
            degree_floor=cfg.degree_floor,
        )
        # Near-zero dynamics init keeps the flow contractive at the start;
        # a unit-scale matrix makes -L(S+x)Theta expansive over long spans.
        bound = 0.1 / dim ** 0.5
        self.transform = nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))
        self.readout = Readout(dim)
        self.solver = SolverConfig(steps_per_interval=cfg.rk4_steps)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.transform.dtype

    # --- encoder surfaces -----------------------------------------------

    def marker_embeddings(self) -> Tensor:
        return self.marker_embed()

    def encode_time(self, t) -> Tensor:
        return self.time_encoder(t)

    def encode_index(self, i) -> Tensor:
        return self.index_encoder(i)

    def encode_risk(self, x: Tensor) -> Tensor:
        return self.risk_encoder(x)

    def initial_state(self, status: Tensor, risk: Tensor) -> Tensor:
        """Hidden state at the first encounter, one row per marker."""
        return self.init_encoder(
            self.marker_embed(), status, self.risk_encoder(risk)
        )

    # --- laplacian surfaces ------------------------------------------------

    def laplacians(self, snaps: Sequence[TDHypergraph]) -> LaplacianBundle:
        """Batched Laplacian bundles, one per TD snapshot."""
        device = self.transform.device
        batch = SnapshotBatch.from_snapshots(
            snaps, self.laplacian.max_len, dtype=self.dtype, device=device
        )
        marker_table = self.marker_embed()
        time_feats = idx_feats = start_feat = None
        if self.laplacian.needs_tokens:
            time_feats = self.time_encoder(batch.onset_times)
            idx_feats = self.index_encoder(self.laplacian.positions)
            start_feat = self.index_encoder(0)
        return self.laplacian(marker_table, time_feats, idx_feats, start_feat, batch)

    def laplacian_at(self, snap: TDHypergraph) -> LaplacianBundle:
        return self.laplacians([snap])

    def adaptive_incidence(self, snap: TDHypergraph) -> Tensor:
        """The (n, m) attention-modulated incidence matrix at one snapshot."""
        return self.laplacian_at(snap).incidence[0]

    def edge_weight_matrix(self, snap: TDHypergraph) -> Tensor:
        """The (m, m) trajectory-correlation Gram matrix at one snapshot."""
        return self.laplacian_at(snap).edge_weights[0]

    def cross_attention(self, edge: TDHyperedge) -> Tensor:
        """Attention weights over one TD-hyperedge's positions.

        Past-set and potential-set weights each sum to 1 when the subset is
        nonempty. Only available when the adaptive incidence is enabled.
        """
        if not self.cfg.adaptive_incidence:
            raise RuntimeError("adaptive incidence is ablated in this model")
        edges = []
        for traj in self.hg.trajectories:
            if traj.id == edge.trajectory.id:
                edges.append(edge)
            else:
                edges.append(TDHyperedge(traj, (None,) * len(traj), 0))
        observed = [t for t in edge.entries if t is not None]
        snap = TDHypergraph(self.hg, tuple(edges), max(observed, default=0.0))
        bundle = self.laplacians([snap])
        return bundle.attention[0, edge.trajectory.id, : len(edge)]

    # --- dynamics -------------------------------------------------------------

    def decode(self, state: Tensor) -> Tensor:
        """Per-marker probabilities from a hidden state."""
        return self.readout(state)

    def rollout(self, seq: PatientSequence) -> RolloutResult:
        """Auto-regressive forward pass over one patient sequence.

        TD snapshots are built from ground-truth onsets up to each encounter
        (teacher forcing); the Laplacian and the encoded risk drive are held
        constant within each interval.
        """
        length = seq.valid_length
        dtype, device = self.dtype, self.transform.device
        times = torch.as_tensor(seq.times[:length], dtype=dtype, device=device)
        risks = torch.as_tensor(seq.risks[:length], dtype=dtype, device=device)
        statuses = torch.as_tensor(seq.statuses[:length], dtype=dtype, device=device)

        state = self.initial_state(statuses[0], risks[0])
        states = [state]
        probs = []
        bundle = None
        if length > 1:
            onsets = seq.onset_map()
            snaps = [
                td_snapshot(self.hg, onsets, float(seq.times[k]))
                for k in range(length - 1)
            ]
            bundle = self.laplacians(snaps)
            drive = self.risk_encoder(risks[: length - 1])  # (L-1, dim)
            for k in range(length - 1):
                lap_k = bundle.laplacian[k]
                drive_k = drive[k]

                def deriv(t, s, lap=lap_k, dr=drive_k):
                    return dynamics(t, s, dr, lap, self.transform)

                state = rk4_integrate(
                    state,
                    float(seq.times[k]),
                    float(seq.times[k + 1]),
                    deriv,
                    self.solver.steps_per_interval,
                )
                states.append(state)
                probs.append(self.readout(state))

        probabilities = (
            torch.stack(probs)
            if probs
            else torch.zeros(0, self.hg.n, dtype=dtype, device=device)
        )
        return RolloutResult(probabilities, torch.stack(states), bundle, times)


def build_model(
    hg: ProgressionHypergraph,
    n_risk: int,
    cfg: ModelConfig | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ProgressionModel:
    """Seeded, reproducible model construction."""
    torch.manual_seed(seed)
    return ProgressionModel(hg, n_risk, cfg, dtype=dtype)
