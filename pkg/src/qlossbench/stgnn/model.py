"""Spatiotemporal graph network over the full syndrome volume.

The whole window of ``T+1`` detector slices is embedded at once into a
hidden volume ``h`` of shape ``(B, T+1, N, D)``. Each block applies, in
order, message passing on the Tanner graph, mixing along the round axis
(convolution and attention fused by a learned gate), and attention across
nodes with a learned bias per Tanner distance. Two heads read the result:
one logit per equivalent logical observable, and one loss logit per data
qubit per round.

Every sub-layer is residual with layer normalization applied after the sum.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from qlossbench.lattice import CodeLayout, shortest_distances

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    n_heads: int = 4
    N_l: int = 2
    kernel: int = 3
    distance_cap: int = 8
    lambda_logic: float = 1.0
    lambda_loss: float = 1.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.D < 1 or self.n_heads < 1 or self.D % self.n_heads:
            raise ValueError(f"D={self.D} must be a positive multiple of n_heads={self.n_heads}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.N_l < 1:
            raise ValueError("N_l must be at least 1")
        if self.distance_cap < 1:
            raise ValueError("distance_cap must be at least 1")
        if self.lambda_logic < 0 or self.lambda_loss < 0 or self.lambda_logic + self.lambda_loss == 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Inputs:
    """Integer feature volumes, each ``(B, T+1, N)``, plus the task basis."""

    anc_bit: Tensor
    det_bit: Tensor
    task: Tensor  # (B,)

    @property
    def batch(self) -> int:
        return self.anc_bit.shape[0]

    @property
    def T(self) -> int:
        return self.anc_bit.shape[1] - 1

    def select(self, idx) -> "Inputs":
        return Inputs(self.anc_bit[idx], self.det_bit[idx], self.task[idx])


def encode(layout: CodeLayout, ancilla_outcomes, detectors, basis_code) -> Inputs:
    """Turn raw bit volumes into per-node feature volumes.

    ``ancilla_outcomes`` is ``(B, T, A)`` and ``detectors`` ``(B, T+1, A)``.
    Slice ``t`` holds round ``t+1``'s ancilla outcome and detector slice
    ``t`` (round ``t+1`` compared with round ``t``); the last slice has no
    ancilla outcome. Data nodes read 0.
    """
    anc = np.asarray(ancilla_outcomes)
    det = np.asarray(detectors)
    if anc.ndim == 2:
        anc, det = anc[None], det[None]
    B, T, A = anc.shape
    if A != layout.n_ancilla or det.shape != (B, T + 1, A):
        raise ValueError(
            f"record shapes {anc.shape[1:]} / {det.shape[1:]} do not match d={layout.d}"
        )
    N, nd = layout.n_nodes, layout.n_data
    anc_bit = np.zeros((B, T + 1, N), dtype=np.int64)
    det_bit = np.zeros((B, T + 1, N), dtype=np.int64)
    anc_bit[:, :T, nd:] = anc
    det_bit[:, :, nd:] = det
    task = np.broadcast_to(np.asarray(basis_code, dtype=np.int64), (B,)).copy()
    return Inputs(torch.from_numpy(anc_bit), torch.from_numpy(det_bit), torch.from_numpy(task))


def encode_dataset(dataset, idx=slice(None)) -> Inputs:
    return encode(
        dataset.layout,
        dataset.ancilla_outcomes[idx],
        dataset.detectors[idx],
        dataset.basis.code,
    )


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention on ``(..., heads, L, dh)`` tensors."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    w = torch.softmax(logits, dim=-1)
    return w @ v, w


class MultiHead(nn.Module):
    """Self-attention over the second-to-last axis of ``(..., L, D)``."""

    def __init__(self, D: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(D, 3 * D)
        self.out = nn.Linear(D, D)

    def forward(self, x: Tensor, bias: Tensor | None = None, return_weights: bool = False):
        *lead, L, D = x.shape
        dh = D // self.n_heads
        qkv = self.qkv(x).reshape(*lead, L, 3, self.n_heads, dh)
        q, k, v = (qkv.select(-3, i).transpose(-3, -2) for i in range(3))  # (..., H, L, dh)
        y, w = attention(q, k, v, bias)
        y = self.out(y.transpose(-3, -2).reshape(*lead, L, D))
        return (y, w) if return_weights else y


class Embedding(nn.Module):
    """Sum of six feature embeddings followed by a linear projection."""

    def __init__(self, layout: CodeLayout, D: int):
        super().__init__()
        nd = layout.n_data
        kinds = [0] * nd + [1 if k else 2 for k in layout.ancilla_kinds]
        self.register_buffer("node_type", torch.tensor([0] * nd + [1] * layout.n_ancilla))
        self.register_buffer("anc_type", torch.tensor(kinds))
        self.anc_bit = nn.Embedding(2, D)
        self.det_bit = nn.Embedding(2, D)
        self.node_kind = nn.Embedding(2, D)
        self.anc_kind = nn.Embedding(3, D)
        self.task = nn.Embedding(2, D)
        self.index = nn.Embedding(layout.n_nodes, D)
        self.proj = nn.Linear(D, D)

    def forward(self, x: Inputs) -> Tensor:
        static = (
            self.node_kind(self.node_type)
            + self.anc_kind(self.anc_type)
            + self.index.weight
        )  # (N, D)
        e = (
            self.anc_bit(x.anc_bit)
            + self.det_bit(x.det_bit)
            + static
            + self.task(x.task)[:, None, None, :]
        )
        return self.proj(e)


class LocalGNN(nn.Module):
    """Sum-aggregated messages over Tanner edges, per round."""

    def __init__(self, adjacency: Tensor, D: int):
        super().__init__()
        self.register_buffer("adj", adjacency)
        self.message = nn.Linear(D, D)
        self.update = nn.Sequential(nn.Linear(2 * D, D), nn.GELU(), nn.Linear(D, D))
        self.norm = nn.LayerNorm(D)

    def forward(self, h: Tensor) -> Tensor:
        agg = torch.einsum("uv,btvd->btud", self.adj, self.message(h))
        return self.norm(h + self.update(torch.cat([h, agg], dim=-1)))


class TemporalMixing(nn.Module):
    """Convolution and attention along rounds, blended by an elementwise gate."""

    def __init__(self, D: int, n_heads: int, kernel: int):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(D, D, kernel, padding=kernel // 2)
        self.attn = MultiHead(D, n_heads)
        self.gate = nn.Linear(2 * D, D)
        self.norm = nn.LayerNorm(D)

    def branches(self, h: Tensor) -> tuple[Tensor, Tensor]:
        B, T1, N, D = h.shape
        if self.kernel > T1:
            raise ValueError(f"kernel {self.kernel} longer than the {T1}-slice window")
        per_node = h.permute(0, 2, 1, 3)  # (B, N, T1, D)
        a = self.conv(per_node.reshape(B * N, T1, D).transpose(1, 2))
        a = a.transpose(1, 2).reshape(B, N, T1, D)
        b = self.attn(per_node)
        return a.permute(0, 2, 1, 3), b.permute(0, 2, 1, 3)

    def forward(self, h: Tensor) -> Tensor:
        a, b = self.branches(h)
        g = torch.sigmoid(self.gate(torch.cat([a, b], dim=-1)))
        return self.norm(h + g * a + (1.0 - g) * b)


class SpatialAttention(nn.Module):
    """Attention across nodes within a round, biased by Tanner distance."""

    def __init__(self, dist: Tensor, D: int, n_heads: int, cap: int):
        super().__init__()
        self.register_buffer("dist", dist.clamp(max=cap))
        self.attn = MultiHead(D, n_heads)
        self.bias_table = nn.Parameter(torch.zeros(n_heads, cap + 1, dtype=DTYPE))
        self.norm = nn.LayerNorm(D)

    def bias(self) -> Tensor:
        return self.bias_table[:, self.dist]  # (H, N, N)

    def forward(self, h: Tensor) -> Tensor:
        return self.norm(h + self.attn(h, self.bias()))


class Block(nn.Module):
    def __init__(self, adjacency: Tensor, dist: Tensor, cfg: ModelConfig):
        super().__init__()
        self.gnn = LocalGNN(adjacency, cfg.D)
        self.temporal = TemporalMixing(cfg.D, cfg.n_heads, cfg.kernel)
        self.spatial = SpatialAttention(dist, cfg.D, cfg.n_heads, cfg.distance_cap)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, h: Tensor) -> Tensor:
        h = self.drop(self.gnn(h))
        h = self.drop(self.temporal(h))
        return self.drop(self.spatial(h))


class STGNN(nn.Module):
    """Dual-head decoder for one code distance.

    ``forward_calls`` counts calls to :meth:`forward`, so a harness can check
    that a window was decoded in a single pass.
    """

    def __init__(self, layout: CodeLayout, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.layout = layout
        self.cfg = cfg
        self.forward_calls = 0
        adj = torch.zeros(layout.n_nodes, layout.n_nodes, dtype=DTYPE)
        for u, nbrs in enumerate(layout.adjacency):
            adj[u, list(nbrs)] = 1.0
        dist = torch.from_numpy(shortest_distances(layout, cfg.distance_cap).dist)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.embed = Embedding(layout, cfg.D)
            self.blocks = nn.ModuleList([Block(adj, dist, cfg) for _ in range(cfg.N_l)])
            self.logical_head = nn.Sequential(
                nn.Linear(cfg.D, cfg.D), nn.GELU(), nn.Linear(cfg.D, layout.d)
            )
            self.loss_head = nn.Sequential(nn.Linear(cfg.D, cfg.D), nn.GELU(), nn.Linear(cfg.D, 1))
        self.to(DTYPE)

    def hidden(self, x: Inputs) -> Tensor:
        h = self.embed(x)
        for block in self.blocks:
            h = block(h)
        return h

    def forward(self, x: Inputs) -> tuple[Tensor, Tensor]:
        """Logical logits ``(B, d)`` and loss logits ``(B, d*d, T)``.

        Loss logit ``[:, q, r]`` is read from hidden slice ``r``, the slice
        where a loss in round ``r + 1`` first shows up.
        """
        self.forward_calls += 1
        h = self.hidden(x)
        T = h.shape[1] - 1
        logical = self.logical_head(h[:, T].mean(dim=1))
        loss = self.loss_head(h[:, :T, : self.layout.n_data]).squeeze(-1).transpose(1, 2)
        return logical, loss

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
