"""Knowledge-enhanced denoising network and the volume estimator.

The denoiser keeps the gated residual-layer backbone common to audio
diffusion models but replaces the dilated convolution with a KGST block:
a one-layer relational graph convolution over the region subgraph (spatial),
a Transformer encoder layer over the horizon (temporal), and an attention
fusion whose query is the region's KG embedding. All modules operate on
(batch, regions, horizon, channels) tensors and are region-permutation
equivariant.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ukg import REGION_RELATIONS, RegionSubgraph

STEP_EMBED_DIM = 128


def step_embedding(n: float) -> np.ndarray:
    """128-dim sinusoidal code: sin(10^(4j/63) n) for j=0..63, then cosines.

    Computed in float64; every component lies in [-1, 1] and distinct steps
    map to distinct vectors at the default step counts.
    """
    if n < 0:
        raise ValueError("diffusion step must be >= 0")
    freqs = 10.0 ** (4.0 * np.arange(64, dtype=np.float64) / 63.0)
    angles = freqs * float(n)
    return np.concatenate([np.sin(angles), np.cos(angles)])


def step_embedding_table(num_steps: int) -> np.ndarray:
    """(num_steps + 1, 128) table indexed by the step value itself."""
    steps = np.arange(num_steps + 1, dtype=np.float64)[:, None]
    freqs = 10.0 ** (4.0 * np.arange(64, dtype=np.float64) / 63.0)[None, :]
    angles = steps * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def expand_volume(volume: torch.Tensor, horizon: int) -> torch.Tensor:
    """(L, C) per-region volume -> (L, horizon, C) guide, constant over time."""
    return volume.unsqueeze(-2).expand(*volume.shape[:-1], horizon, volume.shape[-1])


class VolumeEstimator(nn.Module):
    """Two affine maps with a leaky rectifier: region features -> flow volume."""

    def __init__(self, feature_dim: int, channels: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, conditions: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(conditions)))


class FeatureCondition(nn.Module):
    """Region features concatenated with the predicted volume, projected to d_h.

    Returns (L, 1, d_h) so the result broadcasts over batch and horizon when
    added inside residual layers. `use_volume=False` drops the volume input
    (the guide-free ablation); `kg_dim` optionally appends KG embeddings.
    """

    def __init__(self, feature_dim: int, channels: int, d_h: int,
                 use_volume: bool = True, kg_dim: int = 0):
        super().__init__()
        self.use_volume = use_volume
        self.kg_dim = kg_dim
        in_dim = feature_dim + (channels if use_volume else 0) + kg_dim
        self.fc1 = nn.Linear(in_dim, d_h)
        self.fc2 = nn.Linear(d_h, d_h)

    def forward(self, conditions: torch.Tensor, volume: torch.Tensor | None = None,
                e_kg: torch.Tensor | None = None) -> torch.Tensor:
        parts = [conditions]
        if self.use_volume:
            if volume is None:
                raise ValueError("condition module expects a predicted volume")
            parts.append(volume)
        if self.kg_dim:
            if e_kg is None:
                raise ValueError("condition module expects KG embeddings")
            parts.append(e_kg)
        h = torch.cat(parts, dim=-1)
        return self.fc2(F.relu(self.fc1(h))).unsqueeze(-2)


class WindowCondition(nn.Module):
    """Pointwise projection of a (history, zero-masked future) flow window."""

    def __init__(self, channels: int, d_h: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, d_h)
        self.fc2 = nn.Linear(d_h, d_h)

    def forward(self, masked_window: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(masked_window)))


class RGCNSpatial(nn.Module):
    """One-layer relational graph convolution over regions.

    out_l = relu(sum_r sum_{j in N_l^r} W_r h_j + W_0 h_l); neighbor sums are
    unnormalized by default (`degree_normalize` switches to per-relation means).
    """

    def __init__(self, d_h: int, num_relations: int = len(REGION_RELATIONS),
                 degree_normalize: bool = False):
        super().__init__()
        self.rel_kernels = nn.ModuleList(
            nn.Linear(d_h, d_h, bias=False) for _ in range(num_relations))
        self.self_kernel = nn.Linear(d_h, d_h, bias=False)
        self.degree_normalize = degree_normalize

    def forward(self, h: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        out = self.self_kernel(h)
        for r, kernel in enumerate(self.rel_kernels):
            adj = adjacency[r]
            if self.degree_normalize:
                deg = adj.sum(dim=1, keepdim=True).clamp(min=1.0)
                adj = adj / deg
            agg = torch.einsum("ij,...jtd->...itd", adj, h)
            out = out + kernel(agg)
        return F.relu(out)


def positional_encoding(horizon: int, d_h: int, dtype=torch.float32,
                        device=None) -> torch.Tensor:
    """Fixed sin/cos position table (horizon, d_h), interleaved pairs."""
    position = torch.arange(horizon, dtype=torch.float64)[:, None]
    half = torch.arange(0, d_h, 2, dtype=torch.float64)
    angles = position / torch.pow(10000.0, half / d_h)
    table = torch.zeros(horizon, d_h, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : d_h // 2])
    return table.to(dtype=dtype, device=device)


class TemporalBlock(nn.Module):
    """Pre-norm Transformer encoder layer along the horizon, per region.

    Self-attention alone is order-blind, so a fixed sinusoidal positional
    code is added to the input; `positional=False` restores the purely
    content-based variant (then identical time steps map to identical rows).
    """

    def __init__(self, d_h: int, heads: int = 4, ff_mult: int = 4,
                 positional: bool = True):
        super().__init__()
        self.positional = positional
        self.norm1 = nn.LayerNorm(d_h)
        self.attn = nn.MultiheadAttention(d_h, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_h)
        self.ff = nn.Sequential(nn.Linear(d_h, ff_mult * d_h), nn.ReLU(),
                                nn.Linear(ff_mult * d_h, d_h))

    def forward(self, h: torch.Tensor, return_attn: bool = False):
        *lead, horizon, d_h = h.shape
        flat = h.reshape(-1, horizon, d_h)
        if self.positional:
            flat = flat + positional_encoding(horizon, d_h, dtype=flat.dtype,
                                              device=flat.device)
        x = self.norm1(flat)
        attn_out, weights = self.attn(x, x, x, need_weights=return_attn)
        y = flat + attn_out
        y = y + self.ff(self.norm2(y))
        out = y.reshape(*lead, horizon, d_h)
        if return_attn:
            return out, weights.reshape(*lead, horizon, horizon)
        return out


class KGSTFusion(nn.Module):
    """Attention over the {spatial, temporal} branches, queried by E_KG.

    The key of each branch is mean-pooled over the horizon so one weight pair
    is produced per region; weights are a two-way softmax and sum to one.
    """

    def __init__(self, d_kg: int, d_h: int):
        super().__init__()
        self.w_q = nn.Linear(d_kg, d_h, bias=False)
        self.w_k = nn.Linear(d_h, d_h, bias=False)
        self.w_v = nn.Linear(d_h, d_h, bias=False)
        self.w_o = nn.Linear(d_h, d_h, bias=False)
        self.d_h = d_h

    def forward(self, h_spatial: torch.Tensor, h_temporal: torch.Tensor,
                e_kg: torch.Tensor, return_weights: bool = False):
        q = self.w_q(e_kg)                                  # (L, d_h)
        scale = 1.0 / math.sqrt(self.d_h)
        logits = torch.stack(
            [(q * self.w_k(h).mean(dim=-2)).sum(-1) * scale
             for h in (h_spatial, h_temporal)], dim=-1)      # (..., L, 2)
        alpha = torch.softmax(logits, dim=-1)
        fused = (alpha[..., 0:1].unsqueeze(-2) * self.w_v(h_spatial)
                 + alpha[..., 1:2].unsqueeze(-2) * self.w_v(h_temporal))
        out = self.w_o(fused)
        if return_weights:
            return out, alpha
        return out


class KGSTBlock(nn.Module):
    """Spatial + temporal branches fused by KG-queried attention.

    With `spatial_fusion=False` only the temporal branch runs (the KGST
    ablation), leaving the subgraph and KG embeddings unused.
    """

    def __init__(self, d_kg: int, d_h: int, heads: int = 4,
                 degree_normalize: bool = False, spatial_fusion: bool = True,
                 positional: bool = True):
        super().__init__()
        self.spatial_fusion = spatial_fusion
        self.temporal = TemporalBlock(d_h, heads, positional=positional)
        if spatial_fusion:
            self.spatial = RGCNSpatial(d_h, degree_normalize=degree_normalize)
            self.fusion = KGSTFusion(d_kg, d_h)

    def forward(self, h: torch.Tensor, e_kg: torch.Tensor,
                adjacency: torch.Tensor) -> torch.Tensor:
        h_t = self.temporal(h)
        if not self.spatial_fusion:
            return h_t
        h_s = self.spatial(h, adjacency)
        return self.fusion(h_s, h_t, e_kg)


class ResidualLayer(nn.Module):
    def __init__(self, d_kg: int, d_h: int, step_dim: int, heads: int = 4,
                 degree_normalize: bool = False, spatial_fusion: bool = True,
                 positional: bool = True):
        super().__init__()
        self.step_proj = nn.Linear(step_dim, d_h)
        self.kgst = KGSTBlock(d_kg, d_h, heads, degree_normalize, spatial_fusion,
                              positional)
        self.gate_proj = nn.Linear(d_h, 2 * d_h)
        self.out_proj = nn.Linear(d_h, 2 * d_h)

    def forward(self, x, step_emb, cond, e_kg, adjacency):
        h = x + self.step_proj(step_emb)[:, None, None, :]
        h = self.kgst(h, e_kg, adjacency)
        h = h + cond
        gate_a, gate_b = self.gate_proj(h).chunk(2, dim=-1)
        z = torch.tanh(gate_a) * torch.sigmoid(gate_b)
        residual, skip = self.out_proj(z).chunk(2, dim=-1)
        return (x + residual) / math.sqrt(2.0), skip


class DenoiserNet(nn.Module):
    """Noise predictor eps_hat(x_n, n, E_KG, Cond) over region-hour tensors.

    forward() takes x of shape (batch, regions, horizon, channels), integer
    steps n (scalar or per-sample), region KG embeddings (regions, d_kg), a
    condition tensor broadcastable to (batch, regions, horizon, d_h) and the
    dense (relations, regions, regions) adjacency of the region subgraph.
    The output head's last kernel starts at zero so training begins from
    eps_hat = 0.
    """

    def __init__(self, channels: int, d_kg: int, num_steps: int,
                 d_h: int = 64, num_layers: int = 5, heads: int = 4,
                 step_mlp_dim: int = 512, degree_normalize: bool = False,
                 spatial_fusion: bool = True, positional: bool = True):
        super().__init__()
        self.channels = channels
        self.d_h = d_h
        self.num_steps = num_steps
        table = torch.as_tensor(step_embedding_table(num_steps), dtype=torch.float32)
        self.register_buffer("step_table", table, persistent=False)
        self.step_mlp = nn.Sequential(
            nn.Linear(STEP_EMBED_DIM, step_mlp_dim), nn.SiLU(),
            nn.Linear(step_mlp_dim, step_mlp_dim), nn.SiLU())
        self.input_proj = nn.Linear(channels, d_h)
        self.layers = nn.ModuleList(
            ResidualLayer(d_kg, d_h, step_mlp_dim, heads, degree_normalize,
                          spatial_fusion, positional)
            for _ in range(num_layers))
        self.head1 = nn.Linear(d_h, d_h)
        self.head2 = nn.Linear(d_h, channels)
        nn.init.zeros_(self.head2.weight)
        nn.init.zeros_(self.head2.bias)

    def forward(self, x: torch.Tensor, n, e_kg: torch.Tensor,
                cond: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in denoiser input")
        if isinstance(n, int):
            n = torch.full((x.shape[0],), n, dtype=torch.long)
        step_emb = self.step_mlp(self.step_table[n])
        h = F.relu(self.input_proj(x))
        skip_sum = 0.0
        for layer in self.layers:
            h, skip = layer(h, step_emb, cond, e_kg, adjacency)
            skip_sum = skip_sum + skip
        y = skip_sum / math.sqrt(len(self.layers))
        return self.head2(F.relu(self.head1(y)))


def dense_adjacency(subgraph: RegionSubgraph, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(subgraph.to_dense(), dtype=dtype)
