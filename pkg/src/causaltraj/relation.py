"""Per-timestep agent interaction blocks.

All attention here runs across the agent axis within a single frame; no
block mixes information across time, which keeps the full model causal by
construction. Layout is [B, T, N, d] throughout.

Two block types:

* ``AgentAttentionBlock``: pre-norm transformer block, self-attention over
  agents.
* ``PairMeshBlock``: attention whose keys and values are projected from a
  per-frame pairwise mesh. Row (q, k) of the mesh stacks the position and
  velocity differences between agents q and k with both agents' hidden
  vectors, so edge geometry conditions the message weights directly.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import MLP, Dense, LayerNorm, Module
from .tensor import Tensor


def pair_geometry(pos: np.ndarray, vel: np.ndarray) -> Tensor:
    """Pairwise [B, T, N, N, 4] tensor of position and velocity differences."""
    pd = pos[:, :, :, None, :] - pos[:, :, None, :, :]
    vd = vel[:, :, :, None, :] - vel[:, :, None, :, :]
    return Tensor(np.concatenate([pd, vd], axis=-1).astype(np.float32))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, Tlen, N, d = x.shape
    hd = d // heads
    x = T.reshape(x, (B, Tlen, N, heads, hd))
    return T.transpose(x, (0, 1, 3, 2, 4))          # [B, T, H, N, hd]


def _merge_heads(x: Tensor) -> Tensor:
    B, Tlen, H, N, hd = x.shape
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (B, Tlen, N, H * hd))


class AgentAttentionBlock(Module):
    """Pre-norm self-attention over agents plus a two-layer feedforward."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ff_dim: int):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.q_proj = Dense(rng, dim, dim)
        self.k_proj = Dense(rng, dim, dim)
        self.v_proj = Dense(rng, dim, dim)
        self.out_proj = Dense(rng, dim, dim)
        self.ff = MLP(rng, [dim, ff_dim, dim], activate_last=False)

    def __call__(self, h: Tensor, geo: Tensor) -> Tensor:
        z = self.norm1(h)
        q = _split_heads(self.q_proj(z), self.heads)
        k = _split_heads(self.k_proj(z), self.heads)
        v = _split_heads(self.v_proj(z), self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = T.matmul(q, T.transpose(k, (0, 1, 2, 4, 3))) * scale
        attn = T.softmax_lastdim(scores)
        out = _merge_heads(T.matmul(attn, v))
        h = h + self.out_proj(out)
        return h + self.ff(self.norm2(h))


class PairMeshBlock(Module):
    """Attention with keys and values drawn from the pairwise mesh rows."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ff_dim: int):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        mesh_dim = 2 * dim + 4
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.q_proj = Dense(rng, dim, dim)
        self.k_proj = Dense(rng, mesh_dim, dim)
        self.v_proj = Dense(rng, mesh_dim, dim)
        self.out_proj = Dense(rng, dim, dim)
        self.ff = MLP(rng, [dim, ff_dim, dim], activate_last=False)

    def __call__(self, h: Tensor, geo: Tensor) -> Tensor:
        B, Tlen, N, d = h.shape
        z = self.norm1(h)
        zq = T.broadcast_to(T.reshape(z, (B, Tlen, N, 1, d)), (B, Tlen, N, N, d))
        zk = T.broadcast_to(T.reshape(z, (B, Tlen, 1, N, d)), (B, Tlen, N, N, d))
        mesh = T.concat([geo, zq, zk], axis=-1)       # [B, T, N, N, 2d+4]

        hd = d // self.heads
        q = _split_heads(self.q_proj(z), self.heads)  # [B, T, H, N, hd]
        k = self._mesh_heads(self.k_proj(mesh))       # [B, T, H, N, N, hd]
        v = self._mesh_heads(self.v_proj(mesh))
        qb = T.broadcast_to(
            T.reshape(q, (B, Tlen, self.heads, N, 1, hd)), k.shape
        )
        scores = (qb * k).sum(axis=-1) * (1.0 / math.sqrt(hd))   # [B, T, H, N, N]
        attn = T.softmax_lastdim(scores)
        ab = T.broadcast_to(
            T.reshape(attn, (B, Tlen, self.heads, N, N, 1)), v.shape
        )
        out = _merge_heads((ab * v).sum(axis=-2))
        h = h + self.out_proj(out)
        return h + self.ff(self.norm2(h))

    def _mesh_heads(self, x: Tensor) -> Tensor:
        B, Tlen, N, N2, d = x.shape
        hd = d // self.heads
        x = T.reshape(x, (B, Tlen, N, N2, self.heads, hd))
        return T.transpose(x, (0, 1, 4, 2, 3, 5))


class RelationEncoder(Module):
    """Standard agent-attention blocks followed by pair-mesh blocks.

    With ``use_mesh=False`` the second group is replaced by plain
    agent-attention blocks of the same count and feedforward width, so the
    two variants differ only in how the second half conditions on geometry.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        heads: int,
        std_blocks: int = 4,
        mesh_blocks: int = 4,
        std_ff: int = 512,
        mesh_ff: int = 256,
        use_mesh: bool = True,
    ):
        first = [AgentAttentionBlock(rng, dim, heads, std_ff) for _ in range(std_blocks)]
        if use_mesh:
            second = [PairMeshBlock(rng, dim, heads, mesh_ff) for _ in range(mesh_blocks)]
        else:
            second = [AgentAttentionBlock(rng, dim, heads, mesh_ff) for _ in range(mesh_blocks)]
        self.blocks = first + second

    def __call__(self, h: Tensor, pos: np.ndarray, vel: np.ndarray) -> Tensor:
        geo = pair_geometry(pos, vel)
        for block in self.blocks:
            h = block(h, geo)
        return h
