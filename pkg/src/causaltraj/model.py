"""Full forecaster: temporal encoder, relation stack, scene head, rollout.

The model consumes joint scenes ``positions [B, N, T, 2]`` with a fixed agent
roster and emits, for every frame t, the parameters of a joint mixture
density over the next displacement of all agents. Training runs teacher
forced over the future frames; inference extends the scene autoregressively,
sampling one mixture component per scene per step (shared by all agents, so
joint modes stay coherent).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import mdn
from . import tensor as T
from .encoders import PointNetEncoder, SSMEncoder
from .errors import ConfigError, ShapeError, TrajectoryFormatError
from .nn import Dense, EmbeddingTable, MLP, Module
from .relation import RelationEncoder
from .tensor import Tensor

NUM_CATEGORIES = 3  # ball, team_a, team_b

CHECKPOINT_MAGIC = b"CTCKPT1"


@dataclass
class ModelConfig:
    num_agents: int = 11
    num_components: int = 8
    context_frames: int = 10
    future_frames: int = 20
    temporal: str = "pointnet"            # "pointnet" | "ssm"
    temporal_hidden: int = 64
    temporal_dim: int = 64
    relation_dim: int = 128
    attn_heads: int = 8
    std_blocks: int = 4
    mesh_blocks: int = 4
    std_ff: int = 512
    mesh_ff: int = 256
    use_mesh: bool = True
    category_dim: int = 64
    agent_channels: int = 64
    scene_hidden: tuple = (768, 768, 448)
    ssm_blocks: int = 2
    ssm_state: int = 16
    ssm_expand: int = 2
    ssm_headdim: int = 64
    ssm_conv: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.temporal not in ("pointnet", "ssm"):
            raise ConfigError(f"unknown temporal encoder {self.temporal!r}")
        if self.num_components < 1:
            raise ConfigError("num_components must be >= 1")
        if self.context_frames < 2:
            raise ConfigError("context_frames must be >= 2")
        if self.future_frames < 1:
            raise ConfigError("future_frames must be >= 1")
        if self.relation_dim % self.attn_heads != 0:
            raise ConfigError(
                f"relation_dim {self.relation_dim} not divisible by heads {self.attn_heads}"
            )
        self.scene_hidden = tuple(int(h) for h in self.scene_hidden)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene_hidden"] = list(self.scene_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Reduced geometry for fast experiments and tests."""
        base = dict(
            num_agents=5,
            num_components=4,
            context_frames=8,
            future_frames=16,
            temporal_hidden=32,
            temporal_dim=32,
            relation_dim=32,
            attn_heads=8,
            std_blocks=2,
            mesh_blocks=2,
            std_ff=128,
            mesh_ff=64,
            category_dim=16,
            agent_channels=32,
            scene_hidden=(128, 128),
            ssm_state=8,
            ssm_headdim=32,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ScenarioSample:
    """One sampled future for one context."""

    context_index: int
    scenario_index: int
    categories: np.ndarray       # [N] uint8
    context: np.ndarray          # [P, N, 2] float32
    positions: np.ndarray        # [F, N, 2] float32
    displacements: np.ndarray    # [F, N, 2] float32
    components: np.ndarray       # [F] int64


class TrajectoryModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        cfg = config
        if cfg.temporal == "pointnet":
            self.temporal = PointNetEncoder(
                rng, 4, hidden=cfg.temporal_hidden, out_dim=cfg.temporal_dim
            )
        else:
            self.temporal = SSMEncoder(
                rng,
                4,
                d_model=cfg.relation_dim,
                n_blocks=cfg.ssm_blocks,
                state=cfg.ssm_state,
                expand=cfg.ssm_expand,
                headdim=cfg.ssm_headdim,
                conv_width=cfg.ssm_conv,
            )
        self.latent_dim = self.temporal.out_dim
        self.category_embed = EmbeddingTable(rng, NUM_CATEGORIES, cfg.category_dim)
        self.relation_input = Dense(
            rng, self.latent_dim + cfg.category_dim, cfg.relation_dim, activation="gelu"
        )
        self.relation = RelationEncoder(
            rng,
            cfg.relation_dim,
            cfg.attn_heads,
            std_blocks=cfg.std_blocks,
            mesh_blocks=cfg.mesh_blocks,
            std_ff=cfg.std_ff,
            mesh_ff=cfg.mesh_ff,
            use_mesh=cfg.use_mesh,
        )
        self.agent_proj = Dense(
            rng, cfg.relation_dim + 4, cfg.agent_channels, activation="gelu"
        )
        scene_in = cfg.num_agents * cfg.agent_channels
        self.scene_mlp = MLP(rng, [scene_in, *cfg.scene_hidden], activate_last=True)
        head_out = cfg.num_components * (1 + cfg.num_agents * 5)
        self.head = Dense(rng, cfg.scene_hidden[-1], head_out)

    # -- shared pieces -------------------------------------------------------

    def _check_positions(self, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float32)
        if pos.ndim != 4 or pos.shape[-1] != 2:
            raise ShapeError(f"positions must be [B, N, T, 2], got {pos.shape}")
        if pos.shape[1] != self.config.num_agents:
            raise ShapeError(
                f"roster size {pos.shape[1]} != configured {self.config.num_agents}"
            )
        return pos

    def _categories(self, categories, batch: int) -> np.ndarray:
        cat = np.asarray(categories, dtype=np.int64)
        N = self.config.num_agents
        if cat.shape == (N,):
            cat = np.broadcast_to(cat, (batch, N))
        if cat.shape != (batch, N):
            raise ShapeError(f"categories shape {cat.shape} incompatible with [{batch}, {N}]")
        if cat.min() < 0 or cat.max() >= NUM_CATEGORIES:
            raise ShapeError("category indices must be in {0, 1, 2}")
        return cat

    @staticmethod
    def _velocities(pos: np.ndarray) -> np.ndarray:
        vel = np.zeros_like(pos)
        vel[:, :, 1:] = pos[:, :, 1:] - pos[:, :, :-1]
        return vel

    def _head_params(self, lat: Tensor, pos_tn: np.ndarray, vel_tn: np.ndarray, cat: np.ndarray):
        """Mixture parameters from latents and frame geometry.

        lat [B, T, N, d_latent]; pos_tn, vel_tn [B, T, N, 2];
        cat [B, N]. Returns (logits [B,T,M], means [B,T,M,N,2],
        chol_params [B,T,M,N,3]).
        """
        cfg = self.config
        B, Tlen, N, _ = lat.shape
        M = cfg.num_components
        ce = self.category_embed(cat)                                    # [B, N, cd]
        ce = T.broadcast_to(
            T.reshape(ce, (B, 1, N, cfg.category_dim)), (B, Tlen, N, cfg.category_dim)
        )
        h = self.relation_input(T.concat([lat, ce], axis=-1))
        h = self.relation(h, pos_tn, vel_tn)
        geo = Tensor(np.concatenate([pos_tn, vel_tn], axis=-1).astype(np.float32))
        a = self.agent_proj(T.concat([h, geo], axis=-1))                 # [B, T, N, ac]
        flat = T.reshape(a, (B, Tlen, N * cfg.agent_channels))
        out = self.head(self.scene_mlp(flat))                            # [B, T, M + M*N*5]
        logits = T.narrow(out, -1, 0, M)
        rest = T.reshape(T.narrow(out, -1, M, M * N * 5), (B, Tlen, M, N, 5))
        means = T.narrow(rest, -1, 0, 2)
        chols = T.narrow(rest, -1, 2, 3)
        return logits, means, chols

    # -- teacher-forced paths ---------------------------------------------------

    def forward(self, positions, categories):
        """Mixture parameters for every input frame."""
        pos = self._check_positions(positions)
        B, N, Tlen, _ = pos.shape
        cat = self._categories(categories, B)
        vel = self._velocities(pos)
        feats = np.concatenate([pos, vel], axis=-1)                      # [B, N, T, 4]
        lat = self.temporal(Tensor(feats.reshape(B * N, Tlen, 4)))
        lat = T.transpose(T.reshape(lat, (B, N, Tlen, self.latent_dim)), (0, 2, 1, 3))
        pos_tn = np.ascontiguousarray(pos.transpose(0, 2, 1, 3))
        vel_tn = np.ascontiguousarray(vel.transpose(0, 2, 1, 3))
        return self._head_params(lat, pos_tn, vel_tn, cat)

    def _sliced_params(self, positions, categories):
        pos = self._check_positions(positions)
        P = self.config.context_frames
        Tlen = pos.shape[2]
        F = Tlen - P
        if F < 1:
            raise ShapeError(f"need at least one future frame beyond P={P}, got T={Tlen}")
        logits, means, chols = self.forward(pos, categories)
        lg = T.narrow(logits, 1, P - 1, F)
        mn = T.narrow(means, 1, P - 1, F)
        ch = T.narrow(chols, 1, P - 1, F)
        targets = np.ascontiguousarray(
            (pos[:, :, P:] - pos[:, :, P - 1: Tlen - 1]).transpose(0, 2, 1, 3)
        )
        return lg, mn, ch, Tensor(targets)

    def loss(self, positions, categories, entropy_weight: float = mdn.ENTROPY_WEIGHT):
        """Teacher-forced objective over the future frames; (Tensor, stats)."""
        lg, mn, ch, targets = self._sliced_params(positions, categories)
        return mdn.sequence_loss(lg, mn, ch, targets, entropy_weight=entropy_weight)

    def per_step_nll(self, positions, categories) -> np.ndarray:
        """Per-future-frame NLL terms, shape [B, F]; no graph is kept."""
        with T.no_grad():
            lg, mn, ch, targets = self._sliced_params(positions, categories)
            return mdn.step_nll(lg, mn, ch, targets).data

    # -- autoregressive rollout -----------------------------------------------------

    def rollout(
        self,
        contexts,
        categories,
        horizon: int | None = None,
        num_scenarios: int = 1,
        seed: int = 0,
        mode: str = "sample",
        incremental: bool = True,
    ) -> list[ScenarioSample]:
        """Sample futures for each context scene.

        contexts [C, N, P, 2]; returns C * num_scenarios samples ordered by
        context then scenario. Each scenario consumes its own RNG substream,
        so results are independent of batching and of the other scenarios.
        One component index is drawn per scene per step and shared by all
        agents. ``mode="mean"`` instead takes the highest-weight component's
        mean displacement, deterministically.
        """
        cfg = self.config
        if mode not in ("sample", "mean"):
            raise ConfigError(f"unknown rollout mode {mode!r}")
        if horizon is None:
            horizon = cfg.future_frames
        ctx = np.asarray(contexts, dtype=np.float32)
        if ctx.ndim != 4 or ctx.shape[-1] != 2 or ctx.shape[1] != cfg.num_agents:
            raise ShapeError(f"contexts must be [C, N, P, 2], got {ctx.shape}")
        C, N, P, _ = ctx.shape
        if P < 2:
            raise ShapeError("rollout needs at least 2 context frames")
        k = int(num_scenarios)
        B = C * k
        pos = np.repeat(ctx, k, axis=0)                                   # [B, N, P, 2]
        cat = self._categories(categories if np.asarray(categories).ndim == 1
                               else np.repeat(np.asarray(categories), k, axis=0), B)

        rngs = [
            np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b // k, b % k)))
            for b in range(B)
        ]

        state = self.temporal.init_state(B * N) if incremental else None
        vel = self._velocities(pos)
        if incremental:
            lat_t = None
            for t in range(P):
                f_t = np.concatenate([pos[:, :, t], vel[:, :, t]], axis=-1)
                lat_t = self.temporal.step(f_t.reshape(B * N, 4).astype(np.float32), state)

        cur = pos[:, :, P - 1].copy()                                     # [B, N, 2]
        vel_cur = vel[:, :, P - 1].copy()
        hist = [pos[:, :, t] for t in range(P)]
        out_pos = np.empty((B, horizon, N, 2), dtype=np.float32)
        out_disp = np.empty((B, horizon, N, 2), dtype=np.float32)
        out_comp = np.empty((B, horizon), dtype=np.int64)

        M = cfg.num_components
        for u in range(horizon):
            if u > 0:
                f_t = np.concatenate([cur, vel_cur], axis=-1).astype(np.float32)
                if incremental:
                    lat_t = self.temporal.step(f_t.reshape(B * N, 4), state)
            if not incremental:
                seq = np.stack(hist, axis=2)                              # [B, N, t, 2]
                v_all = self._velocities(seq)
                feats = np.concatenate([seq, v_all], axis=-1)
                with T.no_grad():
                    lat_full = self.temporal(
                        Tensor(feats.reshape(B * N, seq.shape[2], 4))
                    )
                lat_t = lat_full.data[:, -1]
            with T.no_grad():
                logits, means, chols = self._head_params(
                    Tensor(lat_t.reshape(B, 1, N, self.latent_dim)),
                    cur[:, None], vel_cur[:, None], cat,
                )
            lg = logits.data[:, 0]
            mn = means.data[:, 0]
            ch = chols.data[:, 0]
            if mode == "mean":
                dx = mdn.mode_displacements(lg, mn)
                comp = np.argmax(lg, axis=-1)
            else:
                us = np.array([rngs[b].random() for b in range(B)])
                pi = mdn.mixture_weights(lg)
                comp = np.minimum((us[:, None] > np.cumsum(pi, axis=-1)).sum(-1), M - 1)
                eps = np.stack([rngs[b].standard_normal((N, 2)) for b in range(B)])
                L = mdn.chol_matrices(ch)
                Lm = np.take_along_axis(L, comp[:, None, None, None, None], axis=1)[:, 0]
                mu = np.take_along_axis(
                    mn.astype(np.float64), comp[:, None, None, None], axis=1
                )[:, 0]
                dx = (mu + np.einsum("bnij,bnj->bni", Lm, eps)).astype(np.float32)
            new_cur = cur + dx
            out_pos[:, u] = new_cur
            out_disp[:, u] = dx
            out_comp[:, u] = comp
            vel_cur = new_cur - cur
            cur = new_cur
            hist.append(new_cur)

        samples = []
        for b in range(B):
            ci, si = divmod(b, k)
            samples.append(
                ScenarioSample(
                    context_index=ci,
                    scenario_index=si,
                    categories=cat[b].astype(np.uint8),
                    context=np.ascontiguousarray(ctx[ci].transpose(1, 0, 2)),
                    positions=out_pos[b],
                    displacements=out_disp[b],
                    components=out_comp[b],
                )
            )
        return samples


def constant_velocity_rollout(contexts, horizon: int) -> np.ndarray:
    """Straight-line baseline: repeat the last observed displacement.

    contexts [C, N, P, 2] -> predictions [C, horizon, N, 2] (time-major).
    """
    ctx = np.asarray(contexts, dtype=np.float32)
    v = ctx[:, :, -1] - ctx[:, :, -2]                                     # [C, N, 2]
    steps = np.arange(1, horizon + 1, dtype=np.float32)
    pred = ctx[:, :, -1][:, None] + steps[None, :, None, None] * v[:, None]
    return pred


# -- checkpoint container ---------------------------------------------------------


def save_checkpoint(
    path,
    model: TrajectoryModel,
    extra: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Write model config, parameters, and optional extra arrays.

    Layout: magic, u32 JSON length, JSON {"format", "model", "extra"}, u32
    array count, then per array: u16 name length + name, u8 ndim, u32 dims,
    raw little-endian float32 data. Parameter arrays are namespaced
    ``param/``; extra arrays keep their given names.
    """
    meta = {"format": 1, "model": model.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays: dict[str, np.ndarray] = {
        f"param/{name}": arr for name, arr in model.state_arrays().items()
    }
    for name, arr in (extra_arrays or {}).items():
        arrays[name] = arr
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise TrajectoryFormatError("bad checkpoint magic", offset=0)
    off = len(CHECKPOINT_MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise TrajectoryFormatError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = raw[off: off + n]
        off += n
        return chunk

    (blob_len,) = struct.unpack("<I", take(4, "header length"))
    try:
        meta = json.loads(take(blob_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TrajectoryFormatError(f"bad checkpoint header: {e}", offset=off) from e
    if meta.get("format") != 1:
        raise TrajectoryFormatError(f"unsupported checkpoint format {meta.get('format')!r}")
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n_elems = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * n_elems, f"data for {name}"), dtype="<f4")
        arrays[name] = data.reshape(shape).astype(np.float32)
    if off != len(raw):
        raise TrajectoryFormatError("trailing bytes after last array", offset=off)
    return meta, arrays


def load_model(path) -> tuple[TrajectoryModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, extra, extra_arrays)."""
    meta, arrays = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model"])
    model = TrajectoryModel(config)
    params = {
        name[len("param/"):]: arr for name, arr in arrays.items() if name.startswith("param/")
    }
    rest = {name: arr for name, arr in arrays.items() if not name.startswith("param/")}
    model.load_state_arrays(params)
    return model, meta.get("extra", {}), rest
