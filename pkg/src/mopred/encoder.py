"""Scene encoder: multi-scale temporal tokenizer, polyline encoder,
cross-modal gating cascade, history recovery, and KNN local attention.

Token order throughout is [map tokens, agent tokens]; reference positions
(latest valid agent position, polyline center) drive both the positional
encoding and the K-nearest-neighbour attention masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigurationError
from .nn import LSTM, MLP, Conv1d, LayerNorm, Linear, Module, ModuleList, MultiheadAttention
from .scene import Scene, agent_history_features, map_features
from .tensor import Tensor


@dataclass
class SceneTokens:
    agent_tokens: Tensor  # (N_a, D)
    map_tokens: Tensor  # (N_l, D)
    agent_ref_pos: np.ndarray  # (N_a, 2) latest valid position per agent
    map_ref_pos: np.ndarray  # (N_l, 2) polyline centers


@dataclass
class RecoveredHistory:
    values: Tensor  # (N_a, T_p, 4): position xy + velocity xy per past step


def knn_neighbors(query_pos: np.ndarray, key_pos: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K nearest keys per query, sorted by distance,
    ties broken toward the lower index."""
    query_pos = np.asarray(query_pos, dtype=np.float64)
    key_pos = np.asarray(key_pos, dtype=np.float64)
    n_k = len(key_pos)
    if k < 1:
        raise ConfigurationError(f"knn needs K >= 1, got {k}")
    if k > n_k:
        raise ConfigurationError(f"knn K={k} exceeds key count {n_k}")
    diff = query_pos[:, None, :] - key_pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k]


def knn_mask(query_pos: np.ndarray, key_pos: np.ndarray, k: int) -> np.ndarray:
    idx = knn_neighbors(query_pos, key_pos, k)
    mask = np.zeros((len(query_pos), len(key_pos)), dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask


def sinusoidal_pe(pos: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sine/cosine encoding of 2-D positions; dim/2 channels per axis."""
    pos = np.asarray(pos, dtype=np.float64)
    if dim % 4 != 0:
        raise ConfigurationError(f"positional encoding width must be divisible by 4, got {dim}")
    per_axis = dim // 2
    n_freq = per_axis // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(n_freq) / per_axis))
    out = np.zeros((len(pos), dim))
    for axis in range(2):
        phase = pos[:, axis : axis + 1] * freqs[None, :]
        block = np.zeros((len(pos), per_axis))
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
        out[:, axis * per_axis : (axis + 1) * per_axis] = block
    return out


def sinusoidal_pe_tensor(pos: Tensor, dim: int) -> Tensor:
    """Differentiable variant for positions that depend on parameters
    (the decoder's evolving anchors)."""
    if dim % 4 != 0:
        raise ConfigurationError(f"positional encoding width must be divisible by 4, got {dim}")
    per_axis = dim // 2
    n_freq = per_axis // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(n_freq) / per_axis))
    blocks = []
    for axis in range(2):
        phase = T.mul(pos[:, axis : axis + 1], T.constant(freqs[None, :]))
        n = phase.shape[0]
        sin = T.reshape(T.sin(phase), (n, n_freq, 1))
        cosv = T.reshape(T.cos(phase), (n, n_freq, 1))
        interleaved = T.reshape(T.concat([sin, cosv], axis=2), (n, per_axis))
        blocks.append(interleaved)
    return T.concat(blocks, axis=1)


class MultiScaleLSTM(Module):
    """Parallel 1-D convolutions (k = 1, 3, 5) each feeding a two-layer LSTM;
    final states are concatenated and projected to the token width."""

    KERNELS = (1, 3, 5)

    def __init__(self, in_channels: int, dim: int, rng: np.random.Generator):
        super().__init__()
        branch = dim // 4
        self.convs = ModuleList(Conv1d(in_channels, branch, k, rng) for k in self.KERNELS)
        self.lstms = ModuleList(LSTM(branch, branch, 2, rng) for _ in self.KERNELS)
        self.out = Linear(3 * branch, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        lasts = []
        for conv, lstm in zip(self.convs, self.lstms):
            feats = conv(x)
            _, last = lstm(feats)
            lasts.append(last)
        return T.relu(self.out(T.concat(lasts, axis=-1)))


class PolylineEncoder(Module):
    """Shared per-point MLP followed by a masked max-pool over points."""

    def __init__(self, in_features: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.mlp = MLP([in_features, dim, dim], rng, final_activation=True)

    def __call__(self, points: Tensor, point_valid: np.ndarray) -> Tensor:
        feats = self.mlp(points)  # (N_l, N_p, D)
        return T.max_pool(feats, axis=1, mask=point_valid)


class ContextGate(Module):
    """Two-set cross-modal gating: each set is modulated by a sigmoid gate
    computed from the max-pooled context of the other set, with a residual."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.ctx_x = Linear(dim, dim, rng)  # pooled context computed from y, applied to x
        self.val_x = Linear(dim, dim, rng)
        self.gate_x = Linear(dim, dim, rng)
        self.ctx_y = Linear(dim, dim, rng)
        self.val_y = Linear(dim, dim, rng)
        self.gate_y = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        cy = T.max_pool(self.ctx_x(y), axis=0)
        cx = T.max_pool(self.ctx_y(x), axis=0)
        x_out = T.add(x, T.mul(self.val_x(x), T.sigmoid(self.gate_x(cy))))
        y_out = T.add(y, T.mul(self.val_y(y), T.sigmoid(self.gate_y(cx))))
        return x_out, y_out


class GatingCascade(Module):
    """Three-stage fusion: (agent, rel) -> (map, rel') -> (agent', map');
    the fused map tokens are map' + rel''."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.ar = ContextGate(dim, rng)
        self.mr = ContextGate(dim, rng)
        self.am = ContextGate(dim, rng)
        self.last_call_order: list[tuple[str, str]] = []

    def __call__(self, a1: Tensor, r1: Tensor, m1: Tensor) -> tuple[Tensor, Tensor]:
        if m1.shape[0] != r1.shape[0]:
            raise AlignmentError(
                f"map tokens ({m1.shape[0]}) and relative-movement tokens "
                f"({r1.shape[0]}) must be polyline-aligned"
            )
        self.last_call_order = []
        self.last_call_order.append(("A", "R"))
        a2, r2 = self.ar(a1, r1)
        self.last_call_order.append(("M", "R"))
        m2, r3 = self.mr(m1, r2)
        self.last_call_order.append(("A", "M"))
        a3, m3 = self.am(a2, m2)
        return a3, T.add(m3, r3)


class LocalAttentionLayer(Module):
    """Pre-softmax KNN-restricted multi-head attention plus a feed-forward
    sublayer, both with residual connections and layer norm.

    Positional encodings of the token reference positions are added to
    queries and keys only, never to values.  ``query_offset`` restricts the
    querying rows to a suffix of the token set (the recovery pass queries
    agents only); other rows pass through untouched.
    """

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.mha = MultiheadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_hidden, dim], rng)

    def __call__(
        self,
        tokens: Tensor,
        positions: np.ndarray,
        k: int,
        query_offset: int = 0,
        pe: np.ndarray | None = None,
        mask: np.ndarray | None = None,
    ) -> Tensor:
        n = tokens.shape[0]
        queries = tokens if query_offset == 0 else tokens[query_offset:]
        if pe is None:
            pe = sinusoidal_pe(positions, tokens.shape[1])
        if mask is None:
            mask = knn_mask(positions[query_offset:], positions, k)
        pe_all = T.constant(pe)
        pe_q = T.constant(pe[query_offset:])
        attended = self.mha(queries, tokens, tokens, mask=mask, pe_q=pe_q, pe_k=pe_all)
        h = self.norm1(T.add(queries, attended))
        h = self.norm2(T.add(h, self.ffn(h)))
        if query_offset == 0:
            return h
        return T.concat([tokens[:query_offset], h], axis=0)


class RecoveryModule(Module):
    """Reconstruct each agent's full past (position + velocity per step)
    from one pass of local attention, then fold the reconstruction back
    into the agent tokens through a residual delta.

    The residual uses the *original* tokens: zeroing ``agg_out`` leaves the
    agent tokens bitwise unchanged while the reconstruction is still
    produced for supervision.
    """

    def __init__(self, dim: int, heads: int, t_past: int, rng: np.random.Generator,
                 hidden: int = 0):
        super().__init__()
        self.t_past = t_past
        self.attn = LocalAttentionLayer(dim, heads, ffn_hidden=dim // 2, rng=rng)
        if hidden > 0:
            self.to_past = MLP([dim, hidden, t_past * 4], rng)
        else:
            self.to_past = Linear(dim, t_past * 4, rng)
        self.point_mlp = Linear(4, dim, rng)
        self.agg_out = Linear(dim, dim, rng)

    def __call__(self, tokens: SceneTokens, k: int) -> tuple[SceneTokens, RecoveredHistory]:
        n_map = tokens.map_tokens.shape[0]
        n_agents = tokens.agent_tokens.shape[0]
        stacked = T.concat([tokens.map_tokens, tokens.agent_tokens], axis=0)
        positions = np.concatenate([tokens.map_ref_pos, tokens.agent_ref_pos], axis=0)
        k_eff = min(k, n_map + n_agents)
        attended = self.attn(stacked, positions, k_eff, query_offset=n_map)
        agent_ctx = attended[n_map:]
        raw = T.reshape(self.to_past(agent_ctx), (n_agents, self.t_past, 4))
        # positions are predicted as offsets from each agent's latest valid
        # position; keeps the regression centered regardless of scene extent
        ref = np.zeros((n_agents, self.t_past, 4))
        ref[:, :, :2] = tokens.agent_ref_pos[:, None, :]
        past = T.add(raw, T.constant(ref))
        point_feats = T.relu(self.point_mlp(raw))
        pooled = T.max_pool(point_feats, axis=1)
        delta = self.agg_out(pooled)
        new_agents = T.add(tokens.agent_tokens, delta)
        out = SceneTokens(
            agent_tokens=new_agents,
            map_tokens=tokens.map_tokens,
            agent_ref_pos=tokens.agent_ref_pos,
            map_ref_pos=tokens.map_ref_pos,
        )
        return out, RecoveredHistory(values=past)


class _TemporalTokenizers(Module):
    """Bundles the two multi-scale LSTMs under the ``msl.`` namespace."""

    def __init__(self, agent_features: int, rel_features: int, dim: int, rng):
        super().__init__()
        self.agent = MultiScaleLSTM(agent_features, dim, rng)
        self.rel = MultiScaleLSTM(rel_features, dim, rng)


class Encoder(Module):
    """Full scene encoder.

    Pipeline: multi-scale LSTM over agent histories and relative movements,
    PointNet-style polyline encoding, gating cascade (or plain concatenation
    when scene tokenization is ablated), one recovery pass, then four local
    attention layers over the joint token set.
    """

    def __init__(
        self,
        agent_features: int,
        rel_features: int,
        map_point_features: int,
        dim: int,
        heads: int,
        t_past: int,
        rng: np.random.Generator,
        use_recovery: bool = True,
        use_scene_tokenization: bool = True,
        attention_layers: int = 4,
        ffn_hidden: int | None = None,
        recovery_hidden: int = 0,
    ):
        super().__init__()
        ffn_hidden = ffn_hidden or 4 * dim
        self.msl = _TemporalTokenizers(agent_features, rel_features, dim, rng)
        self.poly = PolylineEncoder(map_point_features, dim, rng)
        self.use_scene_tokenization = use_scene_tokenization
        if use_scene_tokenization:
            self.mcg = GatingCascade(dim, rng)
        else:
            self.fuse = Linear(2 * dim, dim, rng)
        self.use_recovery = use_recovery
        if use_recovery:
            self.recovery = RecoveryModule(dim, heads, t_past, rng, hidden=recovery_hidden)
        self.attn = ModuleList(
            LocalAttentionLayer(dim, heads, ffn_hidden, rng) for _ in range(attention_layers)
        )
        self.last_attention_calls: list[str] = []

    def __call__(
        self,
        agent_feats: Tensor,
        rel_feats: Tensor,
        map_feats: Tensor,
        map_point_valid: np.ndarray,
        agent_ref_pos: np.ndarray,
        map_ref_pos: np.ndarray,
        k: int,
    ) -> tuple[SceneTokens, RecoveredHistory | None]:
        self.last_attention_calls = []
        a1 = self.msl.agent(agent_feats)
        r1 = self.msl.rel(rel_feats)
        m1 = self.poly(map_feats, map_point_valid)
        if self.use_scene_tokenization:
            agent_tokens, map_tokens = self.mcg(a1, r1, m1)
        else:
            agent_tokens = a1
            map_tokens = self.fuse(T.concat([m1, r1], axis=1))
        tokens = SceneTokens(
            agent_tokens=agent_tokens,
            map_tokens=map_tokens,
            agent_ref_pos=agent_ref_pos,
            map_ref_pos=map_ref_pos,
        )
        recovered = None
        if self.use_recovery:
            tokens, recovered = self.recovery(tokens, k)
            self.last_attention_calls.append("recovery")
        n_map = tokens.map_tokens.shape[0]
        stacked = T.concat([tokens.map_tokens, tokens.agent_tokens], axis=0)
        positions = np.concatenate([tokens.map_ref_pos, tokens.agent_ref_pos], axis=0)
        k_eff = min(k, stacked.shape[0])
        # positions are fixed across the stack, so PE and the KNN mask are too
        pe = sinusoidal_pe(positions, stacked.shape[1])
        mask = knn_mask(positions, positions, k_eff)
        for i, layer in enumerate(self.attn):
            stacked = layer(stacked, positions, k_eff, pe=pe, mask=mask)
            self.last_attention_calls.append(f"attn.{i}")
        final = SceneTokens(
            agent_tokens=stacked[n_map:],
            map_tokens=stacked[:n_map],
            agent_ref_pos=tokens.agent_ref_pos,
            map_ref_pos=tokens.map_ref_pos,
        )
        return final, recovered


def scene_encoder_inputs(scene: Scene, rel_values: np.ndarray):
    """Assemble the numpy inputs the encoder consumes from a masked,
    agent-centric scene."""
    agent_feats = agent_history_features(scene)
    mfeats, mvalid = map_features(scene)
    agent_ref = np.zeros((scene.n_agents, 2))
    for i, track in enumerate(scene.agents):
        latest = track.latest_valid_index()
        if latest is not None:
            agent_ref[i] = track.positions[latest]
    map_ref = np.stack([p.center() for p in scene.polylines])
    return agent_feats, rel_values, mfeats, mvalid, agent_ref, map_ref
