"""Anchor-based multimodal decoder.

Query latents are seeded from positional encodings of intention anchors
(k-means centroids of training-set future endpoints).  Each of six layers
runs self-attention among queries, cross-attention to agent tokens,
KNN-restricted cross-attention to map tokens around each query's current
anchor, and a feed-forward block, then emits a Gaussian-mixture trajectory
head.  Anchors evolve after the second and fourth layers (replaced by the
predicted endpoints); target assignment keeps anchors distinct by
suppressing near-duplicate endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import SceneTokens, knn_mask, sinusoidal_pe, sinusoidal_pe_tensor
from .errors import ConfigurationError
from .nn import MLP, Buffer, LayerNorm, Linear, Module, ModuleList, MultiheadAttention
from .tensor import Tensor


@dataclass
class AnchorSet:
    points: np.ndarray  # (K_modes, 2) intention endpoints, agent-centric


@dataclass
class PredictionSet:
    trajectories: np.ndarray  # (K, T_f, 2) mean positions
    gmm_params: np.ndarray  # (K, T_f, 5): mu_x, mu_y, sigma_x, sigma_y, rho
    confidences: np.ndarray  # (K,) softmax probabilities

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1, :]


@dataclass
class LayerOutput:
    """Differentiable per-layer head outputs (training consumes these)."""

    gmm: Tensor  # (K, T_f, 5)
    conf_logits: Tensor  # (K,)
    endpoint: Tensor  # (K, 2), the mu at the final step

    @property
    def endpoints_np(self) -> np.ndarray:
        return self.endpoint.data

    @property
    def confidences_np(self) -> np.ndarray:
        logits = self.conf_logits.data
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def to_prediction_set(self) -> PredictionSet:
        params = self.gmm.data.copy()
        return PredictionSet(
            trajectories=params[:, :, :2].copy(),
            gmm_params=params,
            confidences=self.confidences_np,
        )


@dataclass
class DecodeResult:
    layers: list[LayerOutput]
    dense_future: Tensor  # (N_a, T_f, 2)
    layer_anchor_centers: list[np.ndarray]  # anchors used for map collection per layer


def init_anchors(endpoints: np.ndarray, k_modes: int, seed: int, iterations: int = 50) -> AnchorSet:
    """K-means over ground-truth future endpoints.

    Farthest-point seeding after a seeded random first pick, then a fixed
    number of Lloyd iterations; empty clusters keep their previous center.
    """
    pts = np.asarray(endpoints, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ConfigurationError(f"endpoints must be (N, 2), got {pts.shape}")
    n = len(pts)
    if n < k_modes:
        raise ConfigurationError(f"need at least {k_modes} endpoints, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.zeros((k_modes, 2))
    centers[0] = pts[int(rng.integers(n))]
    min_d = np.linalg.norm(pts - centers[0], axis=1)
    for c in range(1, k_modes):
        centers[c] = pts[int(np.argmax(min_d))]
        min_d = np.minimum(min_d, np.linalg.norm(pts - centers[c], axis=1))
    for _ in range(iterations):
        dists = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
        assign = np.argmin(dists, axis=1)
        for c in range(k_modes):
            members = pts[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return AnchorSet(points=centers)


def assign_targets_distinct(
    endpoints: np.ndarray,
    confidences: np.ndarray,
    gt_endpoint: np.ndarray,
    radius: float,
) -> int:
    """Positive-mode index: nearest endpoint to the ground-truth endpoint
    after collapsing near-duplicates onto their higher-confidence member."""
    endpoints = np.asarray(endpoints, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(-confidences, kind="stable")
    kept: list[int] = []
    for i in order:
        if any(np.linalg.norm(endpoints[i] - endpoints[j]) < radius for j in kept):
            continue
        kept.append(int(i))
    dists = [np.linalg.norm(endpoints[i] - np.asarray(gt_endpoint)) for i in kept]
    return kept[int(np.argmin(dists))]


def select_final(predictions: PredictionSet, top_k: int = 6, radius: float = 2.0) -> PredictionSet:
    """Greedy confidence-descending endpoint NMS, backfilled to ``top_k``
    modes, confidences renormalized."""
    conf = predictions.confidences
    if len(conf) < top_k:
        raise ConfigurationError(f"need at least {top_k} modes, got {len(conf)}")
    endpoints = predictions.endpoints
    order = np.argsort(-conf, kind="stable")
    selected: list[int] = []
    for i in order:
        if len(selected) == top_k:
            break
        if any(np.linalg.norm(endpoints[i] - endpoints[j]) < radius for j in selected):
            continue
        selected.append(int(i))
    if len(selected) < top_k:
        for i in order:
            if int(i) not in selected:
                selected.append(int(i))
                if len(selected) == top_k:
                    break
    picked = np.asarray(selected)
    conf_sel = conf[picked]
    conf_sel = conf_sel / conf_sel.sum()
    return PredictionSet(
        trajectories=predictions.trajectories[picked].copy(),
        gmm_params=predictions.gmm_params[picked].copy(),
        confidences=conf_sel,
    )


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_hidden: int, motion_hidden: int,
                 t_future: int, rng: np.random.Generator):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, heads, rng)
        self.cross_agent = MultiheadAttention(dim, heads, rng)
        self.cross_map = MultiheadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm3 = LayerNorm(dim)
        self.norm4 = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_hidden, dim], rng)
        self.motion_head = MLP([dim, motion_hidden, t_future * 5], rng)
        self.conf_head = MLP([dim, dim, 1], rng)

    def __call__(self, q, pe_anchor, agent_tokens, pe_agent, map_tokens, pe_map, map_mask):
        h = self.norm1(T.add(q, self.self_attn(q, q, q, pe_q=pe_anchor, pe_k=pe_anchor)))
        h = self.norm2(
            T.add(h, self.cross_agent(h, agent_tokens, agent_tokens, pe_q=pe_anchor, pe_k=pe_agent))
        )
        h = self.norm3(
            T.add(
                h,
                self.cross_map(h, map_tokens, map_tokens, mask=map_mask, pe_q=pe_anchor, pe_k=pe_map),
            )
        )
        h = self.norm4(T.add(h, self.ffn(h)))
        return h


class Decoder(Module):
    EVOLVE_AFTER = (1, 3)  # zero-based layer indices; anchors evolve after layers 2 and 4

    def __init__(
        self,
        dim: int,
        heads: int,
        k_modes: int,
        t_future: int,
        rng: np.random.Generator,
        n_layers: int = 6,
        ffn_hidden: int | None = None,
        motion_hidden: int = 128,
        dense_hidden: int = 128,
        knn_map: int = 8,
        sigma_bias: float = 1.0,
        sigma_min: float = 0.03,
        rho_scale: float = 0.995,
    ):
        super().__init__()
        ffn_hidden = ffn_hidden or 4 * dim
        self.dim = dim
        self.k_modes = k_modes
        self.t_future = t_future
        self.knn_map = knn_map
        self.sigma_bias = sigma_bias
        self.sigma_min = sigma_min
        self.rho_scale = rho_scale
        self.layers = ModuleList(
            DecoderLayer(dim, heads, ffn_hidden, motion_hidden, t_future, rng)
            for _ in range(n_layers)
        )
        self.dense_head = MLP([dim, dense_hidden, t_future * 2], rng)
        self.dense_embed = Linear(t_future * 2, dim, rng)
        self.anchors = Buffer(np.zeros((k_modes, 2)))

    def set_anchors(self, anchors: AnchorSet):
        if anchors.points.shape != (self.k_modes, 2):
            raise ConfigurationError(
                f"anchor set shape {anchors.points.shape} != ({self.k_modes}, 2)"
            )
        self.anchors = Buffer(anchors.points)

    def _heads(self, layer: DecoderLayer, h: Tensor, anchor: Tensor) -> LayerOutput:
        k, t_f = self.k_modes, self.t_future
        raw = T.reshape(layer.motion_head(h), (k, t_f, 5))
        # straight-line prior from the (agent-centric) origin to the anchor:
        # with a zero head output the mode is a constant-velocity ride to its
        # intention point, so the head only regresses deviations
        ramp = (np.arange(1, t_f + 1) / t_f)[None, :, None]
        anchor_ride = T.mul(T.reshape(anchor, (k, 1, 2)), T.constant(ramp))
        mu = T.add(raw[:, :, 0:2], anchor_ride)
        sigma = T.add(T.softplus(T.add(raw[:, :, 2:4], self.sigma_bias)), self.sigma_min)
        rho = T.mul(T.tanh(raw[:, :, 4:5]), self.rho_scale)
        gmm = T.concat([mu, sigma, rho], axis=2)
        conf_logits = T.reshape(layer.conf_head(h), (k,))
        endpoint = gmm[:, -1, 0:2]
        return LayerOutput(gmm=gmm, conf_logits=conf_logits, endpoint=endpoint)

    def __call__(self, tokens: SceneTokens) -> DecodeResult:
        n_agents = tokens.agent_tokens.shape[0]
        t_f = self.t_future

        # dense single-mode futures for every agent, folded back into the
        # agent tokens before decoding
        dense_flat = self.dense_head(tokens.agent_tokens)  # (N_a, T_f*2)
        ref = np.repeat(tokens.agent_ref_pos, t_f, axis=0).reshape(n_agents, t_f, 2)
        dense_future = T.add(T.reshape(dense_flat, (n_agents, t_f, 2)), T.constant(ref))
        agent_tokens = T.add(tokens.agent_tokens, self.dense_embed(dense_flat))

        pe_agent = T.constant(sinusoidal_pe(tokens.agent_ref_pos, self.dim))
        pe_map = T.constant(sinusoidal_pe(tokens.map_ref_pos, self.dim))

        anchor = T.constant(self.anchors.data)
        q = sinusoidal_pe_tensor(anchor, self.dim)
        k_map = min(self.knn_map, tokens.map_tokens.shape[0])

        layers: list[LayerOutput] = []
        centers: list[np.ndarray] = []
        pe_anchor = None
        map_mask = None
        for li, layer in enumerate(self.layers):
            centers.append(anchor.data.copy())
            if pe_anchor is None:  # anchors changed (or first layer)
                pe_anchor = sinusoidal_pe_tensor(anchor, self.dim)
                map_mask = knn_mask(anchor.data, tokens.map_ref_pos, k_map)
            q = layer(q, pe_anchor, agent_tokens, pe_agent, tokens.map_tokens, pe_map, map_mask)
            out = self._heads(layer, q, anchor)
            layers.append(out)
            if li in self.EVOLVE_AFTER:
                anchor = out.endpoint
                pe_anchor = None
        return DecodeResult(layers=layers, dense_future=dense_future, layer_anchor_centers=centers)
