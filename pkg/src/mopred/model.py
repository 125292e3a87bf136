"""End-to-end model: configuration, forward pass over a scene, checkpoint I/O."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .decoder import DecodeResult, Decoder, PredictionSet, select_final
from .encoder import Encoder, RecoveredHistory, SceneTokens, scene_encoder_inputs
from .errors import CheckpointMismatchError
from .nn import Module
from .scene import FEATURE_WIDTH_MAP, FEATURE_WIDTH_RELATIVE, Scene, feature_width_agents
from .seeding import substream
from .transform import relative_movements
from .tensor import Tensor


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    knn: int = 8
    k_modes: int = 16
    top_k: int = 6
    decoder_layers: int = 6
    encoder_attention_layers: int = 4
    t_past: int = 10
    t_future: int = 30
    motion_hidden: int = 128
    dense_hidden: int = 128
    nms_radius: float = 2.0
    sigma_bias: float = 1.0
    sigma_min: float = 0.03
    rho_scale: float = 0.995
    use_recovery: bool = True
    use_scene_tokenization: bool = True
    recovery_hidden: int = 0
    init_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class ModelOutput:
    layers: list  # per-decoder-layer LayerOutput
    dense_future: Tensor
    recovered: RecoveredHistory | None
    tokens: SceneTokens
    anchor_centers: list[np.ndarray]


class MotionPredictor(Module):
    """Encoder + decoder over a single agent-centric scene."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = substream(config.init_seed, "init")
        self.encoder = Encoder(
            agent_features=feature_width_agents(config.t_past),
            rel_features=FEATURE_WIDTH_RELATIVE,
            map_point_features=FEATURE_WIDTH_MAP,
            dim=config.d_model,
            heads=config.heads,
            t_past=config.t_past,
            rng=rng,
            use_recovery=config.use_recovery,
            use_scene_tokenization=config.use_scene_tokenization,
            attention_layers=config.encoder_attention_layers,
            recovery_hidden=config.recovery_hidden,
        )
        self.decoder = Decoder(
            dim=config.d_model,
            heads=config.heads,
            k_modes=config.k_modes,
            t_future=config.t_future,
            rng=rng,
            n_layers=config.decoder_layers,
            motion_hidden=config.motion_hidden,
            dense_hidden=config.dense_hidden,
            knn_map=config.knn,
            sigma_bias=config.sigma_bias,
            sigma_min=config.sigma_min,
            rho_scale=config.rho_scale,
        )

    def encode_scene(self, scene: Scene) -> tuple[SceneTokens, RecoveredHistory | None]:
        rel = relative_movements(scene)
        agent_feats, rel_vals, mfeats, mvalid, agent_ref, map_ref = scene_encoder_inputs(
            scene, rel.values
        )
        return self.encoder(
            T.constant(agent_feats),
            T.constant(rel_vals),
            T.constant(mfeats),
            mvalid,
            agent_ref,
            map_ref,
            self.config.knn,
        )

    def forward_scene(self, scene: Scene) -> ModelOutput:
        tokens, recovered = self.encode_scene(scene)
        result: DecodeResult = self.decoder(tokens)
        return ModelOutput(
            layers=result.layers,
            dense_future=result.dense_future,
            recovered=recovered,
            tokens=tokens,
            anchor_centers=result.layer_anchor_centers,
        )

    def predict(self, scene: Scene) -> PredictionSet:
        """Final top-k prediction set from the last decoder layer."""
        out = self.forward_scene(scene)
        full = out.layers[-1].to_prediction_set()
        return select_final(full, top_k=self.config.top_k, radius=self.config.nms_radius)


def save_model(path: str, model: MotionPredictor, extra_header: dict | None = None,
               extra_arrays: dict | None = None):
    arrays = model.state_arrays()
    if extra_arrays:
        arrays.update(extra_arrays)
    header = {"model": model.config.to_dict()}
    if extra_header:
        header.update(extra_header)
    ckpt.save_checkpoint(path, arrays, header)


def load_model(path: str) -> tuple[MotionPredictor, dict, dict]:
    """Rebuild a model from a checkpoint; returns (model, header, arrays)."""
    arrays, header = ckpt.load_checkpoint(path)
    if "model" not in header:
        raise CheckpointMismatchError(f"checkpoint {path} lacks a model config header")
    config = ModelConfig.from_dict(header["model"])
    model = MotionPredictor(config)
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    return model, header, arrays
