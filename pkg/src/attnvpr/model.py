"""Full model: backbone + encoder + aggregation head, and the image -> descriptor
pipeline that chains them."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backbone as bb
from .aggregation import (DEFAULT_TAU, AttentionBundle, HeadParams, ImageDescriptor,
                          aggregate, init_head)
from .encoder import (DEFAULT_HEADS, DEFAULT_MLP_RATIO, DEFAULT_TAPS, EncoderWeights,
                      MultiLevelTokens, encode, init_encoder, tap_levels)
from .numeric import make_rng


@dataclass(frozen=True)
class ModelConfig:
    taps: tuple[int, int, int] = DEFAULT_TAPS
    heads: int = DEFAULT_HEADS
    mlp_ratio: int = DEFAULT_MLP_RATIO
    tau: float = DEFAULT_TAU
    variant: str = "standard"


@dataclass(frozen=True)
class ModelWeights:
    backbone: bb.BackboneWeights
    encoder: EncoderWeights
    head: HeadParams
    config: ModelConfig = ModelConfig()

    def with_head(self, head: HeadParams) -> "ModelWeights":
        return replace(self, head=head, config=replace(self.config, variant=head.variant))


def init_model(seed: int = 0, variant: str = "standard", config: ModelConfig | None = None,
               dtype=np.float32) -> ModelWeights:
    """Randomly initialised model; each part draws from its own seeded stream."""
    config = config or ModelConfig(variant=variant)
    backbone = bb.init_backbone(make_rng(seed * 3 + 0), dtype)
    encoder = init_encoder(make_rng(seed * 3 + 1), bb.TOKEN_DIM, config.heads,
                           config.mlp_ratio, dtype=dtype)
    head = init_head(make_rng(seed * 3 + 2), config.variant, bb.TOKEN_DIM, dtype=dtype)
    return ModelWeights(backbone, encoder, head, replace(config, variant=head.variant))


def extract_tokens(image01, model: ModelWeights) -> MultiLevelTokens:
    """[0, 1] RGB image -> tapped low/mid/high encoder tokens."""
    x = bb.standardize(image01, model.backbone)
    raw = bb.extract_raw_tokens(x, model.backbone)
    layers = encode(raw, model.encoder)
    return tap_levels(layers, model.config.taps, raw.centers, raw.grid)


def describe_image(image01, model: ModelWeights, image_id: str = "", tau: float | None = None,
                   keep_all: bool = False) -> tuple[ImageDescriptor, AttentionBundle]:
    tokens = extract_tokens(image01, model)
    tau = model.config.tau if tau is None else tau
    return aggregate(model.head.variant, tokens, model.head, tau, image_id, keep_all)


def describe_tokens(tokens: MultiLevelTokens, head: HeadParams, image_id: str = "",
                    tau: float = DEFAULT_TAU, keep_all: bool = False) -> ImageDescriptor:
    return aggregate(head.variant, tokens, head, tau, image_id, keep_all)[0]
