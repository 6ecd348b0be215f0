"""Toy transformer encoder-decoder, its training loop and checkpoint format."""

from vptlab.backbone.model import (
    AttentionPrefix,
    Backbone,
    BackboneConfig,
    ContextualEmbeddings,
    DecoderCache,
    MultiHeadAttention,
    pad_batch,
    wrap_source,
    wrap_target,
)
from vptlab.backbone.train import (
    EncodedExample,
    TokenAccuracy,
    TrainHistory,
    encode_examples,
    evaluate_token_accuracy,
    train_backbone,
)

__all__ = [
    "AttentionPrefix",
    "Backbone",
    "BackboneConfig",
    "ContextualEmbeddings",
    "DecoderCache",
    "EncodedExample",
    "MultiHeadAttention",
    "TokenAccuracy",
    "TrainHistory",
    "encode_examples",
    "evaluate_token_accuracy",
    "pad_batch",
    "train_backbone",
    "wrap_source",
    "wrap_target",
]
