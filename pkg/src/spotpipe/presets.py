"""Calibrated model and cluster presets used by tests, examples and the CLI."""
from __future__ import annotations

from .profile import GIB, ClusterSpec, CommModel, LayerCost, ModelProfile

MIB = 1 << 20

# 10 Gbps-class instance networking
DEFAULT_LINK = 1.25e9


def bert_like(block_forward: float = 0.25, microbatches: int = 16, microbatch_size: int = 128, pipelines: int = 1,
              block_weight_bytes: float = 200 * MIB, block_activation_bytes: float = 40 * MIB,
              message_bytes: float = 64 * MIB, embedding_weight_bytes: float = 400 * MIB) -> ModelProfile:
    """Embedding, 24 transformer blocks split into attention and MLP halves, and a head.

    Layer times are per microbatch; the global batch spans all `pipelines`.
    Backward costs twice the forward. The defaults are tuned so that a
    memory-balanced 8-stage split puts more layers on later stages and the
    early stages' idle time can host their successor's forward.
    """
    a = block_activation_bytes
    layers = [LayerCost.from_forward(0.05, embedding_weight_bytes, a / 4, output_bytes=message_bytes)]
    for _ in range(24):
        layers.append(LayerCost.from_forward(block_forward * 0.5, block_weight_bytes * 0.33, a * 0.5,
                                             output_bytes=message_bytes))
        layers.append(LayerCost.from_forward(block_forward * 0.5, block_weight_bytes * 0.67, a * 0.5,
                                             output_bytes=message_bytes))
    layers.append(LayerCost.from_forward(block_forward * 0.25, 8 * MIB, a / 4, output_bytes=message_bytes))
    return ModelProfile(tuple(layers), microbatches * microbatch_size * pipelines, microbatches, name="bert-like")


def gpt_like(block_forward: float = 0.3, microbatches: int = 16, microbatch_size: int = 64) -> ModelProfile:
    """Decoder stack with 32 equal blocks and a large tied embedding."""
    layers = [LayerCost.from_forward(0.08, 600 * MIB, 20 * MIB, output_bytes=48 * MIB)]
    layers += [LayerCost.from_forward(block_forward, 240 * MIB, 60 * MIB, output_bytes=48 * MIB) for _ in range(32)]
    layers.append(LayerCost.from_forward(0.08, 16 * MIB, 20 * MIB, output_bytes=48 * MIB))
    return ModelProfile(tuple(layers), microbatches * microbatch_size, microbatches, name="gpt-like")


def bert_cluster(D: int = 4, P: int = 12, P_demand: int = 8) -> ClusterSpec:
    """48-node spot cluster: 4 pipelines, each 1.5x the on-demand depth of 8."""
    return ClusterSpec(D=D, P=P, P_demand=P_demand, comm=CommModel(DEFAULT_LINK, cross_zone_factor=1.1))


def cluster_profile(**overrides) -> ModelProfile:
    """BERT-like profile sized for the 48-node cluster (global batch 8192 over 4 pipelines)."""
    overrides.setdefault("block_forward", 0.35)
    overrides.setdefault("pipelines", 4)
    return bert_like(**overrides)


# Data-parallel reference: a convolutional model whose gradient all-reduce dominates compute.
VGG_WEIGHT_BYTES = 575 * 1_000_000
VGG_MINIBATCH_SECONDS = 0.12
VGG_MINIBATCH = 64

PRESETS = {
    "bert-like": bert_like,
    "bert-cluster": cluster_profile,
    "gpt-like": gpt_like,
}


def get_profile(name: str, **overrides) -> ModelProfile:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**overrides)


__all__ = ["GIB", "MIB", "DEFAULT_LINK", "bert_like", "gpt_like", "bert_cluster", "cluster_profile", "get_profile", "PRESETS",
           "VGG_WEIGHT_BYTES", "VGG_MINIBATCH_SECONDS", "VGG_MINIBATCH"]
