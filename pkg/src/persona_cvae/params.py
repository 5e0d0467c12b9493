"""Training configuration and the assembled parameter set.

ModelParams wires the encoder, memory, latent, and decoder submodules together
and exposes one flat name -> Tensor table for the optimizer and checkpoints.
Submodules are constructed in a fixed order from a single seeded sampler, so a
seed fully determines the initialization.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .autodiff import SeededSampler
from .decoder import Decoder
from .encoders import ContextEncoder, SentenceEncoder
from .errors import ConfigError
from .latent import LatentNets
from .memory import PersonaMemory


@dataclass
class TrainConfig:
    """Hyperparameters; the full-scale defaults shrink for desk-scale runs."""

    hidden: int = 500
    embed_dim: int = 300
    mem_dim: int = 300
    latent_dim: int = 100
    vocab_cap: int = 20000
    hops: int = 3
    enc_layers: int = 2
    k_max: int = 5
    batch_size: int = 32
    lr: float = 0.001
    anneal_steps: int = 10000
    max_steps: int = 2000
    seed: int = 0
    init_range: float = 0.08
    clip_norm: float = 5.0
    label_threshold: float = 0.2
    # auxiliary loss weights; the objective is the plain sum by default
    w_kl: float = 1.0
    w_select: float = 1.0
    w_type: float = 1.0
    w_bow: float = 1.0
    max_len: int = 20
    log_every: int = 50
    ckpt_every: int = 500
    patience: int = 3
    fds_prefix: int = 1
    anneal_on: bool = True  # False pins the KL weight at 1 from step 0

    def __post_init__(self):
        positive = (
            "hidden", "embed_dim", "mem_dim", "latent_dim", "vocab_cap", "hops",
            "enc_layers", "batch_size", "lr", "anneal_steps", "max_steps",
            "init_range", "clip_norm", "max_len", "fds_prefix",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k_max < 0 or self.label_threshold < 0:
            raise ConfigError("k_max and label_threshold must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


class ModelParams:
    """All trainable tensors, grouped by submodule, with a flat named view."""

    def __init__(self, config, vocab_size, sampler=None):
        if vocab_size < 5:
            raise ConfigError("vocabulary must contain the specials plus at least one word")
        sampler = sampler if sampler is not None else SeededSampler(config.seed)
        self.config = config
        self.vocab_size = vocab_size
        scale = config.init_range
        self.sentence_encoder = SentenceEncoder(
            vocab_size, config.embed_dim, config.hidden, config.enc_layers, sampler, scale
        )
        self.context_encoder = ContextEncoder(config.hidden, config.mem_dim, sampler, scale)
        self.persona_memory = PersonaMemory(
            vocab_size, config.mem_dim, config.hops, config.latent_dim,
            config.k_max, sampler, scale,
        )
        self.latent_nets = LatentNets(
            config.hidden, config.mem_dim, config.latent_dim, vocab_size, sampler, scale
        )
        self.decoder = Decoder(
            vocab_size, config.embed_dim, config.hidden, config.mem_dim,
            config.latent_dim, config.hidden, sampler, scale,
        )

    def named(self):
        table = {}
        for group in (
            self.sentence_encoder.named("sent"),
            self.context_encoder.named("ctx"),
            self.persona_memory.named("mem"),
            self.latent_nets.named("lat"),
            self.decoder.named("dec"),
        ):
            for name, tensor in group.items():
                if name in table:
                    raise ConfigError(f"duplicate parameter name {name}")
                table[name] = tensor
        return table

    def parameters(self):
        return list(self.named().values())

    def n_parameters(self):
        return sum(t.size for t in self.parameters())
