"""Latent variable networks: recognition, prior, sampling, KL, bag-of-words loss.

Both density networks are single affine maps whose output splits into a mean
and a log-variance half; log-variance keeps sigma positive without clamping.
The bag-of-words head pushes [x; p; z] straight to vocabulary logits so the
latent must carry content words, which counters posterior collapse.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    cross_entropy,
    exp,
    matmul,
    slice_last,
    softmax,
    tsum,
)
from .encoders import uniform_tensor
from .errors import ShapeError

N_SPECIALS = 4


@dataclass
class GaussianParams:
    mu: Tensor       # (B, latent)
    log_var: Tensor  # (B, latent); sigma^2 = exp(log_var)

    @property
    def dim(self):
        return self.mu.shape[-1]


@dataclass
class LatentSample:
    z: Tensor            # (B, latent)
    epsilon: np.ndarray  # the N(0,1) draw behind z
    source: str          # "recognition" or "prior"


class LatentNets:
    """Owns the affine recognition/prior maps and the bag-of-words head."""

    def __init__(self, hidden, mem_dim, latent_dim, vocab_size, sampler, scale):
        self.latent_dim = latent_dim
        # recognition sees [h_context; encoded response (2H); u3]
        self.w_recog = uniform_tensor((hidden + 2 * hidden + mem_dim, 2 * latent_dim), sampler, scale)
        self.b_recog = uniform_tensor((2 * latent_dim,), sampler, scale)
        self.w_prior = uniform_tensor((hidden + mem_dim, 2 * latent_dim), sampler, scale)
        self.b_prior = uniform_tensor((2 * latent_dim,), sampler, scale)
        self.w_bow = uniform_tensor((hidden + mem_dim + latent_dim, vocab_size), sampler, scale)
        self.b_bow = uniform_tensor((vocab_size,), sampler, scale)

    def _split(self, packed):
        L = self.latent_dim
        return GaussianParams(
            mu=slice_last(packed, 0, L), log_var=slice_last(packed, L, 2 * L)
        )

    def recognition(self, x, y, p):
        return self._split(matmul(concat([x, y, p], axis=-1), self.w_recog) + self.b_recog)

    def prior(self, x, p):
        return self._split(matmul(concat([x, p], axis=-1), self.w_prior) + self.b_prior)

    def bow_logits(self, x, p, z):
        return matmul(concat([x, p, z], axis=-1), self.w_bow) + self.b_bow

    def parameters(self):
        return [self.w_recog, self.b_recog, self.w_prior, self.b_prior, self.w_bow, self.b_bow]

    def named(self, prefix):
        return {
            f"{prefix}.w_recog": self.w_recog,
            f"{prefix}.b_recog": self.b_recog,
            f"{prefix}.w_prior": self.w_prior,
            f"{prefix}.b_prior": self.b_prior,
            f"{prefix}.w_bow": self.w_bow,
            f"{prefix}.b_bow": self.b_bow,
        }


def recognition(x, y, p, params):
    return params.latent_nets.recognition(x, y, p)


def prior(x, p, params):
    return params.latent_nets.prior(x, p)


def reparameterize(g, sampler, source="recognition"):
    """z = mu + sigma * eps with a fresh standard-normal draw."""
    epsilon = sampler.standard_normal(g.mu.shape)
    sigma = exp(g.log_var * Tensor(0.5))
    z = g.mu + sigma * Tensor(epsilon)
    return LatentSample(z=z, epsilon=epsilon, source=source)


def kl_divergence(q, p):
    """Closed-form KL(q || p) for diagonal Gaussians, summed over all entries.

    Per dimension: 0.5*(log_var_p - log_var_q)
                 + (var_q + (mu_q - mu_p)^2) / (2 var_p) - 0.5
    """
    if q.mu.shape != p.mu.shape:
        raise ShapeError(f"KL dimension mismatch: {q.mu.shape} vs {p.mu.shape}")
    var_q = exp(q.log_var)
    inv_var_p = exp(-p.log_var)
    diff = q.mu - p.mu
    per_dim = (
        (p.log_var - q.log_var) * Tensor(0.5)
        + (var_q + diff * diff) * inv_var_p * Tensor(0.5)
        - Tensor(0.5)
    )
    return tsum(per_dim)


def bow_weights(resp_out, resp_mask):
    """Positions that count for the bag-of-words loss: real, non-special tokens."""
    return resp_mask * (resp_out >= N_SPECIALS)


def bow_loss_batch(logits, resp_out, resp_mask):
    """Total BoW loss over a batch from precomputed (B, V) logits.

    Each response position reuses the same per-example distribution, so the
    (B, V) probabilities are picked per target column and masked.
    """
    probs = softmax(logits)
    total = Tensor(0.0)
    weights = bow_weights(resp_out, resp_mask)
    for t in range(resp_out.shape[1]):
        if not weights[:, t].any():
            continue
        total = total + cross_entropy(probs, resp_out[:, t], weights[:, t])
    return total


def bow_loss(x, p, z, response, params):
    """Single-example BoW loss over the non-special tokens of one response."""
    ids = np.asarray([response], dtype=np.int64)
    return bow_loss_batch(params.latent_nets.bow_logits(x, p, z), ids, np.ones_like(ids, dtype=np.float64))
