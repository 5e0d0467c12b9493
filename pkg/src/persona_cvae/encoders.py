"""Sentence and context encoders.

Utterances pass through a stacked bidirectional GRU whose top-layer final
states are concatenated into a 2H sentence vector; a single forward GRU then
rolls those vectors into h_context, which a learned linear map projects down
to the memory dimension d. All cores are batched; padded steps hold their
previous hidden state so arbitrary length mixes share one graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, gather, matmul, sigmoid, slice_last, slice_rows, tanh
from .errors import ContractError


def uniform_tensor(shape, sampler, scale):
    return Tensor(sampler.uniform(-scale, scale, shape), requires_grad=True)


class GRUCell:
    """Single gated recurrent cell with fused gate matrices (reset, update, new)."""

    def __init__(self, in_dim, hidden, sampler, scale):
        self.in_dim = in_dim
        self.hidden = hidden
        self.w_ih = uniform_tensor((in_dim, 3 * hidden), sampler, scale)
        self.w_hh = uniform_tensor((hidden, 3 * hidden), sampler, scale)
        self.b_ih = uniform_tensor((3 * hidden,), sampler, scale)
        self.b_hh = uniform_tensor((3 * hidden,), sampler, scale)

    def step(self, x, h, mask=None):
        """One recurrence step; mask (B,1) of 1/0 holds state on padded rows."""
        hid = self.hidden
        gi = matmul(x, self.w_ih) + self.b_ih
        gh = matmul(h, self.w_hh) + self.b_hh
        r = sigmoid(slice_last(gi, 0, hid) + slice_last(gh, 0, hid))
        u = sigmoid(slice_last(gi, hid, 2 * hid) + slice_last(gh, hid, 2 * hid))
        n = tanh(slice_last(gi, 2 * hid, 3 * hid) + r * slice_last(gh, 2 * hid, 3 * hid))
        h_new = n + u * (h - n)
        if mask is not None:
            h_new = h + mask * (h_new - h)
        return h_new

    def parameters(self):
        return [self.w_ih, self.w_hh, self.b_ih, self.b_hh]

    def named(self, prefix):
        return {
            f"{prefix}.w_ih": self.w_ih,
            f"{prefix}.w_hh": self.w_hh,
            f"{prefix}.b_ih": self.b_ih,
            f"{prefix}.b_hh": self.b_hh,
        }


def _zeros(rows, cols):
    return Tensor(np.zeros((rows, cols)))


class SentenceEncoder:
    """Stacked bidirectional GRU over word embeddings; output is 2H per sentence."""

    def __init__(self, vocab_size, embed_dim, hidden, layers, sampler, scale):
        self.hidden = hidden
        self.layers = layers
        self.embedding = uniform_tensor((vocab_size, embed_dim), sampler, scale)
        self.fwd = [
            GRUCell(embed_dim if l == 0 else 2 * hidden, hidden, sampler, scale)
            for l in range(layers)
        ]
        self.bwd = [
            GRUCell(embed_dim if l == 0 else 2 * hidden, hidden, sampler, scale)
            for l in range(layers)
        ]

    def run_batch(self, ids, tok_mask):
        """ids (R,T) int array, tok_mask (R,T) floats -> (R,2H) sentence vectors.

        Every row must contain at least one real token.
        """
        rows, steps = ids.shape
        if steps == 0 or not np.all(tok_mask.sum(axis=1) >= 1):
            raise ContractError("every sentence must contain at least one token")
        xs = [gather(self.embedding, ids[:, t]) for t in range(steps)]
        masks = [Tensor(tok_mask[:, t : t + 1]) for t in range(steps)]
        f_final = b_final = None
        for layer in range(self.layers):
            h = _zeros(rows, self.hidden)
            f_out = []
            for t in range(steps):
                h = self.fwd[layer].step(xs[t], h, masks[t])
                f_out.append(h)
            h = _zeros(rows, self.hidden)
            b_out = [None] * steps
            for t in reversed(range(steps)):
                h = self.bwd[layer].step(xs[t], h, masks[t])
                b_out[t] = h
            f_final, b_final = f_out[-1], b_out[0]
            xs = [concat([f_out[t], b_out[t]], axis=-1) for t in range(steps)]
        return concat([f_final, b_final], axis=-1)

    def encode_one(self, tokens):
        if len(tokens) == 0:
            raise ContractError("cannot encode an empty sentence")
        ids = np.asarray([tokens], dtype=np.int64)
        return self.run_batch(ids, np.ones_like(ids, dtype=np.float64))

    def parameters(self):
        out = [self.embedding]
        for cell in self.fwd + self.bwd:
            out.extend(cell.parameters())
        return out

    def named(self, prefix):
        out = {f"{prefix}.embedding": self.embedding}
        for l in range(self.layers):
            out.update(self.fwd[l].named(f"{prefix}.f{l}"))
            out.update(self.bwd[l].named(f"{prefix}.b{l}"))
        return out


@dataclass
class EncodedContext:
    """Hierarchical encoding of a dialogue context (row tensors, batch axis first)."""

    sentence_states: list  # per utterance, (B, 2H)
    h_context: Tensor      # (B, H)
    u0: Tensor             # (B, d) memory query


class ContextEncoder:
    """Forward GRU over sentence vectors plus the H -> d query projection."""

    def __init__(self, hidden, mem_dim, sampler, scale):
        self.hidden = hidden
        self.cell = GRUCell(2 * hidden, hidden, sampler, scale)
        self.w_ctx = uniform_tensor((hidden, mem_dim), sampler, scale)

    def run(self, sentence_states, utt_mask):
        """sentence_states: list of (B,2H) tensors; utt_mask (B,U) -> EncodedContext."""
        if not sentence_states:
            raise ContractError("cannot encode an empty context")
        rows = sentence_states[0].shape[0]
        h = _zeros(rows, self.hidden)
        for u, sv in enumerate(sentence_states):
            h = self.cell.step(sv, h, Tensor(utt_mask[:, u : u + 1]))
        return EncodedContext(
            sentence_states=list(sentence_states),
            h_context=h,
            u0=matmul(h, self.w_ctx),
        )

    def parameters(self):
        return self.cell.parameters() + [self.w_ctx]

    def named(self, prefix):
        out = self.cell.named(f"{prefix}.cell")
        out[f"{prefix}.w_ctx"] = self.w_ctx
        return out


def encode_context_batch(ctx_ids, ctx_tok_mask, ctx_utt_mask, sent_enc, ctx_enc):
    """Encode a padded (B,U,T) context block in one batched pass.

    All utterance slots flatten into a single (U*B, T) sentence-encoder run,
    laid out utterance-major so rows u*B..(u+1)*B hold utterance u for the
    whole batch. Padded utterance slots borrow token 0 with a forced length-1
    mask to keep the row valid; the context GRU then skips them via utt_mask.
    """
    b, u, t = ctx_ids.shape
    flat_ids = ctx_ids.transpose(1, 0, 2).reshape(u * b, t)
    flat_mask = ctx_tok_mask.transpose(1, 0, 2).reshape(u * b, t).copy()
    empty = flat_mask.sum(axis=1) < 1.0
    flat_mask[empty, 0] = 1.0  # dummy token keeps the row non-empty
    sent = sent_enc.run_batch(flat_ids, flat_mask)
    blocks = [slice_rows(sent, j * b, (j + 1) * b) for j in range(u)]
    return ctx_enc.run(blocks, ctx_utt_mask)


def encode_sentence(tokens, params):
    """2H vector for one token-id sequence under the model's sentence encoder."""
    return params.sentence_encoder.encode_one(tokens)


def encode_context(context, params):
    """EncodedContext for one list of utterances (each a token-id list)."""
    if not context:
        raise ContractError("cannot encode an empty context")
    states = [params.sentence_encoder.encode_one(utt) for utt in context]
    ones = np.ones((1, len(context)))
    return params.context_encoder.run(states, ones)
