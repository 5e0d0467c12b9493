"""Response decoder with soft and forced decoding over persona words.

Every step produces one shared logits vector. Soft decoding renormalizes it
over two disjoint supports (words of the chosen persona vs everything else,
with EOS living in "other"), then mixes the two distributions with a learned
type weight. Forced decoding is an inference-time overlay: once the model has
organically emitted the first word(s) of the chosen persona, the remaining
persona words are injected verbatim, at most once per response.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    cross_entropy,
    gather,
    masked_softmax,
    matmul,
    slice_last,
    softmax,
)
from .data import EOS, PAD, SOS
from .encoders import GRUCell, encode_context, uniform_tensor
from .errors import ContractError
from .latent import prior, reparameterize
from .memory import N_SPECIALS, build_memories, read_memory, select_persona


@dataclass
class DecoderStep:
    s_t: Tensor            # (1, hidden) state the logits were read from
    logits: Tensor         # (1, V) shared pre-mask logits
    p_per: Tensor | None   # (1, V) persona-word distribution, None if no persona
    p_other: Tensor        # (1, V) complement distribution
    alpha: Tensor          # (1, 2) effective (alpha_per, alpha_other)
    final_dist: Tensor     # (1, V) mixture
    fds_active: bool = False
    fds_cursor: int | None = None


@dataclass
class FdsState:
    persona: list          # token ids of the chosen persona (empty disables)
    m: int = 1             # organic prefix length that triggers forcing
    cursor: int = 0
    active: bool = False
    used: bool = False


@dataclass
class GenerationResult:
    responses: list        # n token-id lists, EOS-terminated or cut at max_len
    selected_persona: list # per response: persona index or None
    z_used: list           # per response: latent vector as an ndarray
    attention_trace: np.ndarray  # (hops, k) memory attention, shared by all draws
    type_trace: list       # per response: [(alpha_per, alpha_other), ...] per token
    fds_used: list         # per response: whether forcing fired


def allowed_mask(vocab_size):
    """Generation support: all non-special words plus EOS."""
    mask = np.zeros(vocab_size, dtype=bool)
    mask[N_SPECIALS:] = True
    mask[EOS] = True
    return mask


def support_masks(vocab_size, persona_word_ids):
    """Disjoint persona/other supports partitioning the allowed vocabulary."""
    allowed = allowed_mask(vocab_size)
    per = np.zeros(vocab_size, dtype=bool)
    if persona_word_ids:
        per[sorted(persona_word_ids)] = True
    per &= allowed
    per[EOS] = False  # termination always comes from the other side
    return per, allowed & ~per


class Decoder:
    """Single-layer GRU decoder plus the shared-logits type mixture head."""

    def __init__(self, vocab_size, embed_dim, ctx_dim, mem_dim, latent_dim, hidden,
                 sampler, scale):
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.embedding = uniform_tensor((vocab_size, embed_dim), sampler, scale)
        self.cell = GRUCell(embed_dim, hidden, sampler, scale)
        self.w_init = uniform_tensor((ctx_dim + mem_dim + latent_dim, hidden), sampler, scale)
        self.b_init = uniform_tensor((hidden,), sampler, scale)
        self.w_dec = uniform_tensor((hidden, vocab_size), sampler, scale)
        self.b_dec = uniform_tensor((vocab_size,), sampler, scale)
        self.w_sds = uniform_tensor((hidden + mem_dim, 2), sampler, scale)
        self.b_sds = uniform_tensor((2,), sampler, scale)

    def init_state(self, x, p, z):
        return matmul(concat([x, p, z], axis=-1), self.w_init) + self.b_init

    def mixture(self, s, u3, per_mask, other_mask, has_persona):
        """Type-mixed distribution from one state; all arguments batched.

        per_mask rows without support borrow PAD so the softmax stays defined;
        has_persona zeroes their mixture weight, and PAD is outside other_mask,
        so no probability leaks. Returns (final, alpha_raw, alpha_eff, parts).
        """
        logits = matmul(s, self.w_dec) + self.b_dec
        safe_per = per_mask.copy()
        empty = ~safe_per.any(axis=1)
        safe_per[empty, PAD] = True
        p_per = masked_softmax(logits, safe_per)
        p_other = masked_softmax(logits, other_mask)
        alpha_raw = softmax(matmul(concat([s, u3], axis=-1), self.w_sds) + self.b_sds)
        a_per = slice_last(alpha_raw, 0, 1) * Tensor(has_persona)
        final = a_per * p_per + (Tensor(1.0) - a_per) * p_other
        return final, alpha_raw, a_per, logits, p_per, p_other

    def parameters(self):
        return [
            self.embedding, *self.cell.parameters(), self.w_init, self.b_init,
            self.w_dec, self.b_dec, self.w_sds, self.b_sds,
        ]

    def named(self, prefix):
        out = {f"{prefix}.embedding": self.embedding}
        out.update(self.cell.named(f"{prefix}.cell"))
        for name in ("w_init", "b_init", "w_dec", "b_dec", "w_sds", "b_sds"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        return out


def init_state(x, p, z, params):
    return params.decoder.init_state(x, p, z)


def sds_step(s_t, prev_token, u3, persona_word_ids, params):
    """Advance one step from prev_token and build the mixed distribution."""
    dec = params.decoder
    emb = gather(dec.embedding, np.array([prev_token], dtype=np.int64))
    s = dec.cell.step(emb, s_t)
    per, other = support_masks(dec.vocab_size, persona_word_ids)
    has = np.array([[1.0 if persona_word_ids else 0.0]])
    final, alpha_raw, a_per, logits, p_per, p_other = dec.mixture(
        s, u3, per[None, :], other[None, :], has
    )
    alpha_eff = concat([a_per, Tensor(1.0) - a_per], axis=-1)
    return DecoderStep(
        s_t=s,
        logits=logits,
        p_per=p_per if persona_word_ids else None,
        p_other=p_other,
        alpha=alpha_eff,
        final_dist=final,
    )


def plain_step(s_t, prev_token, params):
    """Ablation path: one step of a standard conditional decoder."""
    dec = params.decoder
    emb = gather(dec.embedding, np.array([prev_token], dtype=np.int64))
    s = dec.cell.step(emb, s_t)
    logits = matmul(s, dec.w_dec) + dec.b_dec
    dist = masked_softmax(logits, allowed_mask(dec.vocab_size)[None, :])
    return s, dist


def fds_check_and_apply(decoded_prefix, selected_persona, state):
    """Return the next forced token id, or None when forcing is not in effect."""
    if state.active:
        token = state.persona[state.cursor]
        state.cursor += 1
        if state.cursor >= len(state.persona):
            state.active = False
            state.used = True
        return token
    if state.used or not selected_persona or len(selected_persona) <= state.m:
        return None
    if len(decoded_prefix) < state.m:
        return None
    if list(decoded_prefix[-state.m:]) != list(selected_persona[: state.m]):
        return None
    state.cursor = state.m
    state.active = True
    return fds_check_and_apply(decoded_prefix, selected_persona, state)


def label_word_masks(pers_ids, pers_tok_mask, labels, vocab_size):
    """Per-example persona-word supports from teacher-forced labels.

    Returns (per_mask (B,V) bool, other_mask (B,V) bool, has_persona (B,1)).
    Label -1 (no persona) yields an empty persona support.
    """
    b = pers_ids.shape[0]
    allowed = allowed_mask(vocab_size)
    per = np.zeros((b, vocab_size), dtype=bool)
    for i in range(b):
        j = labels[i]
        if j < 0:
            continue
        ids = pers_ids[i, j][pers_tok_mask[i, j] > 0]
        ids = ids[ids >= N_SPECIALS]
        per[i, ids] = True
    per[:, EOS] = False
    has = per.any(axis=1, keepdims=True).astype(np.float64)
    return per, allowed[None, :] & ~per, has


def teacher_forced_losses(batch, x, u3, z, params):
    """Reconstruction and type-supervision sums over one teacher-forced pass.

    Returns (recon_sum, type_sum, token_count): recon_sum is the mixture NLL
    over real non-UNK targets, type_sum the binary cross-entropy of the raw
    type weight against copy positions, token_count the recon denominator.
    """
    dec = params.decoder
    per_mask, other_mask, has = label_word_masks(
        batch.pers_ids, batch.pers_tok_mask, batch.labels, dec.vocab_size
    )
    s = dec.init_state(x, u3, z)
    recon = Tensor(0.0)
    type_ce = Tensor(0.0)
    recon_w_total = 0.0
    for t in range(batch.resp_in.shape[1]):
        step_mask = batch.resp_mask[:, t : t + 1]
        if not step_mask.any():
            break
        emb = gather(dec.embedding, batch.resp_in[:, t])
        s = dec.cell.step(emb, s, Tensor(step_mask))
        final, alpha_raw, _, _, _, _ = dec.mixture(s, u3, per_mask, other_mask, has)
        recon_w = batch.resp_mask[:, t] * (batch.resp_out[:, t] != 1)  # UNK has no support
        recon = recon + cross_entropy(final, batch.resp_out[:, t], recon_w)
        # copy=1 maps to the persona column (index 0) of the type pair
        type_targets = (1 - batch.copy[:, t]).astype(np.int64)
        type_ce = type_ce + cross_entropy(alpha_raw, type_targets, batch.resp_mask[:, t])
        recon_w_total += recon_w.sum()
    return recon, type_ce, recon_w_total


def _choose(dist_row, temperature, sampler):
    if temperature is None:
        return int(np.argmax(dist_row))
    heated = dist_row ** (1.0 / temperature)
    heated /= heated.sum()
    u = sampler.uniform(0.0, 1.0, ())
    return int(np.searchsorted(np.cumsum(heated), u))


def _decode_one(params, enc, u3, z, personas, persona_word_ids, fds_persona,
                max_len, sds_on, temperature, sampler):
    """Greedy/temperature decode of one response from a fixed latent.

    Returns (tokens, per-token alpha pairs, fds_used).
    """
    fds = FdsState(persona=list(fds_persona), m=params.config.fds_prefix)
    s = params.decoder.init_state(enc.h_context, u3, z)
    prev = SOS
    tokens, alphas = [], []
    for _ in range(max_len):
        forced = fds_check_and_apply(tokens, fds.persona, fds)
        if forced is not None:
            # state still advances on the previous token; output is overridden
            if sds_on:
                step = sds_step(s, prev, u3, persona_word_ids, params)
                s = step.s_t
                alphas.append(
                    (float(step.alpha.data[0, 0]), float(step.alpha.data[0, 1]))
                )
            else:
                s, _ = plain_step(s, prev, params)
            tokens.append(forced)
            prev = forced
            continue
        if sds_on:
            step = sds_step(s, prev, u3, persona_word_ids, params)
            s = step.s_t
            dist = step.final_dist.data[0]
            alphas.append(
                (float(step.alpha.data[0, 0]), float(step.alpha.data[0, 1]))
            )
        else:
            s, dist_t = plain_step(s, prev, params)
            dist = dist_t.data[0]
        token = _choose(dist, temperature, sampler)
        tokens.append(token)
        if token == EOS:
            break
        prev = token
    return tokens, alphas, fds.used


def generate_n(context, personas, n, params, sampler, max_len=20,
               sds_on=True, fds_on=True, temperature=None):
    """Encode once, then draw n latents and greedy-decode one response each.

    Each draw gets its own child random stream, so results are identical
    whether the draws run sequentially or concurrently.
    """
    if n < 1:
        raise ContractError("need at least one response")
    enc = encode_context(context, params)
    readout = read_memory(enc.u0, build_memories(personas, params), params)
    u3 = readout.u_final
    attention = (
        np.stack([p.data[0] for p in readout.prob])
        if readout.prob else np.zeros((0, len(personas)))
    )
    result = GenerationResult(
        responses=[], selected_persona=[], z_used=[],
        attention_trace=attention, type_trace=[], fds_used=[],
    )
    for i in range(n):
        child = sampler.child(i)
        g = prior(enc.h_context, u3, params)
        z = reparameterize(g, child, source="prior")
        sel = select_persona(u3, z.z, personas, params)
        fds_persona = (
            personas[sel.selected] if fds_on and sel.selected is not None else []
        )
        tokens, alphas, fds_used = _decode_one(
            params, enc, u3, z.z, personas, sel.persona_word_ids, fds_persona,
            max_len, sds_on, temperature, child,
        )
        result.responses.append(tokens)
        result.selected_persona.append(sel.selected)
        result.z_used.append(z.z.data[0].copy())
        result.type_trace.append(alphas)
        result.fds_used.append(fds_used)
    return result


def generate_greedy(context, personas, params, max_len=20, sds_on=True,
                    fds_on=False, label=None):
    """Deterministic decode from the prior mean; no randomness is consumed.

    label, when given, teacher-forces which persona's word set drives the
    mixture (and forced decoding) instead of the model's own selection.
    Returns (tokens, selected persona index or None, fds_used).
    """
    enc = encode_context(context, params)
    u3 = read_memory(enc.u0, build_memories(personas, params), params).u_final
    z = prior(enc.h_context, u3, params).mu
    if label is not None:
        selected = label
        word_ids = {int(t) for t in personas[label] if int(t) >= N_SPECIALS}
    else:
        sel = select_persona(u3, z, personas, params)
        selected = sel.selected
        word_ids = sel.persona_word_ids
    fds_persona = personas[selected] if fds_on and selected is not None else []
    tokens, _, fds_used = _decode_one(
        params, enc, u3, z, personas, word_ids, fds_persona,
        max_len, sds_on, None, None,
    )
    return tokens, selected, fds_used
