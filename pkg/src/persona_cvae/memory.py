"""Multi-hop attention over persona sentences and persona selection.

Each persona sentence is embedded as a bag-of-words sum under a per-hop
embedding table; adjacent tables are tied so hop j's output embedding is hop
j+1's input embedding (the same Tensor object). Repeated hops accumulate
u^{j+1} = u^j + o^j, and the final accumulator feeds both the latent networks
and a (k+1)-way selection head whose last class means "no persona".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    gather,
    masked_softmax,
    matmul,
    reshape,
    slice_last,
    tsum,
)
from .encoders import uniform_tensor
from .errors import ContractError

N_SPECIALS = 4  # ids below this are structural tokens, never persona words


@dataclass
class MemoryReadout:
    """Full trace of a memory read; every field keeps the batch axis."""

    m: list      # per hop, (B, K, d) input-side persona embeddings
    c: list      # per hop, (B, K, d) output-side persona embeddings
    prob: list   # per hop, (B, K) attention over personas
    o: list      # per hop, (B, d) attended outputs
    u: list      # hops+1 accumulators, (B, d); u[-1] is the persona memory

    @property
    def u_final(self):
        return self.u[-1]


@dataclass
class PersonaSelection:
    alpha: Tensor            # (1, k+1) probabilities, None class last
    selected: int | None     # persona index, or None
    persona_word_ids: set    # non-special vocab ids of the chosen persona


class PersonaMemory:
    """Owns the tied embedding tables and the selection head."""

    def __init__(self, vocab_size, mem_dim, hops, latent_dim, k_max, sampler, scale):
        if hops < 1:
            raise ContractError("memory needs at least one hop")
        self.mem_dim = mem_dim
        self.hops = hops
        self.k_max = k_max
        # hops+1 tables; hop j reads with tables[j-1] and writes with tables[j]
        self.tables = [
            uniform_tensor((vocab_size, mem_dim), sampler, scale) for _ in range(hops + 1)
        ]
        self.w_select = uniform_tensor((mem_dim + latent_dim, k_max + 1), sampler, scale)

    def embed_bow(self, pers_ids, pers_tok_mask):
        """(B,K,L) ids -> per-table (B,K,d) bag-of-words sums, masked tokens zeroed."""
        mask = Tensor(pers_tok_mask[..., None])
        out = []
        for table in self.tables:
            rows = gather(table, pers_ids) * mask
            out.append(tsum(rows, axis=2))
        return out

    def build_pairs(self, pers_ids, pers_tok_mask):
        """Adjacent-tied per-hop (m, c); pair j's c is pair j+1's m, same node."""
        bow = self.embed_bow(pers_ids, pers_tok_mask)
        return [(bow[j], bow[j + 1]) for j in range(self.hops)]

    def read_batch(self, u0, pairs, pers_mask):
        """Run all hops from query u0 under a persona presence mask.

        Rows with no personas get a dummy slot so the softmax stays defined;
        their memories are all-zero, so o = 0 and u passes through unchanged.
        """
        b, k = pers_mask.shape
        safe_mask = pers_mask.astype(bool).copy()
        safe_mask[~safe_mask.any(axis=1), 0] = True
        u = u0
        us, probs, os = [u0], [], []
        for m, c in pairs:
            scores = tsum(reshape(u, (b, 1, self.mem_dim)) * m, axis=-1)
            prob = masked_softmax(scores, safe_mask)
            o = tsum(reshape(prob, (b, k, 1)) * c, axis=1)
            u = u + o
            us.append(u)
            probs.append(prob)
            os.append(o)
        return MemoryReadout(
            m=[p[0] for p in pairs], c=[p[1] for p in pairs], prob=probs, o=os, u=us
        )

    def selection_alpha(self, u3, z, pers_mask):
        """(B, k+1) selection distribution; column k is the None class.

        The head has k_max+1 output logits; the None logit lives at the fixed
        last column and the first k columns serve whatever k the batch carries.
        """
        b, k = pers_mask.shape
        if k > self.k_max:
            raise ContractError(f"batch has {k} personas, head supports {self.k_max}")
        logits = matmul(concat([u3, z], axis=-1), self.w_select)
        cols = [slice_last(logits, 0, k)] if k else []
        cols.append(slice_last(logits, self.k_max, self.k_max + 1))
        trimmed = concat(cols, axis=-1) if k else cols[0]
        mask = np.concatenate([pers_mask.astype(bool), np.ones((b, 1), dtype=bool)], axis=1)
        return masked_softmax(trimmed, mask)

    def parameters(self):
        return self.tables + [self.w_select]

    def named(self, prefix):
        out = {f"{prefix}.table{i}": t for i, t in enumerate(self.tables)}
        out[f"{prefix}.w_select"] = self.w_select
        return out


# single-example entry points -------------------------------------------------


def _pack_personas(personas):
    k = len(personas)
    if k == 0:
        return np.zeros((1, 0, 1), dtype=np.int64), np.zeros((1, 0, 1))
    length = max(max(len(p) for p in personas), 1)
    ids = np.zeros((1, k, length), dtype=np.int64)
    mask = np.zeros((1, k, length))
    for i, p in enumerate(personas):
        ids[0, i, : len(p)] = p
        mask[0, i, : len(p)] = 1.0
    return ids, mask


def build_memories(personas, params):
    """Per-hop (m, c) pairs for one persona set; k=0 yields empty pairs."""
    if not personas:
        return []
    ids, mask = _pack_personas(personas)
    return params.persona_memory.build_pairs(ids, mask)


def read_memory(u0, memories, params, hops=None):
    """Multi-hop read for one example; empty memories pass u0 through."""
    mem = params.persona_memory
    hops = mem.hops if hops is None else hops
    if not memories:
        return MemoryReadout(m=[], c=[], prob=[], o=[], u=[u0])
    if len(memories) != hops:
        raise ContractError(f"expected {hops} hop pairs, got {len(memories)}")
    k = memories[0][0].shape[1]
    return mem.read_batch(u0, memories, np.ones((1, k)))


def select_persona(u3, z, personas, params):
    """Pick the persona to express (or None) from u3 and the latent draw."""
    mem = params.persona_memory
    k = len(personas)
    pers_mask = np.ones((1, k))
    alpha = mem.selection_alpha(u3, z, pers_mask)
    choice = int(np.argmax(alpha.data[0]))
    if choice == k:
        return PersonaSelection(alpha=alpha, selected=None, persona_word_ids=set())
    words = {int(t) for t in personas[choice] if int(t) >= N_SPECIALS}
    return PersonaSelection(alpha=alpha, selected=choice, persona_word_ids=words)
