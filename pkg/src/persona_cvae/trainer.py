"""Objective assembly, the optimization loop, and checkpoint serialization.

The objective is the annealed negative ELBO plus three auxiliary terms, all
normalized per example: reconstruction NLL under the type mixture, KL between
recognition and prior, persona-selection cross-entropy, per-token type
supervision, and the bag-of-words loss. A fixed seed pins initialization,
shuffling, and every latent draw, so two runs produce identical loss curves.
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .autodiff import SeededSampler, Tensor, cross_entropy
from .data import Vocabulary, make_batches
from .decoder import teacher_forced_losses
from .encoders import encode_context_batch
from .errors import CheckpointError, ConfigError, ContractError, TrainingDiverged
from .latent import bow_loss_batch, kl_divergence, reparameterize
from .params import ModelParams, TrainConfig

CKPT_MAGIC = b"PCVAECKPT\n"
CKPT_VERSION = 1

LOG_FIELDS = (
    "step", "total", "recon", "recon_per_token", "kl", "anneal_w",
    "select", "type", "bow", "tokens",
)


def anneal_weight(step, anneal_steps=10000):
    """Linear KL warmup: 0 at step 0, 1 from anneal_steps onward."""
    if anneal_steps <= 0:
        raise ConfigError(f"anneal_steps must be positive, got {anneal_steps}")
    if step < 0:
        raise ContractError(f"step must be nonnegative, got {step}")
    return min(step / anneal_steps, 1.0)


def _encode_responses(batch, params):
    """Sentence-encode the gold responses (recognition network input)."""
    ids = batch.resp_in[:, 1:]  # response without the SOS shift
    mask = batch.resp_mask[:, 1:].copy()
    if ids.shape[1] == 0:
        ids = np.zeros((batch.size, 1), dtype=np.int64)
        mask = np.ones((batch.size, 1))
    else:
        mask[mask.sum(axis=1) < 1.0, 0] = 1.0  # keep empty rows encodable
    return params.sentence_encoder.run_batch(ids, mask)


def total_loss(batch, params, step, sampler):
    """One forward pass; returns (loss Tensor, float components per example)."""
    cfg = params.config
    enc = encode_context_batch(
        batch.ctx_ids, batch.ctx_tok_mask, batch.ctx_utt_mask,
        params.sentence_encoder, params.context_encoder,
    )
    y = _encode_responses(batch, params)
    pairs = params.persona_memory.build_pairs(batch.pers_ids, batch.pers_tok_mask)
    u3 = params.persona_memory.read_batch(enc.u0, pairs, batch.pers_mask).u_final

    q = params.latent_nets.recognition(enc.h_context, y, u3)
    pri = params.latent_nets.prior(enc.h_context, u3)
    z = reparameterize(q, sampler)
    kl = kl_divergence(q, pri)

    k = batch.pers_mask.shape[1]
    # the None class sits after the k persona columns
    targets = np.where(batch.labels >= 0, batch.labels, k)
    alpha = params.persona_memory.selection_alpha(u3, z.z, batch.pers_mask)
    select = cross_entropy(alpha, targets)

    recon, type_ce, tokens = teacher_forced_losses(batch, enc.h_context, u3, z.z, params)
    bow = bow_loss_batch(
        params.latent_nets.bow_logits(enc.h_context, u3, z.z),
        batch.resp_out, batch.resp_mask,
    )

    w = anneal_weight(step, cfg.anneal_steps) if cfg.anneal_on else 1.0
    total = (
        recon
        + kl * Tensor(w * cfg.w_kl)
        + select * Tensor(cfg.w_select)
        + type_ce * Tensor(cfg.w_type)
        + bow * Tensor(cfg.w_bow)
    ) * Tensor(1.0 / batch.size)

    b = float(batch.size)
    components = {
        "total": total.item(),
        "recon": recon.item() / b,
        "recon_per_token": recon.item() / max(tokens, 1.0),
        "kl": kl.item() / b,
        "anneal_w": w,
        "select": select.item() / b,
        "type": type_ce.item() / b,
        "bow": bow.item() / b,
        "tokens": tokens,
    }
    return total, components


def _check_finite(components, step):
    for name in ("recon", "kl", "select", "type", "bow", "total"):
        if not np.isfinite(components[name]):
            raise TrainingDiverged(
                f"non-finite {name} component at step {step}: {components[name]}"
            )


def clip_global_norm(tensors, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm


class Adam:
    """Standard Adam with bias correction; consumes and clears .grad."""

    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.zero_grad()


def evaluate_loss(params, examples, config, seed=100003):
    """Deterministic mean per-example loss at full KL weight."""
    sampler = SeededSampler(seed)
    total, n = 0.0, 0
    for i, batch in enumerate(make_batches(examples, config.batch_size, sampler.child(0))):
        _, comps = total_loss(batch, params, config.anneal_steps, sampler.child(i + 1))
        total += comps["total"] * batch.size
        n += batch.size
    return total / max(n, 1)


def train(config, examples, vocab, *, val_examples=None, out_dir=None,
          log_path=None, progress=None):
    """Optimize a fresh model on encoded examples; returns (params, history).

    out_dir receives periodic and final checkpoints plus vocab.json;
    log_path receives the per-step component CSV.
    """
    if not examples:
        raise ContractError("training corpus is empty")
    params = ModelParams(config, vocab.size)
    root = SeededSampler(config.seed)
    data_sampler = root.child(1)
    latent_sampler = root.child(2)
    tensors = params.parameters()
    opt = Adam(tensors, config.lr)
    history = []
    best_val, bad_evals = float("inf"), 0
    step = 0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        vocab.save(os.path.join(out_dir, "vocab.json"))
    while step < config.max_steps:
        for batch in make_batches(examples, config.batch_size, data_sampler):
            loss, comps = total_loss(batch, params, step, latent_sampler)
            _check_finite(comps, step)
            loss.backward()
            clip_global_norm(tensors, config.clip_norm)
            opt.step()
            step += 1
            comps["step"] = step
            history.append(comps)
            if progress is not None and step % config.log_every == 0:
                progress(comps)
            if out_dir and config.ckpt_every and step % config.ckpt_every == 0 \
                    and step < config.max_steps:
                save_checkpoint(params, os.path.join(out_dir, f"step_{step:06d}.ckpt"),
                                vocab.hash())
            if step >= config.max_steps:
                break
        if val_examples:
            val = evaluate_loss(params, val_examples, config)
            if val < best_val - 1e-6:
                best_val, bad_evals = val, 0
            else:
                bad_evals += 1
                if bad_evals >= config.patience:
                    break
    if out_dir:
        save_checkpoint(params, os.path.join(out_dir, "model.ckpt"), vocab.hash())
    if log_path:
        write_log(history, log_path)
    return params, history


def write_log(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


# checkpoint format: magic, u32 header length, header JSON, float32 LE blobs


def save_checkpoint(params, path, vocab_hash):
    table = params.named()
    header = {
        "format_version": CKPT_VERSION,
        "config": params.config.to_dict(),
        "vocab_size": params.vocab_size,
        "vocab_hash": vocab_hash,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in table.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(np.uint32(len(blob)).astype("<u4").tobytes())
        f.write(blob)
        for t in table.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, expected_vocab_hash=None):
    """Rebuild ModelParams from a checkpoint; returns (params, header)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a model checkpoint")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"{path}: truncated before header")
    (hlen,) = np.frombuffer(raw[pos : pos + 4], dtype="<u4")
    pos += 4
    if len(raw) < pos + int(hlen):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + int(hlen)].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    pos += int(hlen)
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {header['vocab_hash'][:12]}..., "
            f"expected {expected_vocab_hash[:12]}...)"
        )
    config = TrainConfig.from_dict(header["config"])
    params = ModelParams(config, header["vocab_size"])
    table = params.named()
    stored = {e["name"] for e in header["tensors"]}
    missing = sorted(set(table) - stored)
    extra = sorted(stored - set(table))
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        tensor = table[name]
        if tensor.data.shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {shape}, expected {tensor.data.shape}"
            )
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if len(raw) < pos + nbytes:
            raise CheckpointError(f"{path}: truncated while reading tensor {name}")
        flat = np.frombuffer(raw[pos : pos + nbytes], dtype="<f4")
        tensor.data = flat.astype(np.float64).reshape(shape)
        pos += nbytes
    return params, header


def load_model(ckpt_path, vocab_path=None):
    """Load a checkpoint together with its vocabulary; returns (params, vocab).

    The vocabulary defaults to vocab.json next to the checkpoint and must
    hash to the value recorded when the checkpoint was written.
    """
    if vocab_path is None:
        vocab_path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)),
                                  "vocab.json")
    try:
        vocab = Vocabulary.load(vocab_path)
    except OSError as e:
        raise CheckpointError(f"cannot read vocabulary {vocab_path}: {e}") from None
    params, _ = load_checkpoint(ckpt_path, expected_vocab_hash=vocab.hash())
    return params, vocab
