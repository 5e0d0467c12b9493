"""Corpus ingestion, vocabulary/idf construction, weak persona labeling, batching.

The pipeline runs in two stages: `load_corpus` yields examples whose token
lists still hold strings, `build_vocab` fixes the id space, and
`encode_examples` converts to ids while attaching persona labels and copy
positions. Downstream modules only ever see the id-form examples.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .metrics import similarity_s

PAD, UNK, SOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ["<pad>", "<unk>", "<sos>", "<eos>"]

_PUNCT = re.compile(r"([^\w\s])")


def tokenize(text):
    """Lowercase, separate punctuation, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def compute_idf(term_frequencies):
    """idf_i = 1 / (1 + ln(1 + tf_i)); natural log, fixed for reproducibility."""
    idf = {}
    for token, tf in term_frequencies.items():
        if tf < 0:
            raise ValueError(f"negative term frequency for {token!r}: {tf}")
        idf[token] = 1.0 / (1.0 + math.log(1.0 + tf))
    return idf


@dataclass
class Vocabulary:
    word_to_id: dict
    id_to_word: list
    idf: list  # aligned with ids; specials get 0.0
    cap: int

    @property
    def size(self):
        return len(self.id_to_word)

    def encode(self, tokens):
        w2i = self.word_to_id
        return [w2i.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self.id_to_word[i] for i in ids]

    def idf_of(self, token):
        """idf by token string; unknown words (incl. UNK itself) score 0."""
        i = self.word_to_id.get(token)
        return self.idf[i] if i is not None else 0.0

    def idf_table(self):
        return {w: self.idf[i] for w, i in self.word_to_id.items() if i >= len(SPECIAL_TOKENS)}

    def to_json(self):
        return json.dumps(
            {"tokens": self.id_to_word, "idf": self.idf, "specials": SPECIAL_TOKENS},
            ensure_ascii=False,
        )

    def hash(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        tokens = raw["tokens"]
        if tokens[: len(SPECIAL_TOKENS)] != raw["specials"]:
            raise ParseError(f"{path}: vocabulary specials do not lead the token list")
        return cls(
            word_to_id={w: i for i, w in enumerate(tokens)},
            id_to_word=list(tokens),
            idf=[float(x) for x in raw["idf"]],
            cap=len(tokens) - len(SPECIAL_TOKENS),
        )


@dataclass
class DialogueExample:
    """One (context-so-far, response) training unit with its persona set."""

    context: list  # utterances, each a token list
    response: list
    personas: list  # persona sentences, each a token list
    persona_label: int | None = None
    copy_positions: list = field(default_factory=list)

    def __post_init__(self):
        if not self.copy_positions:
            self.copy_positions = [False] * len(self.response)


def label_persona(response_tokens, personas, idf, threshold):
    """Weak label: best tf-idf-similar persona if above threshold, else None.

    copy_positions marks response positions whose token occurs in the labeled
    persona; all false when the label is None. Ties go to the lowest index.
    """
    if not personas:
        return None, [False] * len(response_tokens)
    sims = [similarity_s(response_tokens, p, idf) for p in personas]
    best = max(range(len(sims)), key=lambda j: (sims[j], -j))
    if sims[best] < threshold:
        return None, [False] * len(response_tokens)
    persona_set = set(personas[best])
    return best, [t in persona_set for t in response_tokens]


def _finish_dialogue(personas, turns, out):
    if not turns:
        return
    context = []
    for user, bot in turns:
        context.append(user)
        out.append(
            DialogueExample(
                context=[list(u) for u in context],
                response=list(bot),
                personas=[list(p) for p in personas],
            )
        )
        context.append(bot)


def load_corpus(path, fmt="convai2-text"):
    """Parse a dialogue file into string-token examples, one per chatbot turn."""
    if fmt == "jsonl":
        return _load_jsonl(path)
    if fmt == "convai2-text":
        return _load_convai2(path)
    raise ParseError(f"unknown corpus format {fmt!r}")


def _load_jsonl(path):
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                personas = [tokenize(p) for p in obj["personas"]]
                turns = [(tokenize(t["user"]), tokenize(t["bot"])) for t in obj["turns"]]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: malformed dialogue object ({e})") from None
            _finish_dialogue(personas, turns, examples)
    return examples


_NUMBERED = re.compile(r"^(\d+)\s(.*)$", re.S)


def _load_convai2(path):
    examples = []
    personas, turns = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            m = _NUMBERED.match(line)
            number, body = (int(m.group(1)), m.group(2)) if m else (None, line)
            if body.startswith("your persona:"):
                if turns:  # persona block opens the next dialogue
                    _finish_dialogue(personas, turns, examples)
                    personas, turns = [], []
                personas.append(tokenize(body[len("your persona:"):]))
                continue
            if number is None:
                raise ParseError(f"{path}:{lineno}: expected 'your persona:' or a numbered turn")
            if number == 1 and turns:
                _finish_dialogue(personas, turns, examples)
                personas, turns = [], []
            if "\t" not in body:
                raise ParseError(f"{path}:{lineno}: turn line missing tab separator")
            user, bot = body.split("\t", 1)
            turns.append((tokenize(user), tokenize(bot)))
    _finish_dialogue(personas, turns, examples)
    return examples


def build_vocab(examples, cap):
    """Keep the `cap` most frequent tokens (ties lexicographic), prepend specials."""
    if cap < 1:
        raise ValueError("vocabulary cap must be >= 1")
    counts = Counter()
    for ex in examples:
        for utt in ex.context:
            counts.update(utt)
        counts.update(ex.response)
        for p in ex.personas:
            counts.update(p)
    kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    id_to_word = SPECIAL_TOKENS + [w for w, _ in kept]
    idf_map = compute_idf({w: float(c) for w, c in kept})
    idf = [0.0] * len(SPECIAL_TOKENS) + [idf_map[w] for w, _ in kept]
    return Vocabulary(
        word_to_id={w: i for i, w in enumerate(id_to_word)},
        id_to_word=id_to_word,
        idf=idf,
        cap=cap,
    )


def encode_examples(examples, vocab, threshold=0.2):
    """Convert string-token examples to ids and attach labels/copy positions.

    Labeling runs on the raw strings (so distinct OOV words never alias
    through UNK); copy positions align 1:1 with the response tokens.
    """
    idf = vocab.idf_table()
    out = []
    for ex in examples:
        label, copy = label_persona(ex.response, ex.personas, idf, threshold)
        out.append(
            DialogueExample(
                context=[vocab.encode(u) for u in ex.context],
                response=vocab.encode(ex.response),
                personas=[vocab.encode(p) for p in ex.personas],
                persona_label=label,
                copy_positions=copy,
            )
        )
    return out


@dataclass
class Batch:
    """Padded id arrays plus float masks; padding rows/cells are PAD + mask 0."""

    ctx_ids: np.ndarray        # (B, U, T) int64
    ctx_tok_mask: np.ndarray   # (B, U, T) float64, 1 on real tokens
    ctx_utt_mask: np.ndarray   # (B, U) float64, 1 on real utterances
    resp_in: np.ndarray        # (B, S) int64: SOS + response
    resp_out: np.ndarray       # (B, S) int64: response + EOS
    resp_mask: np.ndarray      # (B, S) float64, 1 on real target positions
    pers_ids: np.ndarray       # (B, K, L) int64
    pers_tok_mask: np.ndarray  # (B, K, L) float64
    pers_mask: np.ndarray      # (B, K) float64, 1 on real personas
    labels: np.ndarray         # (B,) int64 persona index, -1 for None
    copy: np.ndarray           # (B, S) float64 aligned with resp_out

    @property
    def size(self):
        return self.ctx_ids.shape[0]


def make_batch(examples):
    b = len(examples)
    n_utt = max(len(ex.context) for ex in examples)
    t_ctx = max(max(len(u) for u in ex.context) for ex in examples)
    s_resp = max(len(ex.response) for ex in examples) + 1  # room for EOS
    n_pers = max((len(ex.personas) for ex in examples), default=0)
    n_pers = max(n_pers, 1)
    l_pers = max(
        (len(p) for ex in examples for p in ex.personas), default=1
    )
    l_pers = max(l_pers, 1)

    ctx = np.full((b, n_utt, t_ctx), PAD, dtype=np.int64)
    ctx_tok = np.zeros((b, n_utt, t_ctx))
    ctx_utt = np.zeros((b, n_utt))
    rin = np.full((b, s_resp), PAD, dtype=np.int64)
    rout = np.full((b, s_resp), PAD, dtype=np.int64)
    rmask = np.zeros((b, s_resp))
    pers = np.full((b, n_pers, l_pers), PAD, dtype=np.int64)
    pers_tok = np.zeros((b, n_pers, l_pers))
    pmask = np.zeros((b, n_pers))
    labels = np.full(b, -1, dtype=np.int64)
    copy = np.zeros((b, s_resp))

    for i, ex in enumerate(examples):
        for j, utt in enumerate(ex.context):
            ctx[i, j, : len(utt)] = utt
            ctx_tok[i, j, : len(utt)] = 1.0
            ctx_utt[i, j] = 1.0
        n = len(ex.response)
        rin[i, 0] = SOS
        rin[i, 1 : n + 1] = ex.response
        rout[i, :n] = ex.response
        rout[i, n] = EOS
        rmask[i, : n + 1] = 1.0
        for j, p in enumerate(ex.personas):
            pers[i, j, : len(p)] = p
            pers_tok[i, j, : len(p)] = 1.0
            pmask[i, j] = 1.0
        if ex.persona_label is not None:
            labels[i] = ex.persona_label
        copy[i, :n] = [1.0 if c else 0.0 for c in ex.copy_positions]

    return Batch(ctx, ctx_tok, ctx_utt, rin, rout, rmask, pers, pers_tok, pmask, labels, copy)


def make_batches(examples, batch_size, sampler):
    """One epoch of seeded-shuffled batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sampler.permutation(len(examples))
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        batches.append(make_batch(chunk))
    return batches
