"""Automatic evaluation: Distinct-K diversity and idf-weighted persona coverage."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MetricUndefinedError

# special tokens never count toward any metric
_SPECIAL_STRINGS = frozenset({"<pad>", "<unk>", "<sos>", "<eos>"})
_SPECIAL_IDS = frozenset({0, 1, 2, 3})


def _is_special(t):
    if isinstance(t, str):
        return t in _SPECIAL_STRINGS
    try:
        return int(t) in _SPECIAL_IDS
    except (TypeError, ValueError):
        return False


def _clean(tokens):
    return [t for t in tokens if not _is_special(t)]


def distinct_k(responses, k):
    """Distinct k-grams pooled over all responses, scaled by total pooled tokens."""
    if k not in (1, 2):
        raise MetricUndefinedError(f"distinct_k supports k in {{1, 2}}, got {k}")
    grams = set()
    total_tokens = 0
    for resp in responses:
        toks = _clean(resp)
        total_tokens += len(toks)
        for i in range(len(toks) - k + 1):
            grams.add(tuple(toks[i : i + k]))
    if total_tokens == 0:
        raise MetricUndefinedError("distinct_k is undefined on empty responses")
    return len(grams) / total_tokens


def similarity_s(response, persona, idf):
    """Mean idf over the word types shared by response and persona (0 if none)."""
    shared = set(_clean(response)) & set(_clean(persona))
    if not shared:
        return 0.0
    return sum(idf.get(w, 0.0) for w in shared) / len(shared)


def persona_coverage(responses, personas, idf):
    """Mean over responses of the best-matching persona similarity."""
    if len(personas) == 0:
        raise MetricUndefinedError("persona_coverage needs at least one persona")
    if len(responses) == 0:
        raise MetricUndefinedError("persona_coverage needs at least one response")
    total = 0.0
    for resp in responses:
        total += max(similarity_s(resp, p, idf) for p in personas)
    return total / len(responses)


@dataclass
class TurnDetail:
    """Per-response best persona match within one evaluated turn."""

    similarities: list  # responses x personas
    best_persona: list  # argmax persona index per response
    shared_words: list  # shared word-type set with the best persona, per response


@dataclass
class MetricReport:
    distinct_1: float
    distinct_2: float
    persona_coverage: float
    n: int
    turns: list = field(default_factory=list)

    def to_dict(self):
        return {
            "distinct_1": self.distinct_1,
            "distinct_2": self.distinct_2,
            "persona_coverage": self.persona_coverage,
            "n": self.n,
        }


def evaluate(responses_per_turn, personas_per_turn, idf, n, pool="corpus", collect_details=False):
    """Score a set of turns.

    responses_per_turn: list over turns of N token lists.
    pool="corpus" pools k-grams over every generated token (default);
    pool="turn" averages per-turn distinct ratios instead.
    """
    if len(responses_per_turn) != len(personas_per_turn):
        raise MetricUndefinedError("responses and personas must cover the same turns")
    if not responses_per_turn:
        raise MetricUndefinedError("no turns to evaluate")

    if pool == "corpus":
        pooled = [r for turn in responses_per_turn for r in turn]
        d1 = distinct_k(pooled, 1)
        d2 = distinct_k(pooled, 2)
    elif pool == "turn":
        d1 = sum(distinct_k(t, 1) for t in responses_per_turn) / len(responses_per_turn)
        d2 = sum(distinct_k(t, 2) for t in responses_per_turn) / len(responses_per_turn)
    else:
        raise MetricUndefinedError(f"unknown pooling mode {pool!r}")

    coverage = 0.0
    details = []
    for responses, personas in zip(responses_per_turn, personas_per_turn):
        coverage += persona_coverage(responses, personas, idf)
        if collect_details:
            sims = [[similarity_s(r, p, idf) for p in personas] for r in responses]
            best = [row.index(max(row)) for row in sims]
            shared = [
                sorted(set(_clean(r)) & set(_clean(personas[j])))
                for r, j in zip(responses, best)
            ]
            details.append(TurnDetail(similarities=sims, best_persona=best, shared_words=shared))
    coverage /= len(responses_per_turn)

    return MetricReport(
        distinct_1=d1, distinct_2=d2, persona_coverage=coverage, n=n, turns=details
    )


def render_table(report):
    """Plain-text table with the three automatic metric columns."""
    header = f"{'N':>4}  {'Dtinct-1':>9}  {'Dtinct-2':>9}  {'P. Cover':>9}"
    row = (
        f"{report.n:>4}  {report.distinct_1:>9.4f}  "
        f"{report.distinct_2:>9.4f}  {report.persona_coverage:>9.4f}"
    )
    return header + "\n" + row
