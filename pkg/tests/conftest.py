"""Shared fixtures: the toy corpus, plus models trained on it once per session."""

from __future__ import annotations

import time
from types import SimpleNamespace

import pytest

from persona_cvae.data import build_vocab, encode_examples, load_corpus
from persona_cvae.trainer import train

from toycorpus import toy_config, write_toy_corpus

# acceptance tests append one PASS/FAIL line each; printed at the end of the run
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.line(line)


@pytest.fixture(scope="session")
def toy_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    path = write_toy_corpus(str(root / "toy.jsonl"))
    raw = load_corpus(path, fmt="jsonl")
    vocab = build_vocab(raw, cap=300)
    config = toy_config()
    examples = encode_examples(raw, vocab, threshold=config.label_threshold)
    return SimpleNamespace(path=path, raw=raw, vocab=vocab, examples=examples)


@pytest.fixture(scope="session")
def trained_toy(toy_setup, tmp_path_factory):
    """Overfit model used by the slow behavioural tests; trains once."""
    out = tmp_path_factory.mktemp("toyrun")
    config = toy_config()
    start = time.time()
    params, history = train(config, toy_setup.examples, toy_setup.vocab,
                            out_dir=str(out))
    elapsed = time.time() - start
    return SimpleNamespace(
        params=params, history=history, config=config, elapsed=elapsed,
        ckpt=str(out / "model.ckpt"), vocab_path=str(out / "vocab.json"),
        setup=toy_setup,
    )


@pytest.fixture(scope="session")
def collapsed_toy(toy_setup):
    """Same run with annealing disabled and the bag-of-words term off."""
    config = toy_config(anneal_on=False, w_bow=0.0)
    params, history = train(config, toy_setup.examples, toy_setup.vocab)
    return SimpleNamespace(params=params, history=history, config=config)
