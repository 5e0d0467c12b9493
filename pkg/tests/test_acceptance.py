"""End-to-end acceptance checks. Each test prints one PASS/FAIL line, and the
same lines are echoed in a summary section at the end of the run."""

import time
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import numpy as np
from fastapi.testclient import TestClient

import conftest
from persona_cvae.autodiff import (
    SeededSampler,
    Tensor,
    concat,
    cross_entropy,
    exp,
    gather,
    grad_check,
    log,
    masked_softmax,
    matmul,
    pick,
    reshape,
    sigmoid,
    slice_last,
    slice_rows,
    softmax,
    tanh,
    tmean,
    tsum,
)
from persona_cvae.data import (
    EOS,
    SPECIAL_TOKENS,
    DialogueExample,
    make_batch,
    make_batches,
)
from persona_cvae.decoder import (
    FdsState,
    allowed_mask,
    fds_check_and_apply,
    generate_greedy,
    generate_n,
    sds_step,
    support_masks,
)
from persona_cvae.latent import GaussianParams, kl_divergence
from persona_cvae.metrics import distinct_k, persona_coverage, similarity_s
from persona_cvae.params import ModelParams, TrainConfig
from persona_cvae.service import GenerateResponse, create_app
from persona_cvae.trainer import anneal_weight, total_loss

from toycorpus import AMBIGUOUS, DIALOGUES


def record(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}: {name}"
    if detail:
        line += f" [{detail}]"
    print(line)
    conftest.CRITERION_LINES.append(line)
    assert ok, line


class ReplayNormals:
    """Returns the same draw for a given shape, so losses are re-evaluable."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)
        self._cache = {}

    def standard_normal(self, shape):
        key = tuple(shape)
        if key not in self._cache:
            self._cache[key] = self._rng.standard_normal(key)
        return self._cache[key].copy()


def _rand(sampler, shape, lo=-1.0, hi=1.0):
    return Tensor(sampler.uniform(lo, hi, shape), requires_grad=True)


def _op_gradient_battery(sampler):
    worst = 0.0

    def check(op, *inputs):
        nonlocal worst
        worst = max(worst, grad_check(op, list(inputs)))

    a = _rand(sampler, (3, 4))
    b = _rand(sampler, (3, 4))
    row = _rand(sampler, (4,))
    wa = Tensor(sampler.uniform(-1, 1, (3, 4)))
    check(lambda x, y: tsum((x + y) * wa), a, b)
    check(lambda x, r: tsum((x + r) * wa), a, row)
    check(lambda x, y: tsum((x - y) * wa), a, b)
    check(lambda x, r: tsum((x * r) * wa), a, row)
    m1 = _rand(sampler, (3, 5))
    m2 = _rand(sampler, (5, 2))
    wm = Tensor(sampler.uniform(-1, 1, (3, 2)))
    check(lambda x, y: tsum(matmul(x, y) * wm), m1, m2)
    check(lambda x: tsum(tanh(x) * wa), a)
    check(lambda x: tsum(sigmoid(x) * wa), a)
    check(lambda x: tsum(exp(x) * wa), a)
    pos = _rand(sampler, (3, 4), 0.5, 2.0)
    check(lambda x: tsum(log(x) * wa), pos)
    mask = np.ones((3, 4))
    mask[0, 2] = 0.0
    mask[2, 0] = 0.0
    check(lambda x: tsum(masked_softmax(x, Tensor(mask)) * wa), a)
    check(lambda x: tsum(softmax(x) * wa), a)
    table = _rand(sampler, (6, 3))
    ids = np.array([[0, 2, 5], [5, 1, 4]])
    wg = Tensor(sampler.uniform(-1, 1, (2, 3, 3)))
    check(lambda t: tsum(gather(t, ids) * wg), table)
    logits = _rand(sampler, (4, 5))
    targets = np.array([0, 3, 2, 4])
    wp = Tensor(sampler.uniform(0.5, 1.5, (4,)))
    check(lambda x: tsum(pick(softmax(x), targets) * wp), logits)
    check(lambda x: cross_entropy(softmax(x), targets), logits)
    # weights form a 0/1 inclusion mask over target positions
    ce_w = np.array([1.0, 0.0, 1.0, 1.0])
    check(lambda x: cross_entropy(softmax(x), targets, weights=ce_w), logits)
    wc = Tensor(sampler.uniform(-1, 1, (3, 8)))
    check(lambda x, y: tsum(concat([x, y], axis=-1) * wc), a, b)
    w_sum = Tensor(sampler.uniform(-1, 1, (1, 4)))
    check(lambda x: tsum(tsum(x, axis=0, keepdims=True) * w_sum), a)
    w_mean = Tensor(sampler.uniform(-1, 1, (3, 1)))
    check(lambda x: tsum(tmean(x, axis=1, keepdims=True) * w_mean), a)
    w_rs = Tensor(sampler.uniform(-1, 1, (4, 3)))
    check(lambda x: tsum(reshape(x, (4, 3)) * w_rs), a)
    w_sl = Tensor(sampler.uniform(-1, 1, (3, 2)))
    check(lambda x: tsum(slice_last(x, 1, 3) * w_sl), a)
    w_sr = Tensor(sampler.uniform(-1, 1, (2, 4)))
    check(lambda x: tsum(slice_rows(x, 0, 2) * w_sr), a)
    return worst


def _composed_gradient_battery():
    # the full objective touches every module: bidirectional utterance and
    # context encoders, memory hops, selection head, recognition and prior
    # nets, the type-mixed decoder, and the bag-of-words head
    config = TrainConfig(
        hidden=3, embed_dim=3, mem_dim=2, latent_dim=2, vocab_cap=8,
        hops=2, enc_layers=2, batch_size=2, max_steps=5, seed=11,
    )
    params = ModelParams(config, 9)
    batch = make_batch([
        DialogueExample(
            context=[[4, 5], [6, 4, 8]], response=[6, 7],
            personas=[[6, 5], [5, 7]], persona_label=0,
            copy_positions=[True, False],
        ),
        DialogueExample(
            context=[[7, 8]], response=[4], personas=[[8]],
            persona_label=None, copy_positions=[False],
        ),
    ])
    eps = ReplayNormals(5)

    def objective(*_):
        loss, _components = total_loss(batch, params, 3, eps)
        return loss

    return grad_check(objective, params.parameters())


def test_gradients_match_finite_differences_everywhere():
    start = time.time()
    worst = _op_gradient_battery(SeededSampler(17))
    worst = max(worst, _composed_gradient_battery())
    elapsed = time.time() - start
    record(
        "finite-difference gradient agreement across every op and the full objective",
        worst <= 1e-4 and elapsed < 120.0,
        f"worst {worst:.2e}, {elapsed:.1f}s",
    )


def test_closed_form_kl_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    worst = 0.0
    q = None
    for _ in range(20):
        dim = int(rng.integers(1, 9))
        mu_q = rng.uniform(-1.0, 1.0, dim)
        lv_q = rng.uniform(-1.0, 1.0, dim)
        mu_p = rng.uniform(-1.0, 1.0, dim)
        lv_p = rng.uniform(-1.0, 1.0, dim)
        q = GaussianParams(Tensor(mu_q[None, :]), Tensor(lv_q[None, :]))
        p = GaussianParams(Tensor(mu_p[None, :]), Tensor(lv_p[None, :]))
        closed = kl_divergence(q, p).item()
        # antithetic pairs: one million evaluations with the odd-moment
        # sampling noise cancelled exactly
        eps = rng.standard_normal((500_000, dim))
        x = np.concatenate([eps, -eps]) * np.exp(0.5 * lv_q) + mu_q
        log_q = -0.5 * (np.log(2.0 * np.pi) + lv_q + (x - mu_q) ** 2 / np.exp(lv_q))
        log_p = -0.5 * (np.log(2.0 * np.pi) + lv_p + (x - mu_p) ** 2 / np.exp(lv_p))
        mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
        worst = max(worst, abs(closed - mc))
    self_kl = abs(kl_divergence(q, q).item())
    record(
        "closed-form gaussian kl agrees with a million-sample monte carlo estimate",
        worst <= 5e-3 and self_kl <= 1e-9,
        f"worst |closed-mc| {worst:.2e}, self-kl {self_kl:.1e}",
    )


def test_attention_selection_and_mixture_are_proper_distributions():
    rng = np.random.default_rng(7)
    models = []
    for _ in range(10):
        config = TrainConfig(
            hidden=int(rng.integers(2, 5)),
            embed_dim=int(rng.integers(2, 5)),
            mem_dim=int(rng.integers(2, 5)),
            latent_dim=int(rng.integers(1, 4)),
            vocab_cap=50,
            hops=int(rng.integers(1, 4)),
            enc_layers=1,
            k_max=5,
            seed=int(rng.integers(0, 10_000)),
        )
        models.append(ModelParams(config, int(rng.integers(8, 16))))

    worst_sum = 0.0
    partition_exact = True
    for trial in range(1000):
        params = models[trial % len(models)]
        config = params.config
        vocab_size = params.decoder.vocab_size
        b = int(rng.integers(1, 4))
        k = int(rng.integers(1, 6))
        length = int(rng.integers(1, 4))
        pers_ids = rng.integers(4, vocab_size, (b, k, length))
        tok_mask = rng.random((b, k, length)) < 0.8
        tok_mask[..., 0] = True
        pers_mask = np.arange(k)[None, :] < rng.integers(0, k + 1, b)[:, None]

        u0 = Tensor(rng.uniform(-1, 1, (b, config.mem_dim)))
        pairs = params.persona_memory.build_pairs(pers_ids, tok_mask)
        readout = params.persona_memory.read_batch(u0, pairs, pers_mask)
        for prob in readout.prob:
            worst_sum = max(worst_sum, float(np.abs(prob.data.sum(axis=1) - 1.0).max()))

        z = Tensor(rng.uniform(-1, 1, (b, config.latent_dim)))
        alpha = params.persona_memory.selection_alpha(readout.u_final, z, pers_mask)
        worst_sum = max(worst_sum, float(np.abs(alpha.data.sum(axis=1) - 1.0).max()))

        n_words = int(rng.integers(0, vocab_size - 4))
        word_ids = set(
            int(w) for w in rng.choice(np.arange(4, vocab_size), n_words, replace=False)
        )
        per, other = support_masks(vocab_size, word_ids)
        allowed = allowed_mask(vocab_size)
        if np.any(per & other) or not np.array_equal(per | other, allowed):
            partition_exact = False

        s = Tensor(rng.uniform(-1, 1, (1, config.hidden)))
        u3_row = Tensor(rng.uniform(-1, 1, (1, config.mem_dim)))
        prev = int(rng.integers(0, vocab_size))
        step = sds_step(s, prev, u3_row, word_ids, params)
        dist = step.final_dist.data[0]
        worst_sum = max(worst_sum, abs(float(dist.sum()) - 1.0))
        if np.any(dist[~allowed] != 0.0):
            partition_exact = False

    record(
        "memory attention, persona selection, and the word mixture each sum to one "
        "with exact disjoint supports",
        worst_sum <= 1e-6 and partition_exact,
        f"worst |sum-1| {worst_sum:.2e} over 1000 configurations",
    )


def test_metric_scores_match_bruteforce_oracles():
    rng = np.random.default_rng(99)
    alphabet = list("abcdefgh")
    exact = True
    for _ in range(100):
        responses = [
            [alphabet[j] for j in rng.integers(0, len(alphabet), int(rng.integers(1, 7)))]
            for _ in range(int(rng.integers(1, 6)))
        ]
        personas = [
            [alphabet[j] for j in rng.integers(0, len(alphabet), int(rng.integers(1, 5)))]
            for _ in range(int(rng.integers(1, 4)))
        ]
        idf = {w: float(rng.uniform(0.05, 1.0)) for w in alphabet}
        for k in (1, 2):
            grams, total = set(), 0
            for r in responses:
                total += len(r)
                grams.update(tuple(r[i:i + k]) for i in range(len(r) - k + 1))
            if distinct_k(responses, k) != len(grams) / total:
                exact = False
        best_total = 0.0
        for r in responses:
            best = 0.0
            for p in personas:
                shared = set(r) & set(p)
                score = sum(idf[w] for w in shared) / len(shared) if shared else 0.0
                best = max(best, score)
            best_total += best
        if persona_coverage(responses, personas, idf) != best_total / len(responses):
            exact = False

    hand = (
        distinct_k([["a", "b", "c"]], 1) == 1.0
        and distinct_k([["a", "b"], ["a", "b"]], 1) == 2 / 4
        and distinct_k([["a", "b"], ["a", "b"]], 2) == 1 / 4
        and similarity_s(["x"], ["y"], {"x": 1.0}) == 0.0
        and similarity_s(["w", "q"], ["w"], {"w": 0.6}) == 0.6
        and similarity_s(["a", "b"], ["b", "a"], {"a": 1.0, "b": 0.5}) == (1.0 + 0.5) / 2
        and persona_coverage([["x", "y"]], [["x", "y"]], {"x": 0.4, "y": 0.6})
        == (0.4 + 0.6) / 2
        and persona_coverage([["u"], ["v"]], [["u"], ["v"]], {"u": 0.2, "v": 0.4})
        == (0.2 + 0.4) / 2
    )
    record(
        "distinct-k and persona coverage match independent brute-force oracles "
        "and hand-computed cases bit for bit",
        exact and hand,
        "100 random fixtures",
    )


def test_kl_weight_anneals_linearly_to_one():
    ok = (
        anneal_weight(0) == 0.0
        and anneal_weight(5000) == 0.5
        and anneal_weight(10000) == 1.0
        and anneal_weight(123456) == 1.0
    )
    record("kl weight ramps 0 to 1 over the annealing horizon and stays there", ok)


def test_overfit_training_reconstructs_the_toy_corpus(trained_toy):
    examples = trained_toy.setup.examples
    # corpus-level reconstruction NLL per token under the trained model
    recon_sum, token_sum = 0.0, 0.0
    sampler = ReplayNormals(123)
    for batch in make_batches(examples, trained_toy.config.batch_size,
                              SeededSampler(9)):
        _, comps = total_loss(batch, trained_toy.params, 10**9, sampler)
        recon_sum += comps["recon"] * batch.size
        token_sum += comps["tokens"]
    per_token = recon_sum / token_sum

    hits = 0
    for ex in examples:
        toks, _, _ = generate_greedy(
            ex.context, ex.personas, trained_toy.params,
            max_len=trained_toy.config.max_len, sds_on=True, fds_on=False,
            label=ex.persona_label,
        )
        if toks and toks[-1] == EOS:
            toks = toks[:-1]
        hits += int(toks == ex.response)
    rate = hits / len(examples)
    record(
        "overfit run reaches low reconstruction NLL and reproduces the corpus greedily",
        per_token <= 0.5 and rate >= 0.9 and trained_toy.elapsed <= 600.0,
        f"{per_token:.4f} nats/token, {rate:.1%} reproduced, "
        f"{trained_toy.elapsed:.0f}s to train",
    )


def test_latent_sampling_is_more_diverse_than_repeated_greedy(trained_toy):
    examples = trained_toy.setup.examples
    contexts = [examples[3 * first] for first, _ in AMBIGUOUS]
    max_len = trained_toy.config.max_len
    sampled_scores, greedy_scores = [], []
    for s in range(5):
        sampled, repeated = [], []
        for ex in contexts:
            res = generate_n(ex.context, ex.personas, 10, trained_toy.params,
                             SeededSampler(1000 + s), max_len=max_len)
            sampled.extend(res.responses)
            g, _, _ = generate_greedy(ex.context, ex.personas, trained_toy.params,
                                      max_len=max_len)
            repeated.extend([g] * 10)
        sampled_scores.append(distinct_k(sampled, 2))
        greedy_scores.append(distinct_k(repeated, 2))
    mean_sampled = float(np.mean(sampled_scores))
    mean_greedy = float(np.mean(greedy_scores))
    record(
        "ten latent samples beat the repeated greedy response on distinct-2",
        mean_sampled > mean_greedy,
        f"{mean_sampled:.3f} vs {mean_greedy:.3f} over 5 seeds",
    )


def test_word_mixture_raises_persona_coverage(trained_toy):
    vocab = trained_toy.setup.vocab
    idf = vocab.idf_table()
    examples = trained_toy.setup.examples
    contexts = [examples[3 * d] for d in range(len(DIALOGUES))]
    max_len = trained_toy.config.max_len
    on_scores, off_scores = [], []
    for s in range(5):
        for sds_on, acc in ((True, on_scores), (False, off_scores)):
            total = 0.0
            for ex in contexts:
                res = generate_n(ex.context, ex.personas, 3, trained_toy.params,
                                 SeededSampler(2000 + s), max_len=max_len,
                                 sds_on=sds_on, fds_on=False)
                responses = [
                    [w for w in vocab.decode(ids) if w not in SPECIAL_TOKENS]
                    for ids in res.responses
                ]
                personas = [vocab.decode(p) for p in ex.personas]
                total += persona_coverage(responses, personas, idf)
            acc.append(total / len(contexts))
    mean_on = float(np.mean(on_scores))
    mean_off = float(np.mean(off_scores))
    record(
        "persona coverage is higher with the word mixture on than off",
        mean_on > mean_off,
        f"{mean_on:.3f} vs {mean_off:.3f} over 5 seeds",
    )


def test_forced_decoding_injects_the_selected_persona_contiguously(trained_toy):
    examples = trained_toy.setup.examples
    max_len = trained_toy.config.max_len
    fired = 0
    contiguous = True
    for i, ex in enumerate(examples):
        res = generate_n(ex.context, ex.personas, 2, trained_toy.params,
                         SeededSampler(50 + i), max_len=max_len)
        for toks, sel, used in zip(res.responses, res.selected_persona,
                                   res.fds_used):
            if not used:
                continue
            fired += 1
            persona = list(ex.personas[sel])
            if not any(toks[j:j + len(persona)] == persona
                       for j in range(len(toks))):
                contiguous = False

    # a completed forcing pass never rearms within the same decode
    state = FdsState(persona=[4, 5, 6], m=1)
    decoded, forced = [4], []
    nxt = fds_check_and_apply(decoded, state.persona, state)
    while nxt is not None:
        forced.append(nxt)
        decoded.append(nxt)
        nxt = fds_check_and_apply(decoded, state.persona, state)
    once_only = (
        forced == [5, 6]
        and state.used
        and fds_check_and_apply(decoded + [4], state.persona, state) is None
    )
    record(
        "forced persona decoding emits the selected persona contiguously and "
        "at most once per response",
        fired > 0 and contiguous and once_only,
        f"{fired} activations observed",
    )


def test_service_is_deterministic_under_concurrency(trained_toy):
    app = create_app(trained_toy.params, trained_toy.setup.vocab)
    payload = {
        "context": ["what do you do for a living ?"],
        "personas": ["i play soccer every day .", "i have two dogs ."],
        "n": 3,
        "seed": 41,
    }
    with TestClient(app) as client:
        serial = client.post("/api/generate", json=payload)
        schema_ok = serial.status_code == 200
        if schema_ok:
            jsonschema.validate(serial.json(), GenerateResponse.model_json_schema())
        with ThreadPoolExecutor(max_workers=8) as pool:
            bodies = list(pool.map(
                lambda _: client.post("/api/generate", json=payload).content,
                range(8),
            ))
    identical = all(body == serial.content for body in bodies)
    record(
        "eight concurrent seeded generation requests match the serial response "
        "byte for byte and validate against the published schema",
        schema_ok and identical,
        "n=3, seed=41",
    )
