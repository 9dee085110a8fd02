"""Adversarial generator training with policy gradients, fixed-length
sampling, same-source pretraining and n-gram novelty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .corpus import CorpusSplit, Token, Utterance, Vocabulary
from .model import Batch, LanguageModel, LSTMState, ModelConfig, build_model, forward, lstm_step
from .numerics import Parameter, Tensor
from .training import (
    EpochLog,
    ScheduledSampling,
    TrainConfig,
    pretrain_then_finetune,
    sgd_step,
    train_mle,
    train_scheduled_sampling,
)


@dataclass
class GANConfig:
    sample_len: int = 20
    n_rollouts: int = 4
    g_steps: int = 1
    d_steps: int = 3
    n_rounds: int = 20
    mle_pretrain_epochs: int = 30
    sample_multiplier: float = 3.0
    seed: int = 0
    g_batch: int = 32
    g_lr: float = 0.1
    d_lr: float = 0.5
    d_batch: int = 64
    d_pretrain_steps: int = 5
    d_sample_cap: int = 512
    disc_hidden: int = 32
    baseline_decay: float = 0.9

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")
        if self.sample_len < 2:
            raise ValueError("sample_len must be >= 2")


@dataclass
class SampleSet:
    sequences: np.ndarray  # (n, sample_len) vocabulary indices
    generator_id: str
    seed: int

    def __len__(self) -> int:
        return len(self.sequences)

    def utterances(self, vocab: Vocabulary) -> list[Utterance]:
        return [Utterance([Token(int(vocab.lang_of[i]), int(i)) for i in row]) for row in self.sequences]

    def save(self, path, vocab: Vocabulary) -> None:
        lines = [" ".join(vocab.itos[i] for i in row) for row in self.sequences]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        length = self.sequences.shape[1] if self.sequences.ndim == 2 else 0
        meta = f"generator={self.generator_id}\tseed={self.seed}\tlength={length}\tcount={len(self)}\n"
        Path(str(path) + ".meta").write_text(meta, encoding="utf-8")


class Scorer(Protocol):
    def score(self, sequences: np.ndarray) -> np.ndarray: ...


# --------------------------------------------------------------------------
# sampling


def _sampling_probs(model: LanguageModel, logits: np.ndarray) -> np.ndarray:
    probs = nx.softmax(logits)
    probs[:, model.eos_pos] = 0.0
    return probs / probs.sum(axis=1, keepdims=True)


def _advance(model: LanguageModel, state, tokens: np.ndarray):
    langs = np.maximum(model.vocab.lang_of[tokens], 0)
    return model.step(state, tokens, langs)


def _continue(model: LanguageModel, state, logits: np.ndarray, steps: int, rng) -> np.ndarray:
    """Draw ``steps`` further tokens for every row, starting from ``logits``."""
    out = np.empty((logits.shape[0], steps), dtype=np.int64)
    for k in range(steps):
        tok = model.out_ids[nx.sample_rows(_sampling_probs(model, logits), rng)]
        out[:, k] = tok
        if k + 1 < steps:
            state, lg = _advance(model, state, tok)
            logits = lg.data
    return out


def sample_sequences(generator: LanguageModel, n: int, length: int, rng: np.random.Generator,
                     batch_size: int = 512, seed: int = -1) -> SampleSet:
    """Ancestral sampling of ``n`` sequences of exactly ``length`` tokens.

    EOS is renormalised away so no sequence ends early.  Each drawn token's
    language selects the next step's upstream cell in the dual model.
    """
    seqs = np.empty((n, length), dtype=np.int64)
    with nx.no_grad():
        for lo in range(0, n, batch_size):
            m = min(batch_size, n - lo)
            state, logits = _advance(generator, generator.zero_state(m), np.full(m, generator.vocab.bos))
            seqs[lo : lo + m] = _continue(generator, state, logits.data, length, rng)
    return SampleSet(seqs, generator.fingerprint(), seed)


# --------------------------------------------------------------------------
# discriminator


class Discriminator:
    """LSTM encoder over the sequence, sigmoid head on the final hidden state."""

    def __init__(self, vocab: Vocabulary, hidden: int = 32, embed: int = 32, rng=None):
        rng = rng if rng is not None else nx.make_rng(0)
        self.vocab = vocab
        self.params = {
            "emb": Parameter("emb", rng.uniform(-0.1, 0.1, (len(vocab), embed))),
            "cell.W": Parameter("cell.W", rng.uniform(-0.05, 0.05, (4 * hidden, embed + hidden))),
            "cell.b": Parameter("cell.b", np.r_[np.zeros(hidden), np.ones(hidden), np.zeros(2 * hidden)]),
            "head.W": Parameter("head.W", rng.uniform(-0.05, 0.05, (1, hidden))),
            "head.b": Parameter("head.b", np.zeros(1)),
        }
        self.hidden = hidden

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def logits(self, sequences: np.ndarray) -> Tensor:
        p = self.params
        N = sequences.shape[0]
        s = LSTMState(Tensor(np.zeros((N, self.hidden))), Tensor(np.zeros((N, self.hidden))))
        for t in range(sequences.shape[1]):
            s = lstm_step(p["cell.W"], p["cell.b"], nx.embed(p["emb"], sequences[:, t]), s)
        return nx.affine(s.h, p["head.W"], p["head.b"])

    def score(self, sequences: np.ndarray) -> np.ndarray:
        """Probability that each sequence is real."""
        with nx.no_grad():
            z = self.logits(np.asarray(sequences)).data[:, 0]
        return 1.0 / (1.0 + np.exp(-z))

    def save(self, path) -> None:
        nx.save_params(path, {k: p.data for k, p in self.params.items()},
                       {"model.kind": "discriminator", "vocab.hash": self.vocab.digest()})


def stream_windows(utterances: Sequence[Utterance], length: int) -> np.ndarray:
    """Consecutive ``length``-token windows of the concatenated token stream."""
    stream = np.fromiter((i for u in utterances for i in u.ids), dtype=np.int64)
    n = len(stream) // length
    return stream[: n * length].reshape(n, length)


@dataclass
class DiscResult:
    accuracy: float
    losses: list[float]


def train_discriminator(disc: Discriminator, real: np.ndarray, fake: np.ndarray | SampleSet, steps: int,
                        rng: np.random.Generator, lr: float = 0.5, batch_size: int = 64,
                        holdout: float = 0.2, grad_clip_norm: float = 5.0) -> DiscResult:
    """Binary cross-entropy training on balanced minibatches.

    ``holdout`` of each class is kept aside for the reported accuracy; the
    held-out rows are chosen by one shared permutation seed, so identical
    class arrays hold out identical rows.
    """
    fake = fake.sequences if isinstance(fake, SampleSet) else np.asarray(fake)
    real = np.asarray(real)
    if len(real) < 2 or len(fake) < 2:
        raise ValueError("discriminator training needs at least two sequences per class")
    split_seed = int(rng.integers(2**63))

    def cut(arr):
        order = nx.make_rng(split_seed).permutation(len(arr))
        k = max(1, int(round(holdout * len(arr))))
        return arr[order[k:]], arr[order[:k]]

    real_tr, real_ho = cut(real)
    fake_tr, fake_ho = cut(fake)
    half = max(1, batch_size // 2)
    params = disc.parameters()
    losses = []
    for _ in range(steps):
        r = real_tr[rng.integers(len(real_tr), size=half)]
        f = fake_tr[rng.integers(len(fake_tr), size=half)]
        x = np.concatenate([r, f])
        y = np.r_[np.ones(half), np.zeros(half)][:, None]
        loss = nx.scale(nx.sigmoid_bce(disc.logits(x), y), 1.0 / len(x))
        nx.backward(loss)
        sgd_step(params, lr, grad_clip_norm)
        losses.append(loss.item())
    correct = np.sum(disc.score(real_ho) > 0.5) + np.sum(disc.score(fake_ho) <= 0.5)
    return DiscResult(float(correct) / (len(real_ho) + len(fake_ho)), losses)


# --------------------------------------------------------------------------
# rewards and policy gradients


def _prefix_states(generator: LanguageModel, sequences: np.ndarray):
    """State and next-token logits after reading BOS + the first t tokens, for t = 0..L-1."""
    N, L = sequences.shape
    states, logits = [], []
    state = generator.zero_state(N)
    tok = np.full(N, generator.vocab.bos)
    for t in range(L):
        state, lg = _advance(generator, state, tok)
        states.append(state)
        logits.append(lg.data)
        tok = sequences[:, t]
    return states, logits


def rollout_rewards(generator: LanguageModel, disc: Scorer, sequences: np.ndarray, n_rollouts: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Per-token rewards for a batch of complete sequences.

    The token at position t (1-based) of length-L sequences is rewarded with
    the mean discriminator score of ``n_rollouts`` generator completions of
    its prefix; the last token gets the score of the sequence itself.
    """
    sequences = np.asarray(sequences)
    N, L = sequences.shape
    rewards = np.empty((N, L))
    with nx.no_grad():
        states, logits = _prefix_states(generator, sequences)
        rep = np.repeat(np.arange(N), n_rollouts)
        for t in range(1, L):
            st = generator.select_state(states[t], rep)
            tail = _continue(generator, st, logits[t][rep], L - t, rng)
            full = np.concatenate([sequences[rep, :t], tail], axis=1)
            rewards[:, t - 1] = disc.score(full).reshape(N, n_rollouts).mean(axis=1)
        rewards[:, L - 1] = disc.score(sequences)
    return rewards


def rollout_reward(generator: LanguageModel, disc: Scorer, prefix, t: int, n_rollouts: int,
                   rng: np.random.Generator, length: int | None = None, exact: bool = False,
                   max_paths: int = 200_000) -> float:
    """Reward of the token at position ``t`` (1-based) of ``prefix``.

    ``exact=True`` replaces Monte-Carlo rollouts by the expectation over
    every completion with non-zero probability (tiny vocabularies only).
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    L = len(prefix) if length is None else length
    if not 1 <= t <= L:
        raise ValueError(f"t must lie in [1, {L}]")
    if t == L:
        return float(disc.score(prefix[None, :L])[0])
    head = prefix[None, :t]
    with nx.no_grad():
        states, logits = _prefix_states(generator, np.concatenate([head, np.zeros((1, 1), dtype=np.int64)], axis=1))
        state, lg = states[t], logits[t]
        if not exact:
            rep = np.zeros(n_rollouts, dtype=np.int64)
            tail = _continue(generator, generator.select_state(state, rep), lg[rep], L - t, rng)
            return float(disc.score(np.concatenate([head[rep], tail], axis=1)).mean())
        paths, weights = head, np.ones(1)
        for k in range(L - t):
            probs = _sampling_probs(generator, lg)
            rows, cols = np.nonzero(probs > 0)
            if len(rows) > max_paths:
                raise ValueError("too many completions to enumerate")
            weights = weights[rows] * probs[rows, cols]
            tok = generator.out_ids[cols]
            paths = np.concatenate([paths[rows], tok[:, None]], axis=1)
            if k + 1 < L - t:
                state, out = _advance(generator, generator.select_state(state, rows), tok)
                lg = out.data
        return float(np.dot(weights, disc.score(paths)))


class RewardBaseline:
    """Exponential moving average of batch-mean rewards."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value: float | None = None

    def current(self, batch_mean: float) -> float:
        return batch_mean if self.value is None else self.value

    def update(self, batch_mean: float) -> float:
        self.value = batch_mean if self.value is None else self.decay * self.value + (1 - self.decay) * batch_mean
        return self.value


def policy_gradient_step(generator: LanguageModel, sequences: np.ndarray, rewards: np.ndarray, lr: float,
                         baseline: float = 0.0, grad_clip_norm: float | None = 5.0) -> float:
    """Ascend ``sum_t (r_t - baseline) log p(x_t | x_<t)``, averaged over sequences.

    Returns the (pre-clipping) gradient norm.
    """
    sequences = np.asarray(sequences)
    N, L = sequences.shape
    vocab = generator.vocab
    inputs = np.concatenate([np.full((N, 1), vocab.bos), sequences[:, :-1]], axis=1).T
    langs = np.maximum(vocab.lang_of[inputs], 0)
    batch = Batch(inputs, langs, generator.out_pos[sequences].T, np.ones((L, N)))
    weights = (np.asarray(rewards, dtype=float) - baseline).T
    loss, _ = forward(generator, batch, weights=weights)
    nx.backward(nx.scale(loss, 1.0 / N))
    return sgd_step(generator.parameters(), lr, grad_clip_norm)


# --------------------------------------------------------------------------
# pipelines


@dataclass
class RoundLog:
    round: int
    disc_accuracy: float
    mean_reward: float
    baseline: float
    dev_ppl: float


ROUND_HEADER = "round\tdisc_accuracy\tmean_reward\tbaseline\tdev_ppl"


def rounds_tsv(rounds: Sequence[RoundLog]) -> str:
    rows = [ROUND_HEADER] + [
        f"{r.round}\t{r.disc_accuracy:.10g}\t{r.mean_reward:.10g}\t{r.baseline:.10g}\t{r.dev_ppl:.10g}" for r in rounds
    ]
    return "\n".join(rows) + "\n"


@dataclass
class GANResult:
    generator: LanguageModel
    discriminator: Discriminator | None
    mle_logs: list[EpochLog] = field(default_factory=list)
    rounds: list[RoundLog] = field(default_factory=list)


def seqgan_train(generator_kind: str, split: CorpusSplit, vocab: Vocabulary, gan: GANConfig,
                 model_config: ModelConfig, train_config: TrainConfig, checkpoint_dir=None) -> GANResult:
    """MLE-pretrain the generator, pretrain the discriminator, then alternate
    policy-gradient and discriminator updates for ``gan.n_rounds`` rounds."""
    from .training import perplexity

    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    gen = build_model(vocab, replace(model_config, kind=generator_kind), seed=gan.seed)
    gen, mle_logs = train_mle(gen, split, train_config.scaled(gan.mle_pretrain_epochs), phase="generator-mle")
    if ckpt is not None:
        gen.save(ckpt / "generator_mle.ckpt")
    result = GANResult(gen, None, mle_logs)
    if gan.n_rounds == 0:
        return result

    rng = nx.make_rng((gan.seed, 7))
    real = stream_windows(split.train, gan.sample_len)
    if len(real) < 2:
        raise ValueError("training split too small for the sample length")
    real = real[: gan.d_sample_cap] if len(real) > gan.d_sample_cap else real
    disc = Discriminator(vocab, gan.disc_hidden, gan.disc_hidden, nx.make_rng((gan.seed, 8)))
    result.discriminator = disc

    def d_round(steps):
        acc = math.nan
        for _ in range(steps):
            fake = sample_sequences(gen, len(real), gan.sample_len, rng)
            n_batches = max(1, 2 * len(real) // gan.d_batch)
            acc = train_discriminator(disc, real, fake, n_batches, rng, lr=gan.d_lr, batch_size=gan.d_batch).accuracy
        return acc

    d_round(gan.d_pretrain_steps)
    baseline = RewardBaseline(gan.baseline_decay)
    for r in range(1, gan.n_rounds + 1):
        rewards_seen = []
        for _ in range(gan.g_steps):
            seqs = sample_sequences(gen, gan.g_batch, gan.sample_len, rng).sequences
            rewards = rollout_rewards(gen, disc, seqs, gan.n_rollouts, rng)
            mean = float(rewards.mean())
            policy_gradient_step(gen, seqs, rewards, gan.g_lr, baseline.current(mean))
            baseline.update(mean)
            rewards_seen.append(mean)
        acc = d_round(gan.d_steps)
        dev = perplexity(gen, split.dev) if split.dev else math.nan
        result.rounds.append(RoundLog(r, acc, float(np.mean(rewards_seen)), baseline.value, dev))
        if ckpt is not None:
            gen.save(ckpt / f"generator_round{r:03d}.ckpt")
            disc.save(ckpt / f"discriminator_round{r:03d}.ckpt")
    return result


def n_pretrain_samples(train_tokens: int, multiplier: float, length: int) -> int:
    """Number of fixed-length sequences holding ``multiplier`` times the training tokens."""
    return int(math.floor(multiplier * train_tokens / length + 0.5))


@dataclass
class SameSourceResult:
    model: LanguageModel
    logs: list[EpochLog]
    gan: GANResult | None = None
    samples: SampleSet | None = None


def same_source_pretrain(lm_kind: str, split: CorpusSplit, vocab: Vocabulary, gan: GANConfig,
                         train_config: TrainConfig, model_config: ModelConfig,
                         pretrain_config: TrainConfig | None = None, generator: str = "seqgan",
                         checkpoint_dir=None, on_best=None) -> SameSourceResult:
    """Train a generator on the training split, sample synthetic text from it,
    pretrain a fresh LM on the samples, then fine-tune on the real split.

    ``generator`` is ``"seqgan"``, ``"naive"`` (pure MLE generator) or
    ``"scheduled"`` (scheduled-sampling generator).
    """
    lm = build_model(vocab, replace(model_config, kind=lm_kind), seed=train_config.seed)
    pretrain_config = pretrain_config or train_config
    if gan.sample_multiplier == 0:
        model, logs = pretrain_then_finetune(lm, [], split, pretrain_config, train_config, on_best=on_best)
        return SameSourceResult(model, logs)
    if generator == "seqgan":
        g = seqgan_train(lm_kind, split, vocab, gan, model_config, train_config, checkpoint_dir)
    elif generator == "naive":
        g = seqgan_train(lm_kind, split, vocab, replace(gan, n_rounds=0), model_config, train_config, checkpoint_dir)
    elif generator == "scheduled":
        gen = build_model(vocab, replace(model_config, kind=lm_kind), seed=gan.seed)
        gen, logs = train_scheduled_sampling(gen, split, train_config.scaled(gan.mle_pretrain_epochs),
                                             ScheduledSampling(), phase="generator-scheduled")
        g = GANResult(gen, None, logs)
    else:
        raise ValueError(f"unknown generator training {generator!r}")
    n_tokens = sum(len(u) for u in split.train)
    n = n_pretrain_samples(n_tokens, gan.sample_multiplier, gan.sample_len)
    samples = sample_sequences(g.generator, n, gan.sample_len, nx.make_rng((gan.seed, 11)), seed=gan.seed)
    model, logs = pretrain_then_finetune(lm, samples.utterances(vocab), split, pretrain_config, train_config,
                                         on_best=on_best)
    return SameSourceResult(model, logs, g, samples)


# --------------------------------------------------------------------------
# diversity


class NoveltyError(ValueError):
    pass


def _ngrams(seq, n: int):
    return {tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)}


def _as_seq(x):
    if isinstance(x, Utterance):
        return x.ids
    return list(x)


def ngram_novelty(generated, train, n: int) -> float:
    """Percentage of generated n-gram types that never occur in ``train``.

    n-grams are collected within each sequence, never across boundaries.
    """
    if n not in (2, 3, 4):
        raise ValueError("n must be 2, 3 or 4")
    gen_seqs = generated.sequences if isinstance(generated, SampleSet) else generated
    gen_types = set().union(*(_ngrams(_as_seq(s), n) for s in gen_seqs)) if len(gen_seqs) else set()
    if not gen_types:
        raise NoveltyError("no n-grams in generated text")
    train_types = set().union(*(_ngrams(_as_seq(s), n) for s in train)) if len(train) else set()
    return 100.0 * len(gen_types - train_types) / len(gen_types)


NGRAM_LABELS = {2: "bigram", 3: "trigram", 4: "quadgram"}


def novelty_tsv(columns: dict[str, object], train) -> str:
    """Rows bigram/trigram/quadgram, one column per generated set."""
    lines = ["\t".join(["ngram", *columns])]
    for n, label in NGRAM_LABELS.items():
        cells = []
        for gen in columns.values():
            try:
                cells.append(f"{ngram_novelty(gen, train, n):.4f}")
            except NoveltyError:
                cells.append("n/a")
        lines.append("\t".join([label, *cells]))
    return "\n".join(lines) + "\n"
