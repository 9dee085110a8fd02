import itertools

import numpy as np
import pytest

import reference as ref
from conftest import random_model, utter
from cslm import corpus as C
from cslm import numerics as nx
from cslm import seqgan as G
from cslm import training as T
from cslm.model import ModelConfig, build_model


class ConstScorer:
    def __init__(self, value=0.5):
        self.value, self.calls = value, 0

    def score(self, seqs):
        self.calls += 1
        return np.full(len(seqs), self.value)


@pytest.fixture(scope="module")
def synth_200():
    toks, _ = C.tokenize_lines(C.synth_corpus(11, 200, 0.2, (20, 20), 6.0))
    v = C.build_vocabulary(toks)
    return v, C.split_corpus(C.encode_all(toks, v), 0)


def test_sample_zero_and_shape(tiny_vocab):
    m = random_model(tiny_vocab, "dual")
    assert len(G.sample_sequences(m, 0, 5, nx.make_rng(0))) == 0
    s = G.sample_sequences(m, 7, 5, nx.make_rng(0))
    assert s.sequences.shape == (7, 5)
    assert set(s.sequences.ravel().tolist()) <= set(tiny_vocab.scorable.tolist()) - {tiny_vocab.eos}


def test_one_hot_generator_repeats(tiny_vocab):
    m = random_model(tiny_vocab, "rnnlm")
    target = tiny_vocab.itos.index("b")
    m.params["out.b"].data[m.out_pos[target]] = 1e4
    s = G.sample_sequences(m, 20, 4, nx.make_rng(1))
    assert np.all(s.sequences == target)


def test_sampling_reproducible(tiny_vocab):
    m = random_model(tiny_vocab, "dual")
    a = G.sample_sequences(m, 30, 6, nx.make_rng(5)).sequences
    b = G.sample_sequences(m, 30, 6, nx.make_rng(5)).sequences
    assert np.array_equal(a, b)


def test_sampled_marginals_match_enumeration():
    # 4 samplable tokens: UNK0, a, UNK1, one Han char
    v = C.Vocabulary(["a"], ["一"])
    m = random_model(v, "dual", hidden=4, embed=4, seed=3, scale=1.0)
    L, n = 3, 10_000
    toks = [i for i in v.scorable.tolist() if i != v.eos]
    marg = np.zeros((L, len(toks)))
    for path in itertools.product(range(len(toks)), repeat=L):
        p, prefix = 1.0, []
        for t, k in enumerate(path):
            p *= ref.sampling_dist(m, prefix)[ref.position(v, toks[k])]
            prefix.append(toks[k])
        for t, k in enumerate(path):
            marg[t, k] += p
    s = G.sample_sequences(m, n, L, nx.make_rng(2)).sequences
    emp = np.stack([[np.mean(s[:, t] == tok) for tok in toks] for t in range(L)])
    assert np.allclose(marg.sum(axis=1), 1.0)
    assert np.abs(emp - marg).max() < 0.02


def test_stream_windows():
    v = C.Vocabulary(["a", "b"], [])
    utts = [utter(v, "a b a"), utter(v, "b b")]
    w = G.stream_windows(utts, 2)
    assert w.tolist() == [[4, 5], [4, 5]]


def test_disc_identical_classes_half_accuracy(tiny_vocab):
    rng = nx.make_rng(0)
    seqs = rng.choice(tiny_vocab.scorable[:-1], size=(100, 5))
    disc = G.Discriminator(tiny_vocab, 8, 8, nx.make_rng(1))
    res = G.train_discriminator(disc, seqs, seqs.copy(), 30, rng, batch_size=32)
    assert res.accuracy == pytest.approx(0.5, abs=0.05)


def test_disc_separable_classes():
    v = C.Vocabulary(["a"], ["一"])
    real = np.full((100, 5), v.itos.index("a"))
    fake = np.full((100, 5), v.itos.index("一"))
    disc = G.Discriminator(v, 8, 8, nx.make_rng(1))
    res = G.train_discriminator(disc, real, fake, 60, nx.make_rng(0), batch_size=32)
    assert res.accuracy > 0.95
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])


def test_const_disc_rewards_are_constant(tiny_vocab):
    m = random_model(tiny_vocab, "dual")
    seqs = G.sample_sequences(m, 6, 4, nx.make_rng(0)).sequences
    r = G.rollout_rewards(m, ConstScorer(0.5), seqs, 3, nx.make_rng(1))
    assert np.all(r == 0.5)
    for t in range(1, 5):
        assert G.rollout_reward(m, ConstScorer(0.5), seqs[0], t, 3, nx.make_rng(2)) == 0.5


def test_last_position_needs_single_disc_call(tiny_vocab):
    m = random_model(tiny_vocab, "dual")
    disc = ConstScorer(0.25)
    assert G.rollout_reward(m, disc, [4, 5, 6], 3, 10, nx.make_rng(0)) == 0.25
    assert disc.calls == 1


def test_rollout_rewards_batch_matches_single(tiny_vocab):
    m = random_model(tiny_vocab, "rnnlm", seed=6)
    disc = G.Discriminator(tiny_vocab, 4, 4, nx.make_rng(3))
    seqs = G.sample_sequences(m, 3, 3, nx.make_rng(0)).sequences
    batch = G.rollout_rewards(m, disc, seqs, 400, nx.make_rng(1))
    exact = [[G.rollout_reward(m, disc, s, t, 1, None, exact=True) for t in (1, 2, 3)] for s in seqs]
    assert np.allclose(batch, exact, atol=0.03)
    assert np.allclose(batch[:, -1], np.array(exact)[:, -1], atol=1e-15)


def test_baseline_ema():
    b = G.RewardBaseline(0.9)
    assert b.current(0.4) == 0.4
    b.update(0.4)
    b.update(1.4)
    assert b.value == pytest.approx(0.5)


def test_policy_gradient_zero_when_centered(tiny_vocab):
    m = random_model(tiny_vocab, "dual")
    before = m.fingerprint()
    seqs = G.sample_sequences(m, 4, 3, nx.make_rng(0)).sequences
    norm = G.policy_gradient_step(m, seqs, np.full((4, 3), 0.7), lr=1.0, baseline=0.7)
    assert norm == 0.0 and m.fingerprint() == before


def test_policy_gradient_shift_invariance(tiny_vocab):
    seqs = G.sample_sequences(random_model(tiny_vocab, "dual"), 4, 3, nx.make_rng(0)).sequences
    r = nx.make_rng(1).random((4, 3))
    a, b = random_model(tiny_vocab, "dual"), random_model(tiny_vocab, "dual")
    G.policy_gradient_step(a, seqs, r, lr=0.5, baseline=0.2)
    G.policy_gradient_step(b, seqs, r + 3.0, lr=0.5, baseline=3.2)
    for k in a.params:
        assert np.allclose(a.params[k].data, b.params[k].data, atol=1e-14)


def test_novelty_hand_cases():
    assert G.ngram_novelty([[1, 2, 4]], [[1, 2, 3]], 2) == 50.0
    assert G.ngram_novelty([[1, 2, 3]], [[1, 2, 3]], 2) == 0.0
    assert G.ngram_novelty([[7, 8, 9]], [[1, 2, 3]], 3) == 100.0
    with pytest.raises(G.NoveltyError):
        G.ngram_novelty([], [[1, 2]], 2)
    with pytest.raises(ValueError):
        G.ngram_novelty([[1, 2]], [[1, 2]], 5)


def test_novelty_ignores_sequence_boundaries():
    # "2 3" only appears across the boundary of the training sequences
    assert G.ngram_novelty([[2, 3]], [[1, 2], [3, 4]], 2) == 100.0


def test_n_pretrain_samples():
    assert G.n_pretrain_samples(977_751, 3.0, 20) == 146_663
    assert G.n_pretrain_samples(1000, 0.0, 20) == 0


def test_seqgan_zero_rounds_is_mle(synth_200):
    v, split = synth_200
    mc, tc = ModelConfig(kind="rnnlm", hidden=8, embed=8), T.TrainConfig(batch_size=16)
    gan = G.GANConfig(n_rounds=0, mle_pretrain_epochs=2)
    res = G.seqgan_train("rnnlm", split, v, gan, mc, tc)
    plain, _ = T.train_mle(build_model(v, mc, seed=0), split, tc.scaled(2))
    assert res.generator.fingerprint() == plain.fingerprint()
    assert res.discriminator is None and res.rounds == []


def test_seqgan_smoke_run_writes_checkpoints(tmp_path, synth_200):
    v, split = synth_200
    gan = G.GANConfig(n_rounds=2, mle_pretrain_epochs=2, sample_len=8, g_batch=8, d_pretrain_steps=1, d_steps=1,
                      disc_hidden=8, d_sample_cap=64)
    res = G.seqgan_train("dual", split, v, gan, ModelConfig(hidden=32, embed=32), T.TrainConfig(batch_size=16), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["discriminator_round001.ckpt", "discriminator_round002.ckpt", "generator_mle.ckpt",
                     "generator_round001.ckpt", "generator_round002.ckpt"]
    assert all(0.0 < r.disc_accuracy < 1.0 for r in res.rounds)
    assert G.rounds_tsv(res.rounds).count("\n") == 3


def test_multiplier_zero_is_plain_training(synth_200):
    v, split = synth_200
    mc, tc = ModelConfig(kind="rnnlm", hidden=8, embed=8), T.TrainConfig(batch_size=16).scaled(2)
    res = G.same_source_pretrain("rnnlm", split, v, G.GANConfig(sample_multiplier=0.0), tc, mc)
    plain, _ = T.train_mle(build_model(v, mc, seed=0), split, tc)
    assert res.model.fingerprint() == plain.fingerprint() and res.samples is None


def test_low_data_same_source_runs(synth_200):
    v, split = synth_200
    small = C.CorpusSplit(split.train[: len(split.train) // 16], split.dev, split.test)
    gan = G.GANConfig(n_rounds=1, mle_pretrain_epochs=1, sample_len=4, g_batch=4, d_pretrain_steps=1, d_steps=1,
                      disc_hidden=4, sample_multiplier=1.0)
    res = G.same_source_pretrain("dual", small, v, gan, T.TrainConfig(batch_size=4).scaled(1),
                                 ModelConfig(hidden=8, embed=8))
    assert len(res.samples) == G.n_pretrain_samples(sum(len(u) for u in small.train), 1.0, 4)
    assert [r.phase for r in res.logs] == ["pretrain", "finetune"]


def test_sample_set_save(tmp_path, tiny_vocab):
    s = G.SampleSet(np.array([[4, 5], [tiny_vocab.start1 + 2, 4]]), "abc", 3)
    s.save(tmp_path / "s.txt", tiny_vocab)
    assert (tmp_path / "s.txt").read_text(encoding="utf-8") == "a b\n一 a\n"
    assert "generator=abc" in (tmp_path / "s.txt.meta").read_text(encoding="utf-8")
    assert [u.langs for u in s.utterances(tiny_vocab)] == [[0, 0], [1, 0]]
