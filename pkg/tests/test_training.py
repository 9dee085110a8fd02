import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from conftest import random_model, utter
from cslm import corpus as C
from cslm import numerics as nx
from cslm import training as T
from cslm.model import ModelConfig, build_model


@pytest.fixture(scope="module")
def small_split():
    toks, _ = C.tokenize_lines(C.synth_corpus(3, 60, 0.3, (10, 10), 5.0))
    v = C.build_vocabulary(toks)
    return v, C.split_corpus(C.encode_all(toks, v), 0)


def test_lr_schedule_points():
    cfg = T.TrainConfig()
    assert T.lr_at_epoch(cfg, 1) == 1.0
    assert T.lr_at_epoch(cfg, 80) == 1.0
    assert T.lr_at_epoch(cfg, 90) == pytest.approx(0.8170728068875467, abs=1e-15)


def test_scaled_config_moves_decay_start():
    cfg = T.TrainConfig().scaled(200)
    assert (cfg.total_epochs, cfg.decay_start_epoch) == (200, 160)
    with pytest.raises(ValueError):
        T.TrainConfig(decay_start_epoch=10, total_epochs=5)


def test_sgd_step_cases():
    p = nx.Parameter("p", np.array([1.0]))
    p.grad[...] = 0.5
    T.sgd_step([p], 0.0, None)
    assert p.data[0] == 1.0
    p.grad[...] = 0.5
    T.sgd_step([p], 1.0, None)
    assert p.data[0] == 0.5
    q = nx.Parameter("q", np.zeros(2))
    q.grad[...] = [6.0, 8.0]
    assert T.sgd_step([q], 1.0, 5.0) == 10.0
    assert q.data.tolist() == [-3.0, -4.0]
    assert not np.any(q.grad)


def test_sgd_step_non_finite():
    p = nx.Parameter("p", np.zeros(1))
    p.grad[...] = np.nan
    with pytest.raises(nx.NumericalError):
        T.sgd_step([p], 1.0, 5.0)


def test_uniform_model_perplexity_equals_vocab_size():
    v = C.Vocabulary([f"w{i}" for i in range(49)], [chr(0x4E00 + i) for i in range(48)])
    m = build_model(v, ModelConfig(kind="rnnlm", hidden=4, embed=4))
    for p in m.parameters():
        p.data[...] = 0.0
    utts = [utter(v, "w1 w2 一"), utter(v, "w3")]
    assert m.n_out == 100
    assert T.perplexity(m, utts) == pytest.approx(100.0, abs=1e-6)


def test_perplexity_matches_trace(tiny_vocab, toy_utterances):
    m = random_model(tiny_vocab, "dual", seed=9)
    assert T.perplexity(m, toy_utterances) == pytest.approx(ref.perplexity(m, toy_utterances), abs=1e-9)


def test_monolingual_decomposition_only_eng_eng(tiny_vocab):
    m = random_model(tiny_vocab, "dual")
    d = T.decomposed_perplexity(m, [utter(tiny_vocab, "a b c"), utter(tiny_vocab, "b")])
    populated = {k for k, n in d.count.items() if n}
    assert populated == {T.TransitionClass.ENG_ENG, T.TransitionClass.INITIAL, T.EOS_BUCKET}


def test_decomposition_counts_partition(tiny_vocab, toy_utterances):
    d = T.decomposed_perplexity(random_model(tiny_vocab, "rnnlm"), toy_utterances)
    n_tokens = sum(len(u) for u in toy_utterances)
    assert sum(n for k, n in d.count.items() if k != T.EOS_BUCKET) == n_tokens
    assert d.count[T.EOS_BUCKET] == len(toy_utterances)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=12))
def test_transition_classes_property(langs):
    cls = T.transition_classes(langs)
    assert len(cls) == len(langs) and cls[0] is T.TransitionClass.INITIAL
    names = {(0, 0): "Eng-Eng", (0, 1): "Eng-Man", (1, 0): "Man-Eng", (1, 1): "Man-Man"}
    assert [c.value for c in cls[1:]] == [names[a, b] for a, b in zip(langs, langs[1:])]


def test_teacher_prob_schedule():
    s = T.ScheduledSampling(floor=0.0)
    assert s.teacher_prob(1, 10) == 1.0
    assert s.teacher_prob(10, 10) == 0.0


def test_training_reduces_loss_and_restores_best(small_split):
    v, split = small_split
    m = build_model(v, ModelConfig(kind="rnnlm", hidden=8, embed=8), seed=0)
    before = T.perplexity(m, split.dev)
    m, logs = T.train_mle(m, split, T.TrainConfig(batch_size=8).scaled(6))
    assert logs[-1].train_loss < logs[0].train_loss
    best = min(r.dev_ppl for r in logs)
    assert best <= logs[0].dev_ppl
    assert T.perplexity(m, split.dev) == pytest.approx(best, rel=1e-12)
    assert best < before


def test_training_is_deterministic(small_split):
    v, split = small_split
    runs = []
    for _ in range(2):
        m = build_model(v, ModelConfig(hidden=8, embed=8), seed=1)
        m, logs = T.train_mle(m, split, T.TrainConfig(batch_size=8, seed=3).scaled(3))
        runs.append((T.log_tsv(logs), m.fingerprint()))
    assert runs[0] == runs[1]


def test_teacher_prob_one_matches_mle(small_split):
    v, split = small_split
    cfg = T.TrainConfig(batch_size=8).scaled(2)
    a, la = T.train_mle(build_model(v, ModelConfig(hidden=8, embed=8)), split, cfg)
    b, lb = T.train_scheduled_sampling(build_model(v, ModelConfig(hidden=8, embed=8)), split, cfg, T.ScheduledSampling(floor=1.0))
    assert a.fingerprint() == b.fingerprint()
    assert [r.train_loss for r in la] == [r.train_loss for r in lb]


def test_empty_pretrain_equals_plain_training(small_split):
    v, split = small_split
    cfg = T.TrainConfig(batch_size=8).scaled(2)
    a, _ = T.train_mle(build_model(v, ModelConfig(hidden=8, embed=8)), split, cfg)
    b, logs = T.pretrain_then_finetune(build_model(v, ModelConfig(hidden=8, embed=8)), [], split, cfg, cfg)
    assert a.fingerprint() == b.fingerprint()
    assert {r.phase for r in logs} == {"finetune"}


def test_pretrain_phases_logged(small_split):
    v, split = small_split
    cfg = T.TrainConfig(batch_size=8).scaled(2)
    mono = [u for u in split.train if set(u.langs) == {0}][:3] + [u for u in split.train if set(u.langs) == {1}][:3]
    _, logs = T.pretrain_then_finetune(build_model(v, ModelConfig(hidden=8, embed=8)), mono, split, cfg, cfg)
    assert [r.phase for r in logs] == ["pretrain", "pretrain", "finetune", "finetune"]
    assert T.log_tsv(logs).splitlines()[0] == T.LOG_HEADER


def test_monolingual_corpus_checks_languages(tiny_vocab):
    l0, l1 = utter(tiny_vocab, "a b"), utter(tiny_vocab, "一 二")
    assert T.monolingual_corpus([l0], [l1]) == [l0, l1]
    with pytest.raises(ValueError):
        T.monolingual_corpus([l1], [l0])


def test_perplexity_tsv_format():
    text = T.perplexity_tsv({"RNNLM": {"Dev": 12.3456789, "Test": None}})
    assert text == "model\tDev\tTest\nRNNLM\t12.3457\tn/a\n"
    assert math.isfinite(float(text.splitlines()[1].split("\t")[1]))


def test_best_checkpoint_callback_fires_in_both_phases(small_split):
    v, split = small_split
    cfg = T.TrainConfig(batch_size=8).scaled(2)
    seen = set()
    T.pretrain_then_finetune(build_model(v, ModelConfig(hidden=8, embed=8)), split.train[:10], split, cfg, cfg,
                             on_best=lambda model, rec: seen.add(rec.phase))
    assert seen == {"pretrain", "finetune"}
