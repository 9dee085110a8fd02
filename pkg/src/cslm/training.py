"""Maximum-likelihood and scheduled-sampling training, perplexity evaluation,
and the pretrain-then-finetune orchestration."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import L0, CorpusSplit, Utterance, Vocabulary
from .model import LanguageModel, forward, make_batch, token_nll
from .numerics import NumericalError


@dataclass
class TrainConfig:
    initial_lr: float = 1.0
    decay_rate: float = 0.98
    decay_start_epoch: int = 80
    total_epochs: int = 100
    batch_size: int = 32
    grad_clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_start_epoch > self.total_epochs:
            raise ValueError("decay_start_epoch must not exceed total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def scaled(self, total_epochs: int) -> "TrainConfig":
        """Same recipe over a different horizon, decay starting at 80% of it."""
        return replace(self, total_epochs=total_epochs, decay_start_epoch=int(0.8 * total_epochs))


@dataclass
class ScheduledSampling:
    """Teacher-forcing probability decays linearly from 1.0 to ``floor``."""

    floor: float = 0.0

    def teacher_prob(self, epoch: int, total_epochs: int) -> float:
        if total_epochs <= 1:
            return self.floor
        frac = (epoch - 1) / (total_epochs - 1)
        return 1.0 - (1.0 - self.floor) * frac


@dataclass
class EpochLog:
    phase: str
    epoch: int
    lr: float
    train_loss: float
    dev_ppl: float
    seconds: float = 0.0


LOG_HEADER = "phase\tepoch\tlr\ttrain_loss\tdev_ppl"


def log_tsv(logs: Sequence[EpochLog]) -> str:
    """Deterministic epoch table; wall-clock time goes to :func:`timing_tsv`."""
    rows = [LOG_HEADER]
    rows += [f"{r.phase}\t{r.epoch}\t{r.lr:.10g}\t{r.train_loss:.10g}\t{r.dev_ppl:.10g}" for r in logs]
    return "\n".join(rows) + "\n"


def timing_tsv(logs: Sequence[EpochLog]) -> str:
    rows = ["phase\tepoch\tseconds"] + [f"{r.phase}\t{r.epoch}\t{r.seconds:.3f}" for r in logs]
    return "\n".join(rows) + "\n"


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch <= config.decay_start_epoch:
        return config.initial_lr
    return config.initial_lr * config.decay_rate ** (epoch - config.decay_start_epoch)


def sgd_step(params: Sequence[nx.Parameter], lr: float, grad_clip_norm: float | None) -> float:
    """Clip the global gradient norm, take a plain SGD step, zero the grads.

    Returns the pre-clipping norm.
    """
    norm = nx.global_norm(p.grad for p in params)
    if not math.isfinite(norm):
        for p in params:
            p.zero_grad()
        bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
        raise NumericalError(f"non-finite gradient in {bad or 'parameters'}")
    factor = 1.0
    if grad_clip_norm is not None and norm > grad_clip_norm:
        factor = grad_clip_norm / norm
    for p in params:
        p.data -= (lr * factor) * p.grad
        p.zero_grad()
    return norm


# --------------------------------------------------------------------------
# evaluation


def perplexity(model: LanguageModel, utterances: Sequence[Utterance]) -> float:
    if not utterances:
        raise ValueError("empty evaluation set")
    nlls = token_nll(model, utterances)
    return math.exp(sum(float(a.sum()) for a in nlls) / sum(a.size for a in nlls))


class TransitionClass(str, enum.Enum):
    ENG_ENG = "Eng-Eng"
    ENG_MAN = "Eng-Man"
    MAN_ENG = "Man-Eng"
    MAN_MAN = "Man-Man"
    INITIAL = "Utterance-Initial"


EOS_BUCKET = "EOS"
_PAIR = {(0, 0): TransitionClass.ENG_ENG, (0, 1): TransitionClass.ENG_MAN,
         (1, 0): TransitionClass.MAN_ENG, (1, 1): TransitionClass.MAN_MAN}


def transition_classes(langs: Sequence[int]) -> list[TransitionClass]:
    """Class of each token given its predecessor's language."""
    return [TransitionClass.INITIAL] + [_PAIR[a, b] for a, b in zip(langs, langs[1:])]


@dataclass
class Decomposition:
    nll: dict = field(default_factory=dict)
    count: dict = field(default_factory=dict)

    def add(self, key, value: float) -> None:
        self.nll[key] = self.nll.get(key, 0.0) + value
        self.count[key] = self.count.get(key, 0) + 1

    def perplexity(self, key) -> float | None:
        n = self.count.get(key, 0)
        return math.exp(self.nll[key] / n) if n else None

    def as_dict(self) -> dict:
        keys = [*TransitionClass, EOS_BUCKET]
        return {k: self.perplexity(k) for k in keys}

    def overall_log_ppl(self) -> float:
        return sum(self.nll.values()) / sum(self.count.values())


def decomposed_perplexity(model: LanguageModel, utterances: Sequence[Utterance]) -> Decomposition:
    """Bucket each predicted symbol by (previous language, current language).

    The first token of an utterance goes to the utterance-initial bucket and
    EOS to its own bucket.
    """
    nlls = token_nll(model, utterances)
    out = Decomposition()
    for utt, nll in zip(utterances, nlls):
        for cls, v in zip(transition_classes(utt.langs), nll[:-1]):
            out.add(cls, float(v))
        out.add(EOS_BUCKET, float(nll[-1]))
    return out


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def perplexity_tsv(rows: dict[str, dict[str, float]]) -> str:
    cols = list(next(iter(rows.values())))
    lines = ["\t".join(["model", *cols])]
    lines += ["\t".join([label, *(_fmt(v[c]) for c in cols)]) for label, v in rows.items()]
    return "\n".join(lines) + "\n"


def decomposition_tsv(rows: dict[str, Decomposition]) -> str:
    keys = [*TransitionClass, EOS_BUCKET]
    lines = ["\t".join(["model", *(k.value if isinstance(k, TransitionClass) else k for k in keys)])]
    for label, d in rows.items():
        lines.append("\t".join([label, *(_fmt(d.perplexity(k)) for k in keys)]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# training loops


def _run_epochs(
    model: LanguageModel,
    split: CorpusSplit,
    config: TrainConfig,
    phase: str,
    schedule: ScheduledSampling | None,
    on_best: Callable[[LanguageModel, EpochLog], None] | None,
) -> tuple[LanguageModel, list[EpochLog]]:
    params = model.parameters()
    logs: list[EpochLog] = []
    best_ppl, best_state = math.inf, None
    train = list(split.train)
    for epoch in range(1, config.total_epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        order = nx.make_rng((config.seed, epoch)).permutation(len(train))
        teacher = 1.0 if schedule is None else schedule.teacher_prob(epoch, config.total_epochs)
        ss_rng = nx.make_rng((config.seed, epoch, 1))
        total_nll, total_n = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = make_batch(model, [train[i] for i in order[lo : lo + config.batch_size]])
            B = batch.inputs.shape[1]
            loss, nll = forward(model, batch, teacher_prob=teacher, rng=ss_rng)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            # summed over positions, averaged over utterances
            nx.backward(nx.scale(loss, 1.0 / B))
            sgd_step(params, lr, config.grad_clip_norm)
            total_nll += float(nll.sum())
            total_n += batch.n_predicted
        dev_ppl = perplexity(model, split.dev) if split.dev else math.nan
        rec = EpochLog(phase, epoch, lr, total_nll / max(total_n, 1), dev_ppl, time.perf_counter() - t0)
        logs.append(rec)
        if split.dev and dev_ppl < best_ppl:
            best_ppl, best_state = dev_ppl, model.state_dict()
            if on_best is not None:
                on_best(model, rec)
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, logs


def train_mle(
    model: LanguageModel,
    split: CorpusSplit,
    config: TrainConfig,
    phase: str = "mle",
    on_best: Callable[[LanguageModel, EpochLog], None] | None = None,
) -> tuple[LanguageModel, list[EpochLog]]:
    """Teacher-forced SGD training; the best-dev parameters are restored at the end."""
    return _run_epochs(model, split, config, phase, None, on_best)


def train_scheduled_sampling(
    model: LanguageModel,
    split: CorpusSplit,
    config: TrainConfig,
    schedule: ScheduledSampling,
    phase: str = "scheduled",
    on_best=None,
) -> tuple[LanguageModel, list[EpochLog]]:
    return _run_epochs(model, split, config, phase, schedule, on_best)


def train_loss(model: LanguageModel, utterances: Sequence[Utterance]) -> float:
    """Mean per-symbol NLL (nats) under teacher forcing."""
    return math.log(perplexity(model, utterances))


def pretrain_then_finetune(
    model: LanguageModel,
    pretrain: Sequence[Utterance],
    split: CorpusSplit,
    config_pre: TrainConfig,
    config_fine: TrainConfig,
    pretrain_vocab: Vocabulary | None = None,
    on_best=None,
) -> tuple[LanguageModel, list[EpochLog]]:
    """Train on ``pretrain`` (dev-selected on the real dev set), then on the real train split."""
    if pretrain_vocab is not None and pretrain_vocab.digest() != model.vocab.digest():
        raise ValueError("pretraining corpus was encoded with a different vocabulary")
    logs: list[EpochLog] = []
    if pretrain:
        model, pre_logs = train_mle(model, replace(split, train=list(pretrain)), config_pre, phase="pretrain",
                                    on_best=on_best)
        logs += pre_logs
    model, fine_logs = train_mle(model, split, config_fine, phase="finetune", on_best=on_best)
    return model, logs + fine_logs


def monolingual_corpus(l0_only: Sequence[Utterance], l1_only: Sequence[Utterance]) -> list[Utterance]:
    """Concatenate the two single-language pretraining corpora."""
    for u in l0_only:
        if any(l != L0 for l in u.langs):
            raise ValueError("language-0 pretraining corpus contains language-1 tokens")
    for u in l1_only:
        if any(l == L0 for l in u.langs):
            raise ValueError("language-1 pretraining corpus contains language-0 tokens")
    return [*l0_only, *l1_only]
