"""LSTM language models: the single-LSTM baseline and the dual LSTM model.

The dual model holds one LSTM per language.  For an input token of
language ``b`` the cell for ``b`` runs first on the token; its fresh hidden
output becomes the incoming hidden state of the other cell, which reads that
language's dummy token while keeping its own memory ``c``.  Both cells then
score their own language's tokens and a shared softmax runs over the union.

Both models share one output layout (see ``Vocabulary.scorable``):
language-0 UNK and words, language-1 UNK and characters, then EOS.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .corpus import L0, L1, Utterance, Vocabulary
from .numerics import Parameter, Tensor


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "dual"
    hidden: int = 32
    embed: int = 32
    features: dict[str, int] = field(default_factory=dict)
    feature_width: int = 8
    lang_feature_width: int = 2
    init_scale: float = 0.05
    embed_scale: float = 0.1

    def width(self, feature: str) -> int:
        return self.lang_feature_width if feature == "lang" else self.feature_width

    @property
    def input_size(self) -> int:
        return self.embed + sum(self.width(f) for f in self.features)


class LSTMState(NamedTuple):
    h: Tensor
    c: Tensor


class DualState(NamedTuple):
    s0: LSTMState
    s1: LSTMState


def lstm_step(W: Tensor, b: Tensor, x: Tensor, s: LSTMState) -> LSTMState:
    """One LSTM update with gate pre-activations ``W [x; h] + b`` laid out [i|f|o|g].

    ``c' = f*c + i*g`` and ``h' = o*tanh(c')``.
    """
    z = nx.affine(nx.concat([x, s.h]), W, b)
    c_new = nx.lstm_memory(z, s.c)
    return LSTMState(nx.lstm_output(z, c_new), c_new)


class LanguageModel:
    """Shared parameter handling, feature channel and output layout."""

    kind = ""

    def __init__(self, vocab: Vocabulary, config: ModelConfig, rng: np.random.Generator | None = None):
        self.vocab = vocab
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.out_ids = vocab.scorable
        self.out_pos = np.full(len(vocab), -1, dtype=np.int64)
        self.out_pos[self.out_ids] = np.arange(len(self.out_ids))
        self.n_out = len(self.out_ids)
        self.eos_pos = int(self.out_pos[vocab.eos])
        rng = rng if rng is not None else nx.make_rng(0)
        self._build(rng)
        for name, card in config.features.items():
            self._add(f"feat.{name}", rng.uniform(-config.embed_scale, config.embed_scale, (card + 1, config.width(name))))

    # parameter helpers

    def _add(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def _new_cell(self, prefix: str, rng) -> None:
        H, D = self.config.hidden, self.config.input_size
        s = self.config.init_scale
        self._add(f"{prefix}.W", rng.uniform(-s, s, (4 * H, D + H)))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = 1.0
        self._add(f"{prefix}.b", bias)

    def _uniform(self, rng, shape, scale=None):
        s = self.config.init_scale if scale is None else scale
        return rng.uniform(-s, s, shape)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ModelError(f"parameter names differ: {sorted(set(arrays) ^ set(self.params))}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ModelError(f"{k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data[...] = arrays[k]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()[:16]

    # inputs

    def _features(self, feats: dict[str, np.ndarray] | None, n: int) -> list[Tensor]:
        out = []
        for name, card in self.config.features.items():
            ids = np.full(n, card) if feats is None or name not in feats else feats[name]
            out.append(nx.embed(self.params[f"feat.{name}"], ids))
        if feats:
            unknown = set(feats) - set(self.config.features)
            if unknown:
                raise ModelError(f"undeclared feature(s) {sorted(unknown)}")
        return out

    def _check_tokens(self, tokens: np.ndarray, langs: np.ndarray) -> None:
        actual = self.vocab.lang_of[tokens]
        neutral = tokens == self.vocab.bos
        if np.any((actual != langs) & ~neutral):
            raise ModelError("language/selector mismatch")
        if np.any(tokens == self.vocab.eos):
            raise ModelError("EOS is never an input")

    # interface

    def zero_state(self, batch: int):
        raise NotImplementedError

    def step(self, state, tokens, langs, feats=None):
        """Advance one position; returns (new state, logits Tensor[B, n_out])."""
        raise NotImplementedError

    @staticmethod
    def select_state(state, rows):
        """Rows of a state as constant tensors (sampling and rollouts)."""
        raise NotImplementedError

    def header(self) -> dict[str, str]:
        feats = ",".join(f"{k}:{v}:{self.config.width(k)}" for k, v in self.config.features.items())
        return {
            "model.kind": self.kind,
            "model.hidden": str(self.config.hidden),
            "model.embed": str(self.config.embed),
            "model.features": feats,
            "vocab.size": str(len(self.vocab)),
            "vocab.hash": self.vocab.digest(),
        }

    def save(self, path, extra: dict[str, str] | None = None) -> None:
        nx.save_params(path, self.state_dict(), {**self.header(), **(extra or {})})


class RNNLM(LanguageModel):
    """Single LSTM over one embedding table for the whole vocabulary."""

    kind = "rnnlm"

    def _build(self, rng):
        c = self.config
        self._add("emb", self._uniform(rng, (len(self.vocab), c.embed), c.embed_scale))
        self._new_cell("cell", rng)
        self._add("out.W", self._uniform(rng, (self.n_out, c.hidden)))
        self._add("out.b", np.zeros(self.n_out))

    def zero_state(self, batch: int) -> LSTMState:
        z = np.zeros((batch, self.config.hidden))
        return LSTMState(Tensor(z), Tensor(z.copy()))

    def step(self, state: LSTMState, tokens, langs, feats=None):
        tokens = np.asarray(tokens)
        self._check_tokens(tokens, np.asarray(langs))
        p = self.params
        x = nx.concat([nx.embed(p["emb"], tokens), *self._features(feats, len(tokens))])
        new = lstm_step(p["cell.W"], p["cell.b"], x, state)
        return new, nx.affine(new.h, p["out.W"], p["out.b"])

    @staticmethod
    def select_state(state: LSTMState, rows) -> LSTMState:
        return LSTMState(Tensor(state.h.data[rows]), Tensor(state.c.data[rows]))


class DualLM(LanguageModel):
    """Dual LSTM language model with per-language embeddings and cells."""

    kind = "dual"

    def _build(self, rng):
        c, v = self.config, self.vocab
        # E0 rows: BOS then the L0 range; E1 rows: the L1 range
        self.row = np.full(len(v), -1, dtype=np.int64)
        self.row[v.bos] = 0
        self.row[list(v.range0)] = np.arange(1, len(v.range0) + 1)
        self.row[list(v.range1)] = np.arange(len(v.range1))
        self._add("emb0", self._uniform(rng, (len(v.range0) + 1, c.embed), c.embed_scale))
        self._add("emb1", self._uniform(rng, (len(v.range1), c.embed), c.embed_scale))
        self._new_cell("cell0", rng)
        self._new_cell("cell1", rng)
        self.n_out0 = len(v.range0) - 1
        self.n_out1 = len(v.range1) - 1
        self._add("out0.W", self._uniform(rng, (self.n_out0, c.hidden)))
        self._add("out0.b", np.zeros(self.n_out0))
        self._add("out1.W", self._uniform(rng, (self.n_out1, c.hidden)))
        self._add("out1.b", np.zeros(self.n_out1))
        self._add("eos.W0", self._uniform(rng, (1, c.hidden)))
        self._add("eos.W1", self._uniform(rng, (1, c.hidden)))
        self._add("eos.b", np.zeros(1))

    def zero_state(self, batch: int) -> DualState:
        H = self.config.hidden
        return DualState(*(LSTMState(Tensor(np.zeros((batch, H))), Tensor(np.zeros((batch, H)))) for _ in range(2)))

    def encode_input(self, lang: int, tokens: np.ndarray, feats: Sequence[Tensor]) -> Tensor:
        """Embedding rows from the selected language's table plus feature rows."""
        return nx.concat([nx.embed(self.params[f"emb{lang}"], self.row[tokens]), *feats])

    def step(self, state: DualState, tokens, langs, feats=None):
        tokens, langs = np.asarray(tokens), np.asarray(langs)
        self._check_tokens(tokens, langs)
        p, B = self.params, len(tokens)
        fe = self._features(feats, B)
        h_parts: list[list] = [[], []]
        c_parts: list[list] = [[], []]
        for b in (L0, L1):
            rows = np.flatnonzero(langs == b)
            if rows.size == 0:
                continue
            up, down = b, 1 - b
            f_rows = [nx.take(f, rows) for f in fe]
            s_up = state[up]
            x_up = self.encode_input(up, tokens[rows], f_rows)
            new_up = lstm_step(p[f"cell{up}.W"], p[f"cell{up}.b"], x_up, LSTMState(nx.take(s_up.h, rows), nx.take(s_up.c, rows)))
            # downstream cell: dummy input, upstream's fresh h, its own memory
            x_down = self.encode_input(down, np.full(rows.size, self.vocab.dummy(down)), f_rows)
            s_down = state[down]
            new_down = lstm_step(p[f"cell{down}.W"], p[f"cell{down}.b"], x_down, LSTMState(new_up.h, nx.take(s_down.c, rows)))
            h_parts[up].append((rows, new_up.h))
            c_parts[up].append((rows, new_up.c))
            h_parts[down].append((rows, new_down.h))
            c_parts[down].append((rows, new_down.c))
        h0, c0 = nx.merge(h_parts[0], B), nx.merge(c_parts[0], B)
        h1, c1 = nx.merge(h_parts[1], B), nx.merge(c_parts[1], B)
        eos = nx.add(nx.affine(h0, p["eos.W0"], p["eos.b"]), nx.affine(h1, p["eos.W1"]))
        logits = nx.concat([nx.affine(h0, p["out0.W"], p["out0.b"]), nx.affine(h1, p["out1.W"], p["out1.b"]), eos])
        return DualState(LSTMState(h0, c0), LSTMState(h1, c1)), logits

    @staticmethod
    def select_state(state: DualState, rows) -> DualState:
        return DualState(*(LSTMState(Tensor(s.h.data[rows]), Tensor(s.c.data[rows])) for s in state))


MODEL_KINDS = {"rnnlm": RNNLM, "dual": DualLM}


def build_model(vocab: Vocabulary, config: ModelConfig, seed: int = 0) -> LanguageModel:
    try:
        cls = MODEL_KINDS[config.kind]
    except KeyError:
        raise ModelError(f"unknown model kind {config.kind!r}") from None
    return cls(vocab, config, nx.make_rng(seed))


def load_model(path, vocab: Vocabulary) -> LanguageModel:
    arrays, header = nx.load_params(path)
    if header.get("vocab.hash") != vocab.digest():
        raise ModelError(f"{path}: vocabulary hash {header.get('vocab.hash')} does not match {vocab.digest()}")
    feats, width = {}, 8
    for item in filter(None, header.get("model.features", "").split(",")):
        name, card, w = item.split(":")
        feats[name] = int(card)
        if name != "lang":
            width = int(w)
    config = ModelConfig(
        kind=header["model.kind"], hidden=int(header["model.hidden"]), embed=int(header["model.embed"]),
        features=feats, feature_width=width,
    )
    model = build_model(vocab, config)
    model.load_state_dict(arrays)
    return model


# --------------------------------------------------------------------------
# batches and the teacher-forced pass


@dataclass
class Batch:
    """Time-major arrays for B framed utterances ``BOS t1..tn`` -> ``t1..tn EOS``."""

    inputs: np.ndarray
    langs: np.ndarray
    targets: np.ndarray  # output positions
    mask: np.ndarray
    feats: dict[str, np.ndarray] | None = None

    @property
    def n_predicted(self) -> int:
        return int(self.mask.sum())


def make_batch(model: LanguageModel, utterances: Sequence[Utterance]) -> Batch:
    vocab = model.vocab
    if any(len(u) == 0 for u in utterances):
        raise ModelError("empty utterance")
    B = len(utterances)
    T = max(len(u) for u in utterances) + 1
    inputs = np.full((T, B), vocab.unk0, dtype=np.int64)
    langs = np.zeros((T, B), dtype=np.int64)
    targets = np.full((T, B), model.eos_pos, dtype=np.int64)
    mask = np.zeros((T, B))
    names = list(model.config.features)
    feats = {n: np.full((T, B), model.config.features[n], dtype=np.int64) for n in names} or None
    for j, u in enumerate(utterances):
        n = len(u)
        ids = np.asarray(u.ids)
        inputs[0, j] = vocab.bos
        inputs[1 : n + 1, j] = ids
        # BOS is read by the L0 cell first (fixed selector)
        langs[1 : n + 1, j] = u.langs
        targets[:n, j] = model.out_pos[ids]
        mask[: n + 1, j] = 1.0
        if feats and u.features is not None:
            # utterances without features keep the "none" row
            for k, fv in enumerate(u.features, start=1):
                d = dict(fv)
                for name in names:
                    feats[name][k, j] = d[name]
    return Batch(inputs, langs, targets, mask, feats)


def forward(
    model: LanguageModel,
    batch: Batch,
    weights: np.ndarray | None = None,
    teacher_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Run the model over a batch.

    Returns the weighted NLL sum (``weights`` defaults to the padding mask)
    and the per-position NLL array.  With ``teacher_prob < 1`` each real
    input after BOS is replaced, with probability ``1 - teacher_prob``, by a
    token drawn from the previous step's distribution (EOS excluded).
    """
    T, B = batch.inputs.shape
    weights = batch.mask if weights is None else weights
    state = model.zero_state(B)
    loss = None
    nll = np.zeros((T, B))
    prev = None
    vocab = model.vocab
    cols = np.arange(B)
    for t in range(T):
        tokens, langs = batch.inputs[t], batch.langs[t]
        feats = None if batch.feats is None else {k: v[t] for k, v in batch.feats.items()}
        if t >= 1 and teacher_prob < 1.0:
            swap = (rng.random(B) >= teacher_prob) & (batch.mask[t] > 0)
            if np.any(swap):
                probs = nx.softmax(prev[swap])
                probs[:, model.eos_pos] = 0.0
                drawn = model.out_ids[nx.sample_rows(probs, rng)]
                tokens, langs = tokens.copy(), langs.copy()
                tokens[swap] = drawn
                langs[swap] = vocab.lang_of[drawn]
                if feats is not None:
                    for k, card in model.config.features.items():
                        feats[k] = feats[k].copy()
                        feats[k][swap] = card
        state, logits = model.step(state, tokens, langs, feats)
        step_loss = nx.log_softmax_nll(logits, batch.targets[t], weights[t])
        nll[t] = -nx.log_softmax(logits.data)[cols, batch.targets[t]]
        loss = step_loss if loss is None else nx.add(loss, step_loss)
        prev = logits.data
    return loss, nll * batch.mask


def token_nll(model: LanguageModel, utterances: Sequence[Utterance], batch_size: int = 64) -> list[np.ndarray]:
    """Per-utterance arrays of predicted-symbol NLLs (last entry is EOS)."""
    out: list[np.ndarray | None] = [None] * len(utterances)
    order = sorted(range(len(utterances)), key=lambda i: len(utterances[i]))
    with nx.no_grad():
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            batch = make_batch(model, [utterances[i] for i in idx])
            _, nll = forward(model, batch)
            for j, i in enumerate(idx):
                out[i] = nll[: len(utterances[i]) + 1, j].copy()
    return out


def sequence_nll(model: LanguageModel, utterance: Utterance) -> tuple[float, int]:
    """Total NLL in nats of ``BOS t1..tn EOS`` and the number of predicted symbols."""
    if len(utterance) == 0:
        raise ModelError("empty utterance")
    with nx.no_grad():
        loss, _ = forward(model, make_batch(model, [utterance]))
    return loss.item(), len(utterance) + 1
