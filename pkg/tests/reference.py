"""Unbatched, loop-by-loop re-implementation of the two models.

Used as an independent oracle: it reads the parameter arrays but none of
the package's forward code.
"""

import math

import numpy as np


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def cell(W, b, x, h, c):
    H = len(h)
    z = W @ np.concatenate([x, h]) + b
    i, f, o, g = _sig(z[:H]), _sig(z[H : 2 * H]), _sig(z[2 * H : 3 * H]), np.tanh(z[3 * H :])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def output_order(vocab):
    """Scorable symbols in output order, rebuilt from the surface lists."""
    return (["<unk0>", *vocab.tokens0], ["<unk1>", *vocab.tokens1])


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


class DualTrace:
    """Step-by-step dual LSTM following the two-case state update literally."""

    def __init__(self, model):
        self.P = {k: p.data for k, p in model.params.items()}
        self.v = model.vocab
        H = model.config.hidden
        self.h = [np.zeros(H), np.zeros(H)]
        self.c = [np.zeros(H), np.zeros(H)]

    def _emb(self, lang, idx):
        v = self.v
        if lang == 0:
            row = 0 if idx == v.bos else 1 + (idx - 2)
        else:
            row = idx - v.start1
        return self.P[f"emb{lang}"][row]

    def step(self, idx):
        v, P = self.v, self.P
        b = 0 if idx == v.bos else int(v.lang_of[idx])
        d = 1 - b
        dummy = v.dummy1 if d == 1 else v.dummy0
        h_up, c_up = cell(P[f"cell{b}.W"], P[f"cell{b}.b"], self._emb(b, idx), self.h[b], self.c[b])
        h_dn, c_dn = cell(P[f"cell{d}.W"], P[f"cell{d}.b"], self._emb(d, dummy), h_up, self.c[d])
        self.h[b], self.c[b] = h_up, c_up
        self.h[d], self.c[d] = h_dn, c_dn
        o0 = P["out0.W"] @ self.h[0] + P["out0.b"]
        o1 = P["out1.W"] @ self.h[1] + P["out1.b"]
        eos = P["eos.W0"] @ self.h[0] + P["eos.W1"] @ self.h[1] + P["eos.b"]
        return _softmax(np.concatenate([o0, o1, eos]))


class RNNTrace:
    def __init__(self, model):
        self.P = {k: p.data for k, p in model.params.items()}
        H = model.config.hidden
        self.h, self.c = np.zeros(H), np.zeros(H)

    def step(self, idx):
        P = self.P
        self.h, self.c = cell(P["cell.W"], P["cell.b"], P["emb"][idx], self.h, self.c)
        return _softmax(P["out.W"] @ self.h + P["out.b"])


def trace_for(model):
    return DualTrace(model) if model.kind == "dual" else RNNTrace(model)


def position(vocab, idx):
    """Output position of a vocabulary index in the union distribution."""
    w0, w1 = output_order(vocab)
    if idx == vocab.eos:
        return len(w0) + len(w1)
    s = vocab.itos[idx]
    if vocab.lang_of[idx] == 0:
        return w0.index(s)
    return len(w0) + w1.index(s)


def token_probs(model, ids):
    """Probabilities of t1..tn, EOS for one utterance."""
    tr = trace_for(model)
    v = model.vocab
    probs = []
    for inp, tgt in zip([v.bos, *ids], [*ids, v.eos]):
        dist = tr.step(inp)
        probs.append(float(dist[position(v, tgt)]))
    return probs


def perplexity(model, utterances):
    logs = [math.log(p) for u in utterances for p in token_probs(model, u.ids)]
    return math.exp(-sum(logs) / len(logs))


def sampling_dist(model, ids):
    """Distribution of the next token after BOS + ids, EOS removed and renormalised."""
    tr = trace_for(model)
    dist = None
    for inp in [model.vocab.bos, *ids]:
        dist = tr.step(inp)
    dist = dist.copy()
    dist[-1] = 0.0
    return dist / dist.sum()
