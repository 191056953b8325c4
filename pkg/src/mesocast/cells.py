"""Recurrent cells: plain LSTM, spatial self-attention, and the
attention-augmented LSTM whose output gate mixes information across road
segments.

All step functions operate on row-stacked states: a state row is one token
(one road segment, or one batch entry for the dense variant), so the same
code serves single-window inference and full-batch training.  Weights are
shared across rows by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import block_rng


def _uniform_fan_in(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(rows)
    return rng.uniform(-bound, bound, (rows, cols))


@dataclass
class LstmParams:
    """Four-gate weights mapping [h, x] (width hidden+in_width) to width hidden."""

    w_f: Tensor
    w_i: Tensor
    w_c: Tensor
    w_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_c: Tensor
    b_o: Tensor

    @property
    def hidden(self) -> int:
        return self.w_f.shape[1]

    @property
    def in_width(self) -> int:
        return self.w_f.shape[0] - self.w_f.shape[1]

    def blocks(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}/w_f": self.w_f, f"{prefix}/w_i": self.w_i,
            f"{prefix}/w_c": self.w_c, f"{prefix}/w_o": self.w_o,
            f"{prefix}/b_f": self.b_f, f"{prefix}/b_i": self.b_i,
            f"{prefix}/b_c": self.b_c, f"{prefix}/b_o": self.b_o,
        }


@dataclass
class AttentionParams:
    """Query/key/value projections from feature width H down to width d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @property
    def proj_width(self) -> int:
        return self.w_q.shape[1]

    def blocks(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w_q": self.w_q, f"{prefix}/w_k": self.w_k, f"{prefix}/w_v": self.w_v}


@dataclass
class SaLstmParams:
    """One shared LstmParams for every segment token plus the output-gate
    attention block and its projection back to width H."""

    lstm: LstmParams
    attn: AttentionParams
    out_proj: Tensor

    @property
    def hidden(self) -> int:
        return self.lstm.hidden

    def blocks(self, prefix: str) -> dict[str, Tensor]:
        out = self.lstm.blocks(prefix)
        out.update(self.attn.blocks(f"{prefix}/attn"))
        out[f"{prefix}/out_proj"] = self.out_proj
        return out


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def zero_state(rows: int, hidden: int) -> LstmState:
    return LstmState(ad.tensor(np.zeros((rows, hidden))), ad.tensor(np.zeros((rows, hidden))))


def init_lstm_params(hidden, in_width, seed, prefix, trainable=True) -> LstmParams:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights; forget bias starts
    at +1 so early cell state is retained."""
    make = ad.parameter if trainable else ad.tensor
    rows = hidden + in_width
    w = {g: make(_uniform_fan_in(block_rng(seed, f"{prefix}/w_{g}"), rows, hidden))
         for g in "fico"}
    b = {g: make(np.zeros(hidden)) for g in "ico"}
    b["f"] = make(np.ones(hidden))
    return LstmParams(w["f"], w["i"], w["c"], w["o"], b["f"], b["i"], b["c"], b["o"])


def init_attention_params(hidden, proj_width, seed, prefix, trainable=True) -> AttentionParams:
    make = ad.parameter if trainable else ad.tensor
    return AttentionParams(
        *(make(_uniform_fan_in(block_rng(seed, f"{prefix}/w_{n}"), hidden, proj_width))
          for n in "qkv")
    )


def init_sa_lstm_params(hidden, proj_width, seed, prefix, trainable=True) -> SaLstmParams:
    make = ad.parameter if trainable else ad.tensor
    return SaLstmParams(
        lstm=init_lstm_params(hidden, 1, seed, prefix, trainable),
        attn=init_attention_params(hidden, proj_width, seed, f"{prefix}/attn", trainable),
        out_proj=make(_uniform_fan_in(block_rng(seed, f"{prefix}/out_proj"), proj_width, hidden)),
    )


def _gate_preact(cat: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(cat, w), b)


def lstm_step(p: LstmParams, state: LstmState, x: Tensor) -> LstmState:
    """f=sig(W_f[h,x]+b_f); i, o likewise; c~=tanh(W_c[h,x]+b_c);
    C' = f*C + i*c~; h' = o*tanh(C')."""
    rows = state.h.shape[0]
    if x.shape != (rows, p.in_width):
        raise ValueError(
            f"lstm_step: input shape {x.shape} does not match "
            f"(rows={rows}, in_width={p.in_width})"
        )
    cat = ad.concat([state.h, x], axis=1)
    f = ad.sigmoid(_gate_preact(cat, p.w_f, p.b_f))
    i = ad.sigmoid(_gate_preact(cat, p.w_i, p.b_i))
    c_tilde = ad.tanh(_gate_preact(cat, p.w_c, p.b_c))
    o = ad.sigmoid(_gate_preact(cat, p.w_o, p.b_o))
    c_new = ad.add(ad.mul(f, state.c), ad.mul(i, c_tilde))
    return LstmState(ad.mul(o, ad.tanh(c_new)), c_new)


def self_attention(p: AttentionParams, tokens: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over the token axis; accepts (S, H) or a
    batch of token groups (B, S, H)."""
    q = ad.matmul(tokens, p.w_q)
    k = ad.matmul(tokens, p.w_k)
    v = ad.matmul(tokens, p.w_v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(p.proj_width))
    return ad.matmul(ad.softmax_rows(scores), v)


def sa_lstm_step(p: SaLstmParams, state: LstmState, x: Tensor, tokens: int) -> LstmState:
    """LSTM step whose output-gate pre-activation is residually augmented
    with self-attention across the ``tokens`` segments of each group.

    With zero attention weights the residual term is exactly zero, so the
    step reduces bitwise to ``lstm_step`` on the same rows.
    """
    rows = state.h.shape[0]
    if rows % tokens != 0:
        raise ValueError(f"sa_lstm_step: {rows} state rows not divisible by {tokens} tokens")
    if x.shape != (rows, p.lstm.in_width):
        raise ValueError(
            f"sa_lstm_step: input shape {x.shape} does not match "
            f"(rows={rows}, in_width={p.lstm.in_width})"
        )
    hidden = p.hidden
    cat = ad.concat([state.h, x], axis=1)
    f = ad.sigmoid(_gate_preact(cat, p.lstm.w_f, p.lstm.b_f))
    i = ad.sigmoid(_gate_preact(cat, p.lstm.w_i, p.lstm.b_i))
    c_tilde = ad.tanh(_gate_preact(cat, p.lstm.w_c, p.lstm.b_c))
    z_o = _gate_preact(cat, p.lstm.w_o, p.lstm.b_o)
    grouped = ad.reshape(z_o, (rows // tokens, tokens, hidden))
    mixed = ad.matmul(self_attention(p.attn, grouped), p.out_proj)
    z_o = ad.add(z_o, ad.reshape(mixed, (rows, hidden)))
    o = ad.sigmoid(z_o)
    c_new = ad.add(ad.mul(f, state.c), ad.mul(i, c_tilde))
    return LstmState(ad.mul(o, ad.tanh(c_new)), c_new)
