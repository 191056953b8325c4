"""Forecaster assemblies.

Every model maps ``s`` consecutive normalized velocity fields to one or more
normalized 21-wide predictions:

* ``lstm``       dense baseline, the whole field is one input vector;
* ``lstm-seg``   per-segment shared-weight LSTM, one token per segment;
* ``sa-lstm``    per-segment LSTM with attention on the output gate;
* ``all-at-once`` SA-LSTM emitting every horizon from a single unroll;
* ``nstep``      stacked SA-LSTM layers, layer i re-reads the input window
  plus the earlier predictions (s+i-1 cells) starting from layer i-1's
  terminal state, all layers sharing one affine head.

Each model has two execution paths: a taped forward used for training and
batched evaluation, and a buffer-reusing single-window plan for latency-
critical inference.  Both compute the same formulas; tests pin them to each
other at 1e-12.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import (
    AttentionParams,
    LstmParams,
    LstmState,
    SaLstmParams,
    init_lstm_params,
    init_sa_lstm_params,
    lstm_step,
    sa_lstm_step,
    zero_state,
)
from .data import NUM_SEGMENTS
from .seeding import block_rng

ONE_STEP_KINDS = ("lstm", "lstm-seg", "sa-lstm")
MODEL_KINDS = ONE_STEP_KINDS + ("all-at-once", "nstep")


@dataclass
class Forecast:
    """Normalized horizon predictions plus per-layer terminal states when
    produced by the stacked model."""

    horizons: np.ndarray                     # (n, NUM_SEGMENTS)
    layer_steps: list[int] | None = None     # cells unrolled per layer
    terminal_states: list[tuple[np.ndarray, np.ndarray]] | None = None


def _init_head(hidden: int, width: int, seed: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(hidden)
    w = ad.parameter(block_rng(seed, "head/w").uniform(-bound, bound, (hidden, width)))
    b = ad.parameter(np.zeros(width))
    return w, b


def _check_window(x: np.ndarray, s: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (s, NUM_SEGMENTS):
        raise ValueError(f"window shape {x.shape} does not match (s={s}, {NUM_SEGMENTS})")
    return x


def _check_batch(x: np.ndarray, s: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (s, NUM_SEGMENTS):
        raise ValueError(f"batch shape {x.shape} does not match (B, s={s}, {NUM_SEGMENTS})")
    return x


def _head_apply(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(h, w), b)


@dataclass
class OneStepModel:
    kind: str
    cell: LstmParams | SaLstmParams
    head_w: Tensor
    head_b: Tensor
    s: int

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    @property
    def attn_width(self) -> int:
        return self.cell.attn.proj_width if self.kind == "sa-lstm" else 0

    def blocks(self) -> dict[str, Tensor]:
        out = self.cell.blocks("layer1")
        out["head/w"] = self.head_w
        out["head/b"] = self.head_b
        return out

    def dims(self) -> dict:
        return {"s": self.s, "hidden": self.hidden, "attn_width": self.attn_width}

    def forward_graph(self, x) -> Tensor:
        """Batched taped forward: (B, s, 21) normalized -> (B, 21)."""
        x = _check_batch(x, self.s)
        B = x.shape[0]
        if self.kind == "lstm":
            state = zero_state(B, self.hidden)
            for t in range(self.s):
                state = lstm_step(self.cell, state, ad.tensor(x[:, t, :]))
            return _head_apply(state.h, self.head_w, self.head_b)
        rows = B * NUM_SEGMENTS
        state = zero_state(rows, self.hidden)
        for t in range(self.s):
            xt = ad.tensor(np.ascontiguousarray(x[:, t, :]).reshape(rows, 1))
            if self.kind == "sa-lstm":
                state = sa_lstm_step(self.cell, state, xt, tokens=NUM_SEGMENTS)
            else:
                state = lstm_step(self.cell, state, xt)
        out = _head_apply(state.h, self.head_w, self.head_b)
        return ad.reshape(out, (B, NUM_SEGMENTS))

    def detached(self) -> "OneStepModel":
        return OneStepModel(self.kind, _detach_cell(self.cell), ad.tensor(self.head_w.data),
                            ad.tensor(self.head_b.data), self.s)


@dataclass
class AllAtOnceModel:
    cell: SaLstmParams
    head_w: Tensor
    head_b: Tensor
    s: int
    horizon: int
    kind: str = "all-at-once"

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    @property
    def attn_width(self) -> int:
        return self.cell.attn.proj_width

    def blocks(self) -> dict[str, Tensor]:
        out = self.cell.blocks("layer1")
        out["head/w"] = self.head_w
        out["head/b"] = self.head_b
        return out

    def dims(self) -> dict:
        return {"s": self.s, "hidden": self.hidden, "attn_width": self.attn_width,
                "horizon": self.horizon}

    def forward_graph(self, x) -> Tensor:
        """(B, s, 21) -> (B, horizon, 21); horizon k is head column k."""
        x = _check_batch(x, self.s)
        B = x.shape[0]
        rows = B * NUM_SEGMENTS
        state = zero_state(rows, self.hidden)
        for t in range(self.s):
            xt = ad.tensor(np.ascontiguousarray(x[:, t, :]).reshape(rows, 1))
            state = sa_lstm_step(self.cell, state, xt, tokens=NUM_SEGMENTS)
        out = _head_apply(state.h, self.head_w, self.head_b)   # (rows, horizon)
        grouped = ad.reshape(out, (B, NUM_SEGMENTS, self.horizon))
        return ad.transpose(grouped)                           # (B, horizon, 21)

    def detached(self) -> "AllAtOnceModel":
        return AllAtOnceModel(_detach_cell(self.cell), ad.tensor(self.head_w.data),
                              ad.tensor(self.head_b.data), self.s, self.horizon)


@dataclass
class NStepModel:
    layers: list[SaLstmParams]
    head_w: Tensor
    head_b: Tensor
    s: int
    kind: str = "nstep"

    @property
    def horizon(self) -> int:
        return len(self.layers)

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    @property
    def attn_width(self) -> int:
        return self.layers[0].attn.proj_width

    def layer_steps(self) -> list[int]:
        return [self.s + i for i in range(self.horizon)]

    def blocks(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.blocks(f"layer{i + 1}"))
        out["head/w"] = self.head_w
        out["head/b"] = self.head_b
        return out

    def layer_block_names(self, index: int) -> list[str]:
        return list(self.layers[index].blocks(f"layer{index + 1}").keys())

    def dims(self) -> dict:
        return {"s": self.s, "hidden": self.hidden, "attn_width": self.attn_width,
                "horizon": self.horizon}

    def forward_graph(self, x) -> list[Tensor]:
        """(B, s, 21) -> one (B, 21) prediction tensor per horizon."""
        preds, _ = self.forward_graph_with_states(x)
        return preds

    def forward_graph_with_states(self, x, upto: int | None = None):
        x = _check_batch(x, self.s)
        B = x.shape[0]
        rows = B * NUM_SEGMENTS
        base = [ad.tensor(np.ascontiguousarray(x[:, t, :]).reshape(rows, 1))
                for t in range(self.s)]
        preds: list[Tensor] = []
        states: list[LstmState] = []
        state = zero_state(rows, self.hidden)
        for i, layer in enumerate(self.layers[:upto]):
            seq = base + [ad.reshape(p, (rows, 1)) for p in preds]
            assert len(seq) == self.s + i
            for xt in seq:
                state = sa_lstm_step(layer, state, xt, tokens=NUM_SEGMENTS)
            out = _head_apply(state.h, self.head_w, self.head_b)
            preds.append(ad.reshape(out, (B, NUM_SEGMENTS)))
            states.append(state)
        return preds, states

    def detached(self) -> "NStepModel":
        return NStepModel([_detach_cell(l) for l in self.layers],
                          ad.tensor(self.head_w.data), ad.tensor(self.head_b.data), self.s)


def _detach_cell(cell):
    if isinstance(cell, SaLstmParams):
        return SaLstmParams(
            lstm=_detach_cell(cell.lstm),
            attn=AttentionParams(*(ad.tensor(t.data) for t in
                                   (cell.attn.w_q, cell.attn.w_k, cell.attn.w_v))),
            out_proj=ad.tensor(cell.out_proj.data),
        )
    return LstmParams(*(ad.tensor(getattr(cell, f"w_{g}").data) for g in "fico"),
                      *(ad.tensor(getattr(cell, f"b_{g}").data) for g in "fico"))


def build_model(kind: str, s: int = 8, hidden: int = 64, attn_width: int = 16,
                horizon: int = 3, seed: int = 0):
    """Construct a freshly initialised model of the given kind; parameter
    blocks draw name-keyed streams so shared block names agree across kinds."""
    if kind == "lstm":
        cell = init_lstm_params(hidden, NUM_SEGMENTS, seed, "layer1")
        w, b = _init_head(hidden, NUM_SEGMENTS, seed)
        return OneStepModel("lstm", cell, w, b, s)
    if kind == "lstm-seg":
        cell = init_lstm_params(hidden, 1, seed, "layer1")
        w, b = _init_head(hidden, 1, seed)
        return OneStepModel("lstm-seg", cell, w, b, s)
    if kind == "sa-lstm":
        cell = init_sa_lstm_params(hidden, attn_width, seed, "layer1")
        w, b = _init_head(hidden, 1, seed)
        return OneStepModel("sa-lstm", cell, w, b, s)
    if kind == "all-at-once":
        cell = init_sa_lstm_params(hidden, attn_width, seed, "layer1")
        w, b = _init_head(hidden, horizon, seed)
        return AllAtOnceModel(cell, w, b, s, horizon)
    if kind == "nstep":
        layers = [init_sa_lstm_params(hidden, attn_width, seed, f"layer{i + 1}")
                  for i in range(horizon)]
        w, b = _init_head(hidden, 1, seed)
        return NStepModel(layers, w, b, s)
    raise ValueError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")


# ---------------------------------------------------------------------------
# single-window inference plans (latency path)
# ---------------------------------------------------------------------------


class _SaCellBuffers:
    """Preallocated buffers for one SA-LSTM (or plain per-segment LSTM) step
    over ``tokens`` rows.  Gate biases ride as an appended ones column; the
    attention query projection carries the 1/sqrt(d) scaling."""

    def __init__(self, cell, tokens: int, in_width: int):
        hidden = cell.hidden
        lstm = cell.lstm if isinstance(cell, SaLstmParams) else cell
        self.hidden = hidden
        self.in_width = in_width
        self.tokens = tokens
        self.w = {g: np.vstack([getattr(lstm, f"w_{g}").data,
                                getattr(lstm, f"b_{g}").data[None, :]])
                  for g in "fico"}
        self.cat = np.empty((tokens, hidden + in_width + 1))
        self.cat[:, -1] = 1.0
        self.zf = np.empty((tokens, hidden))
        self.zi = np.empty((tokens, hidden))
        self.zc = np.empty((tokens, hidden))
        self.zo = np.empty((tokens, hidden))
        self.h = np.zeros((tokens, hidden))
        self.c = np.zeros((tokens, hidden))
        self.tmp = np.empty((tokens, hidden))
        self.attn = None
        if isinstance(cell, SaLstmParams):
            d = cell.attn.proj_width
            self.attn = {
                "wq": cell.attn.w_q.data / np.sqrt(d),
                "wk": np.ascontiguousarray(cell.attn.w_k.data),
                "wv": np.ascontiguousarray(cell.attn.w_v.data),
                "proj": np.ascontiguousarray(cell.out_proj.data),
            }
            self.q = np.empty((tokens, d))
            self.k = np.empty((tokens, d))
            self.v = np.empty((tokens, d))
            self.scores = np.empty((tokens, tokens))
            self.row = np.empty((tokens, 1))
            self.att = np.empty((tokens, d))
            self.mixed = np.empty((tokens, hidden))

    def reset(self):
        self.h.fill(0.0)
        self.c.fill(0.0)

    def step(self, x: np.ndarray):
        hid = self.hidden
        self.cat[:, :hid] = self.h
        self.cat[:, hid:hid + self.in_width] = x
        np.dot(self.cat, self.w["f"], out=self.zf)
        ad.sigmoid_array(self.zf, out=self.zf)
        np.dot(self.cat, self.w["i"], out=self.zi)
        ad.sigmoid_array(self.zi, out=self.zi)
        np.dot(self.cat, self.w["c"], out=self.zc)
        np.tanh(self.zc, out=self.zc)
        np.dot(self.cat, self.w["o"], out=self.zo)
        if self.attn is not None:
            a = self.attn
            np.dot(self.zo, a["wq"], out=self.q)
            np.dot(self.zo, a["wk"], out=self.k)
            np.dot(self.zo, a["wv"], out=self.v)
            np.dot(self.q, self.k.T, out=self.scores)
            np.max(self.scores, axis=1, keepdims=True, out=self.row)
            self.scores -= self.row
            np.exp(self.scores, out=self.scores)
            np.sum(self.scores, axis=1, keepdims=True, out=self.row)
            self.scores /= self.row
            np.dot(self.scores, self.v, out=self.att)
            np.dot(self.att, a["proj"], out=self.mixed)
            self.zo += self.mixed
        ad.sigmoid_array(self.zo, out=self.zo)
        self.c *= self.zf
        np.multiply(self.zi, self.zc, out=self.tmp)
        self.c += self.tmp
        np.tanh(self.c, out=self.tmp)
        np.multiply(self.zo, self.tmp, out=self.h)


class InferencePlan:
    """Low-latency single-window forward for a frozen parameter snapshot.

    Buffers are allocated once and reused, so a plan is not thread-safe;
    build one plan per thread.  Rebuild after parameters change.
    """

    def __init__(self, model):
        self.kind = model.kind
        self.s = model.s
        self.horizon = getattr(model, "horizon", 1)
        self.head_w = np.ascontiguousarray(model.head_w.data)
        self.head_b = model.head_b.data.copy()
        if model.kind == "lstm":
            self.cells = [_SaCellBuffers(model.cell, 1, NUM_SEGMENTS)]
        elif model.kind in ("lstm-seg", "sa-lstm", "all-at-once"):
            self.cells = [_SaCellBuffers(model.cell, NUM_SEGMENTS, 1)]
        elif model.kind == "nstep":
            self.cells = [_SaCellBuffers(layer, NUM_SEGMENTS, 1) for layer in model.layers]
        else:
            raise ValueError(f"no inference plan for kind {model.kind!r}")
        self._xcol = np.empty((NUM_SEGMENTS, 1))

    def run(self, window: np.ndarray) -> np.ndarray:
        """(s, 21) normalized -> (horizon, 21) normalized (horizon taken from
        the model; one-step kinds return a single row)."""
        window = _check_window(window, self.s)
        if self.kind == "lstm":
            cell = self.cells[0]
            cell.reset()
            for t in range(self.s):
                cell.step(window[t][None, :])
            return (cell.h @ self.head_w + self.head_b).reshape(1, NUM_SEGMENTS)
        if self.kind in ("lstm-seg", "sa-lstm"):
            cell = self.cells[0]
            cell.reset()
            for t in range(self.s):
                self._xcol[:, 0] = window[t]
                cell.step(self._xcol)
            return (cell.h @ self.head_w + self.head_b).reshape(1, NUM_SEGMENTS)
        if self.kind == "all-at-once":
            cell = self.cells[0]
            cell.reset()
            for t in range(self.s):
                self._xcol[:, 0] = window[t]
                cell.step(self._xcol)
            return np.ascontiguousarray((cell.h @ self.head_w + self.head_b).T)
        # nstep: layer i re-reads the window plus earlier predictions and
        # starts from the previous layer's terminal state
        preds = np.empty((self.horizon, NUM_SEGMENTS))
        prev = None
        for i, cell in enumerate(self.cells):
            if prev is None:
                cell.reset()
            else:
                cell.h[:] = prev.h
                cell.c[:] = prev.c
            for t in range(self.s):
                self._xcol[:, 0] = window[t]
                cell.step(self._xcol)
            for j in range(i):
                self._xcol[:, 0] = preds[j]
                cell.step(self._xcol)
            preds[i] = ((cell.h @ self.head_w).ravel() + self.head_b[0])
            prev = cell
        return preds


# ---------------------------------------------------------------------------
# forecasting entry points
# ---------------------------------------------------------------------------


def forecast_one(model: OneStepModel, window: np.ndarray,
                 plan: InferencePlan | None = None) -> np.ndarray:
    """One normalized velocity field from one window."""
    if model.kind not in ONE_STEP_KINDS:
        raise ValueError(f"forecast_one needs a one-step model, got {model.kind!r}")
    plan = plan or InferencePlan(model)
    return plan.run(window)[0]


def forecast_recursive(model: OneStepModel, window: np.ndarray, horizons: int,
                       plan: InferencePlan | None = None) -> Forecast:
    """Feed each prediction back as the newest frame: horizon k consumes the
    last s entries of (window + predictions so far)."""
    if horizons < 1:
        raise ValueError(f"horizons must be >= 1, got {horizons}")
    plan = plan or InferencePlan(model)
    window = _check_window(window, model.s)
    rolling = np.array(window)
    out = np.empty((horizons, NUM_SEGMENTS))
    for k in range(horizons):
        out[k] = plan.run(rolling)[0]
        rolling = np.vstack([rolling[1:], out[k][None, :]])
    return Forecast(horizons=out)


def forecast_all_at_once(model: AllAtOnceModel, window: np.ndarray,
                         plan: InferencePlan | None = None) -> Forecast:
    plan = plan or InferencePlan(model)
    return Forecast(horizons=plan.run(window))


def nstep_forward(model: NStepModel, window: np.ndarray) -> Forecast:
    """Taped-path forward for one window, returning per-layer terminal
    states; use an InferencePlan when only speed matters."""
    preds, states = model.forward_graph_with_states(np.asarray(window)[None, :, :])
    return Forecast(
        horizons=np.vstack([p.data[0] for p in preds]),
        layer_steps=model.layer_steps(),
        terminal_states=[(st.h.data.copy(), st.c.data.copy()) for st in states],
    )


def predict_batch(model, x: np.ndarray, horizons: int) -> np.ndarray:
    """(B, s, 21) -> (B, horizons, 21) on the tape-free batched path; one-step
    models cover extra horizons recursively."""
    x = _check_batch(x, model.s)
    m = model.detached()
    if model.kind in ONE_STEP_KINDS:
        rolling = x
        outs = []
        for _ in range(horizons):
            pred = m.forward_graph(rolling).data
            outs.append(pred)
            rolling = np.concatenate([rolling[:, 1:, :], pred[:, None, :]], axis=1)
        return np.stack(outs, axis=1)
    if model.kind == "all-at-once":
        if horizons > model.horizon:
            raise ValueError(f"model emits {model.horizon} horizons, {horizons} requested")
        return m.forward_graph(x).data[:, :horizons, :]
    if model.kind == "nstep":
        if horizons > model.horizon:
            raise ValueError(f"model emits {model.horizon} horizons, {horizons} requested")
        preds = m.forward_graph(x)
        return np.stack([p.data for p in preds[:horizons]], axis=1)
    raise ValueError(f"unknown model kind {model.kind!r}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MSOC"
_FORMAT_VERSION = 1


def serialize_model(model) -> bytes:
    """Versioned binary: magic, version, JSON header (kind, dims, block
    table), float64 little-endian payload, trailing crc32."""
    blocks = model.blocks()
    header = {
        "format_version": _FORMAT_VERSION,
        "kind": model.kind,
        "dims": model.dims(),
        "blocks": [[name, list(t.data.shape)] for name, t in blocks.items()],
    }
    head_bytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                       for t in blocks.values())
    body = _MAGIC + len(head_bytes).to_bytes(4, "little") + head_bytes + payload
    return body + zlib.crc32(body).to_bytes(4, "little")


def deserialize_model(blob: bytes, expect_kind: str | None = None):
    header, payload = _read_container(blob, expect_kind)
    dims = header["dims"]
    model = build_model(header["kind"], s=dims["s"], hidden=dims["hidden"],
                        attn_width=dims["attn_width"] or 16,
                        horizon=dims.get("horizon", 3), seed=0)
    _fill_blocks(model, header["blocks"], payload)
    return model


def _read_container(blob: bytes, expect_kind: str | None):
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ValueError("not a model container (bad magic)")
    body, crc = blob[:-4], int.from_bytes(blob[-4:], "little")
    if zlib.crc32(body) != crc:
        raise ValueError("model container corrupt (checksum mismatch)")
    head_len = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8:8 + head_len].decode())
    if header["format_version"] != _FORMAT_VERSION:
        raise ValueError(f"unsupported container version {header['format_version']}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ValueError(
            f"model kind mismatch: container holds {header['kind']!r}, "
            f"expected {expect_kind!r}"
        )
    payload = body[8 + head_len:]
    expected = sum(int(np.prod(shape)) for _, shape in header["blocks"]) * 8
    if len(payload) != expected:
        raise ValueError(f"payload truncated: {len(payload)} bytes, expected {expected}")
    return header, payload

def _fill_blocks(model, block_table, payload: bytes) -> None:
    blocks = model.blocks()
    if [name for name, _ in block_table] != list(blocks.keys()):
        raise ValueError("block table does not match model structure")
    offset = 0
    for name, shape in block_table:
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f8").reshape(shape)
        blocks[name].data[...] = arr
        offset += n


def save_model(model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path, expect_kind: str | None = None):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read(), expect_kind)
