"""Optimization harness.

Full-batch mode is the reference protocol: one AdamW update per epoch over
every training window, bitwise reproducible from (seed, corpus, config).
Large batches are evaluated in fixed-size taped chunks whose gradients are
accumulated in a fixed order, so chunking bounds memory without breaking
determinism.  A shuffled mini-batch mode exists for faster non-ablation
runs; its shuffle is a pure function of (seed, epoch).

The stacked model trains in stages: stage i updates layer i plus the shared
head against horizon i only, every other layer stays bitwise frozen; the
final stage unfreezes everything under the summed loss.  The learning rate
is replayed from the validation history on every epoch (never stored), so
resuming from a checkpoint cannot drift.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Corpus, NUM_SEGMENTS, build_windows, normalize, stack_windows
from .losses import LossConfig, combined_loss
from .models import (
    AllAtOnceModel,
    NStepModel,
    OneStepModel,
    deserialize_model,
    serialize_model,
)
from .runtime import tune_allocator
from .seeding import block_rng


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite; carries the run
    with the last finite parameter state restored."""

    def __init__(self, message: str, run: "TrainRun"):
        super().__init__(message)
        self.run = run


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: int = 3
    lr_decay_factor: float = 10.0
    epochs_per_stage: int = 48
    seed: int = 0
    full_batch: bool = True
    batch_size: int = 256
    validate_every: int = 4
    monitor: str = "easy"             # easy | hard | train
    loss: LossConfig = field(default_factory=LossConfig)
    train_stride: int = 24            # keep every k-th training window
    val_stride: int = 8               # easy-window subsampling for in-run validation
    grad_chunk: int = 128             # windows per taped chunk (cache locality)
    finetune_lr_scale: float = 0.1    # base lr multiplier for the unfrozen stage

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be > 1")
        if self.monitor not in ("easy", "hard", "train"):
            raise ValueError(f"unknown monitor {self.monitor!r}")
        if self.epochs_per_stage < 0:
            raise ValueError("epochs_per_stage must be >= 0")


@dataclass
class MetricRecord:
    epoch: int
    lr: float
    train_loss: float
    easy: float | None = None
    hard: float | None = None


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay: param *= (1 - lr*wd) independently of the
    bias-corrected moment update."""

    def __init__(self, cfg: TrainConfig):
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.eps
        self.weight_decay = cfg.weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, blocks: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, param in blocks.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != param.data.shape:
                raise ValueError(
                    f"adamw: gradient shape {g.shape} != parameter shape "
                    f"{param.data.shape} for {name}"
                )
            if name not in self.m:
                self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            param.data *= 1.0 - lr * self.weight_decay
            param.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adamw_step(blocks, grads, state: AdamW, lr: float) -> None:
    """Functional entry point matching the optimizer contract."""
    state.step(blocks, grads, lr)


# ---------------------------------------------------------------------------
# plateau scheduler (pure replay)
# ---------------------------------------------------------------------------


def plateau_lr(history: list[float], cfg: TrainConfig, base_lr: float | None = None) -> float:
    """Current learning rate as a pure function of the metric history: decay
    by ``lr_decay_factor`` once ``plateau_patience`` consecutive validations
    fail to improve the best seen value by at least 1e-12; the stall counter
    resets on improvement and on decay, the best value never resets."""
    lr = cfg.lr if base_lr is None else base_lr
    best = np.inf
    bad = 0
    for metric in history:
        if metric < best - 1e-12:
            best = metric
            bad = 0
        else:
            bad += 1
            if bad >= cfg.plateau_patience:
                lr /= cfg.lr_decay_factor
                bad = 0
    return lr


# ---------------------------------------------------------------------------
# data staging and metrics
# ---------------------------------------------------------------------------


@dataclass
class StagedData:
    x: np.ndarray                    # (B, s, 21) normalized
    y: np.ndarray                    # (B, horizon, 21) normalized
    easy: tuple[np.ndarray, np.ndarray]
    hard: list[tuple[np.ndarray, np.ndarray]]


def stage_corpus(corpus: Corpus, s: int, horizon: int, cfg: TrainConfig) -> StagedData:
    x, y = stack_windows(build_windows(corpus.train, s, horizon)[::cfg.train_stride])
    ex, ey = stack_windows(build_windows(corpus.easy, s, horizon)[::cfg.val_stride])
    hard = []
    for series in corpus.hard:
        hx, hy = stack_windows(build_windows(series, s, horizon))
        hard.append((normalize(hx), normalize(hy)))
    return StagedData(x=normalize(x), y=normalize(y),
                      easy=(normalize(ex), normalize(ey)), hard=hard)


def _mse_np(pred: np.ndarray, truth: np.ndarray) -> float:
    d = pred - truth
    return float(np.mean(d * d))


def _eval_mse(model, x, y, horizons: list[int]) -> float:
    """Mean over the requested horizons of the normalized MSE, batched on the
    tape-free path."""
    from .models import predict_batch

    preds = predict_batch(model, x, max(horizons))
    return float(np.mean([_mse_np(preds[:, h - 1], y[:, h - 1]) for h in horizons]))


def validation_metrics(model, staged: StagedData, horizons: list[int]) -> tuple[float, float]:
    easy = _eval_mse(model, staged.easy[0], staged.easy[1], horizons)
    hard = float(np.mean([_eval_mse(model, hx, hy, horizons) for hx, hy in staged.hard]))
    return easy, hard


# ---------------------------------------------------------------------------
# gradient evaluation
# ---------------------------------------------------------------------------


def _stage_loss(model, x_chunk, y_chunk, loss_cfg: LossConfig, horizons: list[int]):
    """Summed per-horizon combined loss over one taped chunk."""
    if isinstance(model, OneStepModel):
        pred = model.forward_graph(x_chunk)
        return combined_loss(pred, ad.tensor(y_chunk[:, 0, :]), loss_cfg)
    if isinstance(model, AllAtOnceModel):
        preds = model.forward_graph(x_chunk)
        total = None
        for h in horizons:
            sl = ad.reshape(ad.narrow(preds, 1, h - 1, 1), (x_chunk.shape[0], NUM_SEGMENTS))
            term = combined_loss(sl, ad.tensor(y_chunk[:, h - 1, :]), loss_cfg)
            total = term if total is None else ad.add(total, term)
        return total
    if isinstance(model, NStepModel):
        preds, _ = model.forward_graph_with_states(x_chunk, upto=max(horizons))
        total = None
        for h in horizons:
            term = combined_loss(preds[h - 1], ad.tensor(y_chunk[:, h - 1, :]), loss_cfg)
            total = term if total is None else ad.add(total, term)
        return total
    raise ValueError(f"cannot train model of type {type(model).__name__}")


def _accumulate_gradients(model, blocks, x, y, cfg: TrainConfig, horizons: list[int],
                          indices: np.ndarray | None = None):
    """Loss value and per-block gradients over the given windows, evaluated
    in fixed chunks; exact full-set mean via chunk-size weighting."""
    if indices is not None:
        x, y = x[indices], y[indices]
    total = x.shape[0]
    grads: dict[str, np.ndarray] = {}
    loss_value = 0.0
    for start in range(0, total, cfg.grad_chunk):
        xc = x[start:start + cfg.grad_chunk]
        yc = y[start:start + cfg.grad_chunk]
        weight = xc.shape[0] / total
        for t in blocks.values():
            t.grad = None
        loss = ad.scale(_stage_loss(model, xc, yc, cfg.loss, horizons), weight)
        ad.backward(loss)
        loss_value += loss.item()
        for name, t in blocks.items():
            if t.grad is None:
                continue
            if name in grads:
                grads[name] = grads[name] + t.grad
            else:
                grads[name] = t.grad
    return loss_value, grads


# ---------------------------------------------------------------------------
# runs and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    model: object
    optimizer: AdamW
    history: list[MetricRecord]
    epoch: int = 0
    best_metric: float = np.inf
    best_params: dict[str, np.ndarray] | None = None

    def monitored_history(self, monitor: str, epochs_lo: int = 0,
                          epochs_hi: int | None = None) -> list[float]:
        out = []
        for rec in self.history:
            if rec.easy is None:
                continue
            if rec.epoch <= epochs_lo or (epochs_hi is not None and rec.epoch > epochs_hi):
                continue
            out.append({"easy": rec.easy, "hard": rec.hard, "train": rec.train_loss}[monitor])
        return out


def _snapshot(blocks: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in blocks.items()}


def _restore(blocks: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for name, t in blocks.items():
        t.data[...] = snap[name]


def config_fingerprint(cfg: TrainConfig) -> str:
    payload = {
        k: (v.hex() if isinstance(v, float) else v)
        for k, v in vars(cfg).items() if k != "loss"
    }
    payload["loss"] = [cfg.loss.pyramid_depth, float(cfg.loss.lap_weight).hex(),
                       cfg.loss.padding_mode]
    return f"{zlib.crc32(json.dumps(payload, sort_keys=True).encode()):08x}"


_CKPT_MAGIC = b"MSCK"


def save_checkpoint(run: TrainRun, cfg: TrainConfig, path) -> None:
    """Model + optimizer moments + metric history + epoch; floats stored as
    hex so the resumed run replays bitwise."""
    model_blob = serialize_model(run.model)
    opt_names = sorted(run.optimizer.m)
    best_names = sorted(run.best_params) if run.best_params else []
    header = {
        "config": config_fingerprint(cfg),
        "epoch": run.epoch,
        "best_metric": float(run.best_metric).hex(),
        "history": [
            [r.epoch, r.lr.hex(), r.train_loss.hex(),
             None if r.easy is None else r.easy.hex(),
             None if r.hard is None else r.hard.hex()]
            for r in run.history
        ],
        "opt": [[n, list(run.optimizer.m[n].shape), run.optimizer.t[n]] for n in opt_names],
        "best": [[n, list(run.best_params[n].shape)] for n in best_names],
        "model_len": len(model_blob),
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = [model_blob]
    for n in opt_names:
        payload.append(np.ascontiguousarray(run.optimizer.m[n], dtype="<f8").tobytes())
        payload.append(np.ascontiguousarray(run.optimizer.v[n], dtype="<f8").tobytes())
    for n in best_names:
        payload.append(np.ascontiguousarray(run.best_params[n], dtype="<f8").tobytes())
    body = _CKPT_MAGIC + len(head).to_bytes(4, "little") + head + b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(body + zlib.crc32(body).to_bytes(4, "little"))


def load_checkpoint(path, cfg: TrainConfig) -> TrainRun:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    body, crc = blob[:-4], int.from_bytes(blob[-4:], "little")
    if zlib.crc32(body) != crc:
        raise ValueError("checkpoint corrupt (checksum mismatch)")
    head_len = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8:8 + head_len].decode())
    if header["config"] != config_fingerprint(cfg):
        raise ValueError("checkpoint was produced under a different training config")
    offset = 8 + head_len
    model = deserialize_model(body[offset:offset + header["model_len"]])
    offset += header["model_len"]
    opt = AdamW(cfg)
    for name, shape, t in header["opt"]:
        n = int(np.prod(shape)) * 8
        opt.m[name] = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
        opt.v[name] = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
        opt.t[name] = t
    best = {}
    for name, shape in header["best"]:
        n = int(np.prod(shape)) * 8
        best[name] = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
    history = [
        MetricRecord(epoch=e, lr=float.fromhex(lr), train_loss=float.fromhex(tl),
                     easy=None if easy is None else float.fromhex(easy),
                     hard=None if hard is None else float.fromhex(hard))
        for e, lr, tl, easy, hard in header["history"]
    ]
    return TrainRun(model=model, optimizer=opt, history=history, epoch=header["epoch"],
                    best_metric=float.fromhex(header["best_metric"]),
                    best_params=best or None)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _batch_order(seed: int, epoch: int, total: int) -> np.ndarray:
    return block_rng(seed, f"shuffle-epoch{epoch}").permutation(total)


def _run_epochs(model, staged: StagedData, cfg: TrainConfig, run: TrainRun,
                first_epoch: int, last_epoch: int, horizons: list[int],
                trainable: set[str] | None, base_lr: float, history_from: int) -> None:
    """Advance ``run`` through epochs (first_epoch, last_epoch]; ``trainable``
    limits which blocks the optimizer touches (None = all)."""
    blocks = run.model.blocks()
    frozen = {n for n in blocks if trainable is not None and n not in trainable}
    updatable = {n: t for n, t in blocks.items() if n not in frozen}
    for epoch in range(first_epoch + 1, last_epoch + 1):
        snapshot = _snapshot(blocks)
        lr = plateau_lr(run.monitored_history(cfg.monitor, history_from, last_epoch),
                        cfg, base_lr)
        if cfg.full_batch:
            loss_value, grads = _accumulate_gradients(
                model, blocks, staged.x, staged.y, cfg, horizons)
            grads = {n: g for n, g in grads.items() if n not in frozen}
            run.optimizer.step(updatable, grads, lr)
        else:
            order = _batch_order(cfg.seed, epoch, staged.x.shape[0])
            loss_value, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                value, grads = _accumulate_gradients(
                    model, blocks, staged.x, staged.y, cfg, horizons, indices=idx)
                grads = {n: g for n, g in grads.items() if n not in frozen}
                run.optimizer.step(updatable, grads, lr)
                loss_value += value * len(idx)
                seen += len(idx)
            loss_value /= max(seen, 1)
        if not np.isfinite(loss_value):
            _restore(blocks, snapshot)
            run.epoch = epoch - 1
            raise DivergenceError(
                f"training loss became non-finite at epoch {epoch}; "
                "parameters restored to the last finite epoch", run)
        record = MetricRecord(epoch=epoch, lr=lr, train_loss=loss_value)
        if epoch % cfg.validate_every == 0 or epoch == last_epoch:
            easy, hard = validation_metrics(run.model, staged, horizons)
            record.easy, record.hard = easy, hard
            monitored = {"easy": easy, "hard": hard, "train": loss_value}[cfg.monitor]
            if monitored < run.best_metric:
                run.best_metric = monitored
                run.best_params = _snapshot(blocks)
        run.history.append(record)
        run.epoch = epoch


def train_one_step_model(model, corpus: Corpus, cfg: TrainConfig,
                         resume: TrainRun | None = None) -> TrainRun:
    """Single-stage training for the one-step kinds and the all-at-once
    model; loss is the per-horizon combined objective summed over the
    model's horizons."""
    tune_allocator()
    run = resume or TrainRun(model=model, optimizer=AdamW(cfg), history=[])
    model = run.model
    horizon = getattr(model, "horizon", 1)
    horizons = list(range(1, horizon + 1))
    staged = stage_corpus(corpus, model.s, horizon, cfg)
    _run_epochs(model, staged, cfg, run, run.epoch, cfg.epochs_per_stage, horizons,
                trainable=None, base_lr=cfg.lr, history_from=0)
    if run.best_params is None:
        run.best_params = _snapshot(run.model.blocks())
        if run.history:
            run.best_metric = run.history[-1].train_loss
    return run


def nstep_stage_bounds(n_layers: int, epochs_per_stage: int) -> list[tuple[int, int]]:
    """(first, last] epoch bounds for stages 1..n plus the fine-tune stage."""
    return [(i * epochs_per_stage, (i + 1) * epochs_per_stage) for i in range(n_layers + 1)]


def train_nstep(model: NStepModel, corpus: Corpus, cfg: TrainConfig,
                resume: TrainRun | None = None) -> TrainRun:
    """Staged schedule: stage i trains layer i and the shared head on horizon
    i alone; the final stage unfreezes every layer under the summed loss at
    a reduced base rate.  Frozen blocks are bitwise untouched."""
    tune_allocator()
    run = resume or TrainRun(model=model, optimizer=AdamW(cfg), history=[])
    model = run.model
    n = model.horizon
    staged = stage_corpus(corpus, model.s, n, cfg)
    for stage_index, (first, last) in enumerate(nstep_stage_bounds(n, cfg.epochs_per_stage)):
        if run.epoch >= last:
            continue
        finetune = stage_index == n
        if finetune:
            trainable = None
            horizons = list(range(1, n + 1))
            base_lr = cfg.lr * cfg.finetune_lr_scale
        else:
            trainable = set(model.layer_block_names(stage_index)) | {"head/w", "head/b"}
            horizons = [stage_index + 1]
            base_lr = cfg.lr
        _run_epochs(model, staged, cfg, run, max(run.epoch, first), last, horizons,
                    trainable=trainable, base_lr=base_lr, history_from=first)
    if run.best_params is None:
        run.best_params = _snapshot(model.blocks())
        if run.history:
            run.best_metric = run.history[-1].train_loss
    return run


def best_model(run: TrainRun):
    """Copy of the run's model carrying the best validated parameters."""
    blob = serialize_model(run.model)
    model = deserialize_model(blob)
    if run.best_params is not None:
        _restore(model.blocks(), run.best_params)
    return model
