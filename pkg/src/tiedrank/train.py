"""Deterministic training loop: Adam, reduce-on-plateau on validation
mAP@10, early stopping, best-checkpoint tracking, and the ablation grid."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data import Batch, PairedDataset, SynthSpec, batch_iter, collate, EmbeddingSequence
from .errors import ConfigError, ContractError, NumericFault
from .evaluate import RetrievalReport, evaluate
from .losses import LossConfig, combined_loss
from .model import ModelConfig, TiedRetrievalModel, copy_model, forward_from_tensors, init_model


@dataclass
class TrainConfig:
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 32
    max_epochs: int = 150
    lr: float = 1e-3
    weight_decay: float = 0.0
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 15
    improvement_eps: float = 1e-6
    seed: int = 0
    trainable_embeddings: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.plateau_factor <= 0:
            raise ConfigError("rates must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.max_epochs < 0 or self.weight_decay < 0:
            raise ConfigError("max_epochs and weight_decay must be non-negative")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, state: AdamState, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam over a name -> Tensor dict; a missing .grad
    counts as a zero gradient."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} mismatches {name} {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    lr_current: float
    best_metric: float = -math.inf
    plateau_count: int = 0
    epochs_since_improvement: int = 0
    n_reductions: int = 0
    epoch: int = 0


def scheduler_step(state: TrainState, val_metric: float,
                   plateau_factor: float = 0.1, plateau_patience: int = 5,
                   improvement_eps: float = 1e-6) -> TrainState:
    """Improvement resets both counters; plateau_patience non-improving
    epochs multiply the rate by plateau_factor and restart the plateau
    counter. The early-stop counter only resets on improvement."""
    if not math.isfinite(val_metric):
        raise NumericFault(f"validation metric is not finite: {val_metric}")
    if val_metric > state.best_metric + improvement_eps:
        state.best_metric = val_metric
        state.plateau_count = 0
        state.epochs_since_improvement = 0
    else:
        state.plateau_count += 1
        state.epochs_since_improvement += 1
        if state.plateau_count >= plateau_patience:
            state.lr_current *= plateau_factor
            state.plateau_count = 0
            state.n_reductions += 1
    return state


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_map10: float
    val_r1: float
    val_r5: float
    val_r10: float
    lr: float


HISTORY_HEADER = "epoch,train_loss,val_map10,val_r1,val_r5,val_r10,lr"


def write_history_csv(history: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss!r},{row.val_map10!r},{row.val_r1!r},"
                     f"{row.val_r5!r},{row.val_r10!r},{row.lr!r}\n")


def read_history_csv(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != HISTORY_HEADER:
            raise ContractError(f"unexpected history header: {header}")
        for line in fh:
            e, tl, m10, r1, r5, r10, lr = line.strip().split(",")
            rows.append(HistoryRow(int(e), float(tl), float(m10), float(r1),
                                   float(r5), float(r10), float(lr)))
    return rows


@dataclass
class TrainResult:
    best_model: TiedRetrievalModel
    final_model: TiedRetrievalModel
    history: list
    state: TrainState
    best_val_map10: float
    # populated only on the trainable-embeddings path
    tuned_train: Optional[PairedDataset] = None
    tuned_val: Optional[PairedDataset] = None


def materialize_embeddings(dataset: PairedDataset, audio_map: np.ndarray,
                           text_map: np.ndarray) -> PairedDataset:
    """Rebuild a synthetic dataset's frames from its latents and noise under
    replacement embedding maps (the trainable-embeddings evaluation view)."""
    sp = dataset.synth
    if sp is None:
        raise ContractError("dataset carries no synthesis record")
    a64, t64 = audio_map.astype(np.float64), text_map.astype(np.float64)
    audio_items = []
    for i, item in enumerate(dataset.audio_items):
        frames = sp.latents[i] @ a64.T + sp.sigma * sp.audio_noise[i]
        audio_items.append(EmbeddingSequence(item.id, "audio",
                                             Tensor(frames.astype(np.float32)), item.mask))
    caption_items = []
    for ci, item in enumerate(dataset.caption_items):
        z = sp.latents[dataset.pairing[ci]]
        frames = z @ t64.T + sp.sigma * sp.text_noise[ci]
        caption_items.append(EmbeddingSequence(item.id, "text",
                                               Tensor(frames.astype(np.float32)), item.mask))
    synth = SynthSpec(args=dict(sp.args), audio_map=a64, text_map=t64,
                      latents=sp.latents, audio_noise=sp.audio_noise,
                      text_noise=sp.text_noise, sigma=sp.sigma)
    return PairedDataset(audio_items, caption_items, list(dataset.pairing), synth=synth)


def _embedding_batch_tensors(ds: PairedDataset, batch: Batch,
                             emb_a: Tensor, emb_t: Tensor) -> tuple:
    """Differentiable reconstruction of batch frames from the synthetic
    latents: frames = latent @ map.T tiled over time, plus fixed noise."""
    sp = ds.synth
    b = len(batch.caption_indices)
    t_a, d_a = batch.audio_frames.shape[1:]
    t_t, d_t = batch.text_frames.shape[1:]
    lat = sp.latents[batch.audio_indices].astype(np.float32)

    def build(emb: Tensor, t_len: int, d: int, noises: list, lengths: list) -> Tensor:
        base = ad.matmul(Tensor(lat), ad.transpose(emb))  # [B, d]
        ones = Tensor(np.ones((b, t_len, 1), dtype=np.float32))
        tiled = ad.matmul(ones, ad.reshape(base, (b, 1, d)))
        padded = np.zeros((b, t_len, d), dtype=np.float32)
        for row, (noise, n) in enumerate(zip(noises, lengths)):
            padded[row, :n] = sp.sigma * noise
        return ad.add(tiled, Tensor(padded))

    audio_noises = [sp.audio_noise[ai] for ai in batch.audio_indices]
    audio_lens = [ds.audio_items[ai].length for ai in batch.audio_indices]
    text_noises = [sp.text_noise[ci] for ci in batch.caption_indices]
    text_lens = [ds.caption_items[ci].length for ci in batch.caption_indices]
    frames_a = build(emb_a, t_a, d_a, audio_noises, audio_lens)
    frames_t = build(emb_t, t_t, d_t, text_noises, text_lens)
    return frames_a, frames_t


def train(config: TrainConfig, ds_train: PairedDataset,
          ds_val: PairedDataset) -> TrainResult:
    """Full protocol: per-epoch batches -> forward -> combined loss ->
    backward -> Adam; epoch end -> validation mAP@10 -> plateau scheduling,
    early stopping, best-model snapshot. Deterministic under the seed."""
    if not ds_val.caption_items:
        raise ContractError("validation dataset is empty")
    model = init_model(config.model, config.seed)
    trainables = dict(model.params)
    emb_a = emb_t = None
    if config.trainable_embeddings:
        if ds_train.synth is None:
            raise ConfigError("trainable_embeddings needs a synthetic dataset "
                              "with generation records")
        emb_a = Tensor(ds_train.synth.audio_map.astype(np.float32))
        emb_t = Tensor(ds_train.synth.text_map.astype(np.float32))
        trainables["emb_A.map"] = emb_a
        trainables["emb_T.map"] = emb_t
    opt = AdamState.for_params(trainables)
    state = TrainState(lr_current=config.lr)
    history: list = []
    best_model = copy_model(model)
    best_val = -math.inf
    tuned_val = None

    for epoch in range(config.max_epochs):
        state.epoch = epoch
        losses = []
        for step, indices in enumerate(batch_iter(ds_train, config.batch_size,
                                                  config.seed, epoch)):
            batch = collate(ds_train, indices)
            loss_rng = None
            if config.loss.negative_strategy == "random_one":
                loss_rng = np.random.default_rng(
                    np.random.SeedSequence([771204, config.seed, epoch, step]))
            ad.zero_grad(list(trainables.values()))
            with Tape() as tape:
                tape.watch(*trainables.values())
                if config.trainable_embeddings:
                    frames_a, frames_t = _embedding_batch_tensors(ds_train, batch, emb_a, emb_t)
                else:
                    frames_a = Tensor(batch.audio_frames)
                    frames_t = Tensor(batch.text_frames)
                r_a, r_t, c_a, c_t = forward_from_tensors(
                    model, frames_a, batch.audio_mask, frames_t, batch.text_mask)
                loss = combined_loss(r_a, r_t, c_a, c_t, model.logit_scale,
                                     config.loss, rng=loss_rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    ids = [ds_train.caption_items[ci].id for ci in indices]
                    raise NumericFault(
                        f"non-finite loss {value} at epoch {epoch} step {step}; "
                        f"batch captions: {', '.join(ids)}")
                backward(loss)
            adam_step(trainables, opt, state.lr_current,
                      weight_decay=config.weight_decay)
            model.clamp_logit_scale()
            losses.append(value)

        train_loss = sum(losses) / len(losses) if losses else 0.0
        if config.trainable_embeddings:
            val_view = materialize_embeddings(ds_val, emb_a.data, emb_t.data)
            tuned_val = val_view
        else:
            val_view = ds_val
        report = evaluate(model, val_view)
        history.append(HistoryRow(epoch, train_loss, report.map10, report.r1,
                                  report.r5, report.r10, state.lr_current))
        if report.map10 > best_val:
            best_val = report.map10
            best_model = copy_model(model)
        scheduler_step(state, report.map10,
                       plateau_factor=config.plateau_factor,
                       plateau_patience=config.plateau_patience,
                       improvement_eps=config.improvement_eps)
        if state.epochs_since_improvement >= config.early_stop_patience:
            break

    if best_val == -math.inf:
        best_val = float("nan")
    result = TrainResult(best_model=best_model, final_model=model,
                         history=history, state=state, best_val_map10=best_val)
    if config.trainable_embeddings:
        result.tuned_train = materialize_embeddings(ds_train, emb_a.data, emb_t.data)
        result.tuned_val = tuned_val if tuned_val is not None else \
            materialize_embeddings(ds_val, emb_a.data, emb_t.data)
    return result


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "use_contrastive": (True, False),
    "trainable_embeddings": (False, True),
    "tied_kind": ("transformer", "linear"),
    "tied": (True, False),
}


def _cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    loss = base.loss
    model_cfg = base.model
    cfg = base
    if "use_contrastive" in cell:
        loss = replace(loss, use_contrastive=cell["use_contrastive"])
    if "tied_kind" in cell:
        model_cfg = replace(model_cfg, tied_kind=cell["tied_kind"])
    if "tied" in cell:
        model_cfg = replace(model_cfg, tied=cell["tied"])
    cfg = replace(cfg, loss=loss, model=model_cfg)
    if "trainable_embeddings" in cell:
        cfg = replace(cfg, trainable_embeddings=cell["trainable_embeddings"])
    return cfg


def cell_label(cell: dict) -> str:
    return ",".join(f"{k}={cell[k]}" for k in sorted(cell)) if cell else "base"


def ablation_grid(base: TrainConfig, axes: list, ds_train: PairedDataset,
                  ds_val: PairedDataset, max_workers: Optional[int] = None) -> list:
    """Train one run per grid cell over the requested axes; every cell uses
    the same data and seed. Returns [(cell dict, best val RetrievalReport)]."""
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; "
                              f"choose from {sorted(ABLATION_AXES)}")
    cells = [{}]
    for axis in axes:
        cells = [dict(c, **{axis: v}) for c in cells for v in ABLATION_AXES[axis]]

    def run(cell: dict):
        cfg = _cell_config(base, cell)
        result = train(cfg, ds_train, ds_val)
        val_view = result.tuned_val if result.tuned_val is not None else ds_val
        report = evaluate(result.best_model, val_view)
        return cell, report

    if max_workers is None:
        env = os.environ.get("TIEDRANK_THREADS", "")
        max_workers = max(1, int(env)) if env.isdigit() and env != "0" else min(4, len(cells))
    if max_workers <= 1 or len(cells) == 1:
        return [run(c) for c in cells]
    with ThreadPoolExecutor(max_workers=min(max_workers, len(cells))) as pool:
        return list(pool.map(run, cells))


def ablation_csv(rows: list) -> str:
    lines = ["cell,map10,r1,r5,r10"]
    for cell, report in rows:
        lines.append(f"{cell_label(cell)},{report.map10!r},{report.r1!r},"
                     f"{report.r5!r},{report.r10!r}")
    return "\n".join(lines) + "\n"


def ablation_table(rows: list) -> str:
    width = max(len(cell_label(c)) for c, _ in rows)
    lines = [f"{'cell':<{width}}  {'mAP@10':>8} {'R@1':>8} {'R@5':>8} {'R@10':>8}"]
    for cell, rep in rows:
        lines.append(f"{cell_label(cell):<{width}}  {rep.map10:8.4f} {rep.r1:8.4f} "
                     f"{rep.r5:8.4f} {rep.r10:8.4f}")
    return "\n".join(lines)
