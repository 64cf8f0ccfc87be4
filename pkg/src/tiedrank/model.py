"""The converging tied architecture.

Per-modality affine projections lift frozen audio frames and text tokens
into a common width; one shared encoder stack (transformer or per-frame
linear, selectable) then serves both modalities, so the two paths literally
reuse the same parameter objects when tied. Pooled outputs feed retrieval
directly and, through per-modality linear heads, the contrastive loss.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ContractError, SchemaError

MAGIC = b"TRK1"
LOGIT_SCALE_INIT = math.log(1.0 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)


@dataclass
class ModelConfig:
    d_model: int
    n_layers: int
    d_audio_in: int
    d_text_in: int
    n_heads: int = 4
    tied_kind: str = "transformer"  # "transformer" | "linear"
    tied: bool = True
    ffn_mult: int = 4
    contrastive_dim: int = 0  # 0 -> d_model
    learned_positions: bool = False
    max_positions: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.contrastive_dim == 0:
            self.contrastive_dim = self.d_model
        self.validate()

    def validate(self) -> None:
        if self.tied_kind not in ("transformer", "linear"):
            raise ConfigError(f"unknown tied_kind {self.tied_kind!r}")
        if min(self.d_model, self.n_layers, self.d_audio_in, self.d_text_in,
               self.n_heads, self.ffn_mult, self.contrastive_dim) < 1:
            raise ConfigError("all model extents must be positive")
        if self.tied_kind == "transformer" and self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learned_positions and self.max_positions < 1:
            raise ConfigError("max_positions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# short preset keys double as CLI flag values; long forms are the names the
# result tables use
PRESETS = {
    "2L192T": dict(d_model=192, n_layers=2, tied_kind="transformer"),
    "4L96T": dict(d_model=96, n_layers=4, tied_kind="transformer"),
    "2L192L": dict(d_model=192, n_layers=2, tied_kind="linear"),
    "2L32T": dict(d_model=32, n_layers=2, tied_kind="transformer"),
}
PRESET_ALIASES = {
    "2L 192dim Transformer": "2L192T",
    "4L 96dim Transformer": "4L96T",
    "2L 192dim Linear": "2L192L",
    "2L 32dim Transformer": "2L32T",
}


def preset_config(name: str, d_audio_in: int, d_text_in: int, **overrides) -> ModelConfig:
    key = PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[key])
    fields.update(overrides)
    return ModelConfig(d_audio_in=d_audio_in, d_text_in=d_text_in, **fields)


class TiedRetrievalModel:
    """Parameter registry plus forward paths. Parameters live in a single
    insertion-ordered dict; that order is the checkpoint layout."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params  # name -> Tensor, declaration order

    def param_list(self) -> list:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def stack_prefix(self, modality: str) -> str:
        if self.config.tied:
            return "stack"
        return "stack_A" if modality == "audio" else "stack_T"

    def stack_tensors(self, modality: str) -> dict:
        pre = self.stack_prefix(modality) + "."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    @property
    def logit_scale(self) -> Tensor:
        return self.params["logit_scale"]

    def clamp_logit_scale(self) -> None:
        np.minimum(self.logit_scale.data, LOGIT_SCALE_MAX, out=self.logit_scale.data)


def _layer_names(kind: str, i: int) -> list:
    if kind == "transformer":
        short = ["ln1.g", "ln1.b", "attn.Wq", "attn.bq", "attn.Wk", "attn.bk",
                 "attn.Wv", "attn.bv", "attn.Wo", "attn.bo", "ln2.g", "ln2.b",
                 "ffn.W1", "ffn.b1", "ffn.W2", "ffn.b2"]
    else:
        short = ["lin.W", "lin.b"]
    return [f"{i}.{s}" for s in short]


def _draw_linear(rng, d_out: int, d_in: int) -> tuple:
    bound = 1.0 / math.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_out, d_in))
    return w, np.zeros(d_out)


def _draw_stack(rng, cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model
    out = {}
    for i in range(cfg.n_layers):
        if cfg.tied_kind == "transformer":
            out[f"{i}.ln1.g"] = np.ones(d)
            out[f"{i}.ln1.b"] = np.zeros(d)
            for nm in ("Wq", "Wk", "Wv", "Wo"):
                w, b = _draw_linear(rng, d, d)
                out[f"{i}.attn.{nm}"] = w
                out[f"{i}.attn.b{nm[1].lower()}"] = b
            out[f"{i}.ln2.g"] = np.ones(d)
            out[f"{i}.ln2.b"] = np.zeros(d)
            w1, b1 = _draw_linear(rng, f, d)
            w2, b2 = _draw_linear(rng, d, f)
            out[f"{i}.ffn.W1"], out[f"{i}.ffn.b1"] = w1, b1
            out[f"{i}.ffn.W2"], out[f"{i}.ffn.b2"] = w2, b2
        else:
            w, b = _draw_linear(rng, d, d)
            out[f"{i}.lin.W"], out[f"{i}.lin.b"] = w, b
    # reorder to declaration order
    ordered = {}
    for i in range(cfg.n_layers):
        for name in _layer_names(cfg.tied_kind, i):
            ordered[name] = out[name]
    return ordered


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> TiedRetrievalModel:
    """Deterministic init: uniform fan-in linear maps, zero biases, unit
    norms, logit_scale = ln(1/0.07). Untied stacks start as equal copies."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([597113, seed]))
    arrays = {}
    w, b = _draw_linear(rng, config.d_model, config.d_audio_in)
    arrays["ffn_A.W"], arrays["ffn_A.b"] = w, b
    w, b = _draw_linear(rng, config.d_model, config.d_text_in)
    arrays["ffn_T.W"], arrays["ffn_T.b"] = w, b
    stack = _draw_stack(rng, config)
    if config.tied:
        for name, arr in stack.items():
            arrays[f"stack.{name}"] = arr
    else:
        for name, arr in stack.items():
            arrays[f"stack_A.{name}"] = arr
        for name, arr in stack.items():
            arrays[f"stack_T.{name}"] = arr.copy()
    if config.learned_positions:
        arrays["pos"] = np.zeros((config.max_positions, config.d_model))
    w, b = _draw_linear(rng, config.contrastive_dim, config.d_model)
    arrays["proj_A.W"], arrays["proj_A.b"] = w, b
    w, b = _draw_linear(rng, config.contrastive_dim, config.d_model)
    arrays["proj_T.W"], arrays["proj_T.b"] = w, b
    arrays["logit_scale"] = np.asarray(LOGIT_SCALE_INIT)
    params = {name: Tensor(arr.astype(dtype)) for name, arr in arrays.items()}
    return TiedRetrievalModel(config, params)


def copy_model(model: TiedRetrievalModel, dtype=None) -> TiedRetrievalModel:
    params = {}
    for name, t in model.params.items():
        data = t.data.astype(dtype) if dtype is not None else t.data.copy()
        params[name] = Tensor(data)
    return TiedRetrievalModel(model.config, params)


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------

def project_sequence(model: TiedRetrievalModel, seq, modality: str) -> Tensor:
    """Affine per-frame projection of one EmbeddingSequence into d_model."""
    if seq.modality != modality:
        raise ContractError(f"expected a {modality} sequence, got {seq.modality}")
    expect = model.config.d_audio_in if modality == "audio" else model.config.d_text_in
    if seq.dim != expect:
        raise SchemaError(f"{modality} width {seq.dim} does not match model input width {expect}")
    return project_frames(model, seq.frames, modality)


def project_audio(model: TiedRetrievalModel, seq) -> Tensor:
    return project_sequence(model, seq, "audio")


def project_text(model: TiedRetrievalModel, seq) -> Tensor:
    return project_sequence(model, seq, "text")


def project_frames(model: TiedRetrievalModel, frames: Tensor, modality: str) -> Tensor:
    head = "ffn_A" if modality == "audio" else "ffn_T"
    w = model.params[f"{head}.W"]
    b = model.params[f"{head}.b"]
    return ad.add_bias(ad.matmul(frames, ad.transpose(w)), b)


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


def encode(model: TiedRetrievalModel, projected: Tensor, mask: np.ndarray,
           modality: str, drop_rng=None) -> Tensor:
    """Run the (shared) stack over [B, T, d_model] and mean-pool valid
    positions to [B, d_model]. Accepts [T, d_model] for a single sequence."""
    single = projected.ndim == 2
    x = ad.reshape(projected, (1,) + projected.shape) if single else projected
    m = np.asarray(mask, dtype=x.data.dtype)
    if single:
        m = m[None, :]
    if m.shape != x.shape[:-1]:
        raise SchemaError(f"mask shape {m.shape} does not match frames {x.shape[:-1]}")
    cfg = model.config
    if cfg.learned_positions:
        t_len = x.shape[1]
        if t_len > cfg.max_positions:
            raise SchemaError(f"sequence length {t_len} exceeds max_positions {cfg.max_positions}")
        x = ad.add_bias(x, ad.slice_rows(model.params["pos"], 0, t_len))
    stack = model.stack_tensors(modality)
    for i in range(cfg.n_layers):
        if cfg.tied_kind == "transformer":
            x = _transformer_layer(cfg, stack, i, x, m, drop_rng)
        else:
            h = ad.add_bias(ad.matmul(x, ad.transpose(stack[f"{i}.lin.W"])), stack[f"{i}.lin.b"])
            x = _dropout(ad.gelu(h), cfg.dropout, drop_rng)
    pooled = ad.masked_mean_pool(x, m)
    return ad.reshape(pooled, pooled.shape[1:]) if single else pooled


def _transformer_layer(cfg: ModelConfig, stack: dict, i: int, x: Tensor,
                       mask: np.ndarray, drop_rng) -> Tensor:
    b_sz, t_len, d = x.shape
    h_n = cfg.n_heads
    d_h = d // h_n
    p = stack

    h = ad.layer_norm(x, p[f"{i}.ln1.g"], p[f"{i}.ln1.b"])
    q = ad.add_bias(ad.matmul(h, ad.transpose(p[f"{i}.attn.Wq"])), p[f"{i}.attn.bq"])
    k = ad.add_bias(ad.matmul(h, ad.transpose(p[f"{i}.attn.Wk"])), p[f"{i}.attn.bk"])
    v = ad.add_bias(ad.matmul(h, ad.transpose(p[f"{i}.attn.Wv"])), p[f"{i}.attn.bv"])

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b_sz, t_len, h_n, d_h)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d_h))
    # invalid keys get a large negative bias; their softmax weight underflows to 0
    bias = ((1.0 - mask) * ad.MASK_BIAS).astype(x.data.dtype)
    bias = np.broadcast_to(bias[:, None, None, :], scores.shape)
    scores = ad.add(scores, Tensor(bias))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, vh)  # [B, H, T, d_h]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b_sz, t_len, d))
    attn_out = ad.add_bias(ad.matmul(ctx, ad.transpose(p[f"{i}.attn.Wo"])), p[f"{i}.attn.bo"])
    x = ad.add(x, _dropout(attn_out, cfg.dropout, drop_rng))

    h2 = ad.layer_norm(x, p[f"{i}.ln2.g"], p[f"{i}.ln2.b"])
    f1 = ad.gelu(ad.add_bias(ad.matmul(h2, ad.transpose(p[f"{i}.ffn.W1"])), p[f"{i}.ffn.b1"]))
    f2 = ad.add_bias(ad.matmul(f1, ad.transpose(p[f"{i}.ffn.W2"])), p[f"{i}.ffn.b2"])
    return ad.add(x, _dropout(f2, cfg.dropout, drop_rng))


def contrastive_heads(model: TiedRetrievalModel, r_a: Tensor, r_t: Tensor) -> tuple:
    c_a = ad.l2_normalize_rows(
        ad.add_bias(ad.matmul(r_a, ad.transpose(model.params["proj_A.W"])), model.params["proj_A.b"]))
    c_t = ad.l2_normalize_rows(
        ad.add_bias(ad.matmul(r_t, ad.transpose(model.params["proj_T.W"])), model.params["proj_T.b"]))
    return c_a, c_t


def forward_from_tensors(model: TiedRetrievalModel,
                         audio_frames: Tensor, audio_mask: np.ndarray,
                         text_frames: Tensor, text_mask: np.ndarray,
                         drop_rng=None) -> tuple:
    r_a = encode(model, project_frames(model, audio_frames, "audio"), audio_mask, "audio", drop_rng)
    r_t = encode(model, project_frames(model, text_frames, "text"), text_mask, "text", drop_rng)
    c_a, c_t = contrastive_heads(model, r_a, r_t)
    return r_a, r_t, c_a, c_t


def forward_batch(model: TiedRetrievalModel, batch, drop_rng=None) -> tuple:
    """Full forward over a collated batch: pooled stack outputs (R_A, R_T)
    plus unit-norm contrastive projections (C_A, C_T)."""
    if len(batch.caption_indices) < 2:
        raise ContractError("forward_batch needs at least 2 pairs for in-batch negatives")
    dtype = model.params["ffn_A.W"].data.dtype
    return forward_from_tensors(
        model,
        Tensor(batch.audio_frames.astype(dtype, copy=False)), batch.audio_mask,
        Tensor(batch.text_frames.astype(dtype, copy=False)), batch.text_mask,
        drop_rng=drop_rng,
    )


# ---------------------------------------------------------------------------
# checkpoint format: MAGIC | u32 json-length | canonical config JSON | params
# as little-endian float32 in declaration order
# ---------------------------------------------------------------------------

def save_checkpoint(model: TiedRetrievalModel, path) -> None:
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":"))
    blob = cfg_json.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> TiedRetrievalModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}; not a checkpoint file")
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n:
        raise CheckpointError("truncated checkpoint config block")
    try:
        cfg_dict = json.loads(raw[8:8 + n].decode("utf-8"))
        config = ModelConfig(**cfg_dict)
    except (ValueError, TypeError) as err:
        raise CheckpointError(f"unreadable checkpoint config: {err}") from err
    template = init_model(config, seed=0)
    body = raw[8 + n:]
    offset = 0
    params = {}
    for name, t in template.params.items():
        nbytes = t.size * 4
        if offset + nbytes > len(body):
            raise CheckpointError(f"checkpoint ends inside parameter {name}")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype="<f4").reshape(t.shape)
        params[name] = Tensor(arr.astype(np.float32))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} trailing bytes after last parameter")
    return TiedRetrievalModel(config, params)


def stack_param_count(config: ModelConfig) -> int:
    """Closed-form size of ONE copy of the stack."""
    d, f, n = config.d_model, config.ffn_mult * config.d_model, config.n_layers
    if config.tied_kind == "transformer":
        per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    else:
        per_layer = d * d + d
    return n * per_layer
