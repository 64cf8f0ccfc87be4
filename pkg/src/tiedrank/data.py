"""Embedding-sequence datasets: file I/O, synthetic generation, batching.

The unit of ingestion is a variable-length sequence of fixed-width frame
vectors standing in for a frozen encoder's output. Datasets pair each
caption sequence with exactly one audio sequence; one audio clip usually
carries several captions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, IntegrityError, ParseError, SchemaError

HEADER = {"format": "tiedrank-emb", "version": 1}


@dataclass
class EmbeddingSequence:
    id: str
    modality: str  # "audio" | "text"
    frames: Tensor  # [T, d_in]
    mask: np.ndarray  # binary [T], at least one valid entry

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SynthSpec:
    """Arguments plus drawn structure of a synthetic dataset.

    Kept alongside the dataset so the generating linear maps can serve as
    trainable stand-ins for encoder finetuning: item frames reconstruct as
    latent @ map.T + sigma * noise.
    """
    args: dict
    audio_map: np.ndarray  # [d_audio, k]
    text_map: np.ndarray  # [d_text, k]
    latents: np.ndarray  # [n_audio, k], unit rows
    audio_noise: list  # per audio item, [T, d_audio]
    text_noise: list  # per caption item, [T, d_text]
    sigma: float


@dataclass
class PairedDataset:
    audio_items: list
    caption_items: list
    pairing: list  # caption index -> audio index
    synth: Optional[SynthSpec] = field(default=None, repr=False)

    def validate(self) -> None:
        if not self.audio_items:
            raise SchemaError("dataset has no audio items")
        if not self.caption_items:
            raise SchemaError("dataset has no caption items")
        if len(self.pairing) != len(self.caption_items):
            raise IntegrityError("pairing length does not match caption count")
        d_audio = self.audio_items[0].dim
        d_text = self.caption_items[0].dim
        for item in self.audio_items:
            if item.dim != d_audio:
                raise SchemaError(f"audio widths differ: {item.dim} vs {d_audio} (id {item.id})")
        for item in self.caption_items:
            if item.dim != d_text:
                raise SchemaError(f"text widths differ: {item.dim} vs {d_text} (id {item.id})")
        for ci, ai in enumerate(self.pairing):
            if not 0 <= ai < len(self.audio_items):
                raise IntegrityError(f"caption {self.caption_items[ci].id} pairs to missing audio")

    @property
    def d_audio(self) -> int:
        return self.audio_items[0].dim

    @property
    def d_text(self) -> int:
        return self.caption_items[0].dim

    def captions_of(self, audio_index: int) -> list:
        return [ci for ci, ai in enumerate(self.pairing) if ai == audio_index]


def _full_mask(n: int) -> np.ndarray:
    return np.ones(n, dtype=np.float32)


# ---------------------------------------------------------------------------
# file format: one JSON object per line, header first
# ---------------------------------------------------------------------------

def write_dataset(dataset: PairedDataset, path) -> None:
    dataset.validate()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(HEADER, separators=(",", ":")) + "\n")
        for item in dataset.audio_items:
            fh.write(_record_line(item, pair=None))
        for ci, item in enumerate(dataset.caption_items):
            pair_id = dataset.audio_items[dataset.pairing[ci]].id
            fh.write(_record_line(item, pair=pair_id))


def _record_line(item: EmbeddingSequence, pair) -> str:
    rec = {
        "id": item.id,
        "modality": item.modality,
        "dim": item.dim,
        "frames": [[float(v) for v in row] for row in np.asarray(item.frames.data, dtype=np.float64)],
        "pair": pair,
    }
    return json.dumps(rec, separators=(",", ":")) + "\n"


def load_dataset(path) -> PairedDataset:
    audio_items: list = []
    caption_items: list = []
    caption_pairs: list = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError(1, "empty file: missing header line")
    header = _parse_json(lines[0], 1)
    if header != HEADER:
        raise ParseError(1, f"bad header {header!r}, expected {HEADER!r}")
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        rec = _parse_json(raw, ln)
        item, pair = _record_to_item(rec, ln)
        if item.modality == "audio":
            if pair is not None:
                raise ParseError(ln, "audio record must not carry a pair field value")
            audio_items.append(item)
        else:
            if pair is None:
                raise ParseError(ln, "text record is missing its pair id")
            caption_items.append(item)
            caption_pairs.append(pair)
    index_of = {item.id: i for i, item in enumerate(audio_items)}
    pairing = []
    for item, pair_id in zip(caption_items, caption_pairs):
        if pair_id not in index_of:
            raise IntegrityError(f"caption {item.id} references missing audio id {pair_id!r}")
        pairing.append(index_of[pair_id])
    ds = PairedDataset(audio_items, caption_items, pairing)
    ds.validate()
    return ds


def _parse_json(raw: str, ln: int) -> dict:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as err:
        raise ParseError(ln, f"invalid JSON: {err.msg}") from err
    if not isinstance(obj, dict):
        raise ParseError(ln, "record is not a JSON object")
    return obj


def _record_to_item(rec: dict, ln: int):
    for key in ("id", "modality", "dim", "frames", "pair"):
        if key not in rec:
            raise ParseError(ln, f"record is missing field {key!r}")
    if rec["modality"] not in ("audio", "text"):
        raise ParseError(ln, f"unknown modality {rec['modality']!r}")
    frames = np.asarray(rec["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ParseError(ln, f"frames must be a non-empty 2-D list, got shape {frames.shape}")
    if frames.shape[1] != rec["dim"]:
        raise SchemaError(f"line {ln}: declared dim {rec['dim']} but frames are {frames.shape[1]}-wide")
    item = EmbeddingSequence(
        id=str(rec["id"]),
        modality=rec["modality"],
        frames=Tensor(frames.astype(np.float32)),
        mask=_full_mask(frames.shape[0]),
    )
    return item, rec["pair"]


# ---------------------------------------------------------------------------
# synthetic generation: shared-latent linear model
# ---------------------------------------------------------------------------

def generate_synthetic(
    n_audio: int,
    captions_per_audio: int = 5,
    d_audio: int = 48,
    d_text: int = 40,
    t_range: tuple = (4, 12),
    noise_sigma: float = 0.1,
    seed: int = 0,
    identity_maps: bool = False,
    latent_dim: Optional[int] = None,
) -> PairedDataset:
    """Draw a paired dataset from one latent per audio clip.

    Audio frames are audio_map @ z plus iid noise; caption tokens use
    text_map @ z. Unit-norm latents keep the noiseless case exactly
    retrievable under identity maps. Pure function of its arguments.
    """
    if n_audio < 1 or captions_per_audio < 1:
        raise ConfigError("n_audio and captions_per_audio must be positive")
    if d_audio < 1 or d_text < 1:
        raise ConfigError("embedding widths must be positive")
    if not (1 <= t_range[0] <= t_range[1]):
        raise ConfigError(f"bad t_range {t_range}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    if identity_maps and d_audio != d_text:
        raise ConfigError("identity_maps requires d_audio == d_text")
    k = latent_dim if latent_dim is not None else min(d_audio, d_text, 32)
    if identity_maps:
        k = d_audio
    if k < 1:
        raise ConfigError("latent_dim must be positive")

    rng = np.random.default_rng(np.random.SeedSequence([866043, seed]))
    if identity_maps:
        audio_map = np.eye(d_audio, dtype=np.float64)
        text_map = np.eye(d_text, dtype=np.float64)
    else:
        audio_map = rng.normal(size=(d_audio, k)) / np.sqrt(k)
        text_map = rng.normal(size=(d_text, k)) / np.sqrt(k)
    latents = rng.normal(size=(n_audio, k))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)

    audio_items, caption_items, pairing = [], [], []
    audio_noise, text_noise = [], []
    for i in range(n_audio):
        t_len = int(rng.integers(t_range[0], t_range[1] + 1))
        eps = rng.normal(size=(t_len, d_audio))
        audio_noise.append(eps)
        frames = latents[i] @ audio_map.T + noise_sigma * eps
        audio_items.append(EmbeddingSequence(
            id=f"a{i:04d}", modality="audio",
            frames=Tensor(frames.astype(np.float32)), mask=_full_mask(t_len)))
    for i in range(n_audio):
        for c in range(captions_per_audio):
            t_len = int(rng.integers(t_range[0], t_range[1] + 1))
            eps = rng.normal(size=(t_len, d_text))
            text_noise.append(eps)
            tokens = latents[i] @ text_map.T + noise_sigma * eps
            caption_items.append(EmbeddingSequence(
                id=f"a{i:04d}c{c}", modality="text",
                frames=Tensor(tokens.astype(np.float32)), mask=_full_mask(t_len)))
            pairing.append(i)

    spec = SynthSpec(
        args={
            "n_audio": n_audio, "captions_per_audio": captions_per_audio,
            "d_audio": d_audio, "d_text": d_text, "t_range": list(t_range),
            "noise_sigma": noise_sigma, "seed": seed,
            "identity_maps": identity_maps, "latent_dim": k,
        },
        audio_map=audio_map, text_map=text_map, latents=latents,
        audio_noise=audio_noise, text_noise=text_noise, sigma=noise_sigma,
    )
    ds = PairedDataset(audio_items, caption_items, pairing, synth=spec)
    ds.validate()
    return ds


def split_by_audio(dataset: PairedDataset, val_fraction: float = 0.2, seed: int = 0):
    """Deterministic train/val split on audio ids; captions follow their clip."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset.audio_items)
    order = np.random.default_rng(np.random.SeedSequence([412907, seed])).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ConfigError("split leaves no training audio")
    val_set = set(order[:n_val].tolist())

    def subset(keep_audio: set) -> PairedDataset:
        audio_old = sorted(keep_audio)
        remap = {old: new for new, old in enumerate(audio_old)}
        audio_items = [dataset.audio_items[i] for i in audio_old]
        caption_items, pairing = [], []
        noise_t, noise_a = [], []
        for ci, ai in enumerate(dataset.pairing):
            if ai in keep_audio:
                caption_items.append(dataset.caption_items[ci])
                pairing.append(remap[ai])
                if dataset.synth is not None:
                    noise_t.append(dataset.synth.text_noise[ci])
        synth = None
        if dataset.synth is not None:
            src = dataset.synth
            noise_a = [src.audio_noise[i] for i in audio_old]
            synth = SynthSpec(args=dict(src.args), audio_map=src.audio_map,
                              text_map=src.text_map, latents=src.latents[audio_old],
                              audio_noise=noise_a, text_noise=noise_t, sigma=src.sigma)
        sub = PairedDataset(audio_items, caption_items, pairing, synth=synth)
        sub.validate()
        return sub

    train = subset(set(range(n)) - val_set)
    val = subset(val_set)
    return train, val


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(dataset: PairedDataset, batch_size: int, seed: int, epoch: int) -> Iterator[list]:
    """Yield lists of caption indices, shuffled per (seed, epoch).

    Audio ids within a batch are kept distinct whenever the dataset has at
    least batch_size clips; the short final batch is dropped. Captions are
    dealt by audio group into the least-loaded batch not already holding
    that clip, so distinctness holds globally, not just batch-locally.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be at least 2 (in-batch negatives)")
    n = len(dataset.caption_items)
    n_batches = n // batch_size
    rng = np.random.default_rng(np.random.SeedSequence([105731, seed, epoch]))
    if n_batches == 0:
        return
    if len(dataset.audio_items) < batch_size:
        order = rng.permutation(n)
        for start in range(0, n_batches * batch_size, batch_size):
            yield [int(ci) for ci in order[start:start + batch_size]]
        return

    groups: dict = {}
    for ci in rng.permutation(n):
        groups.setdefault(dataset.pairing[int(ci)], []).append(int(ci))
    audio_order = sorted(groups, key=lambda a: -len(groups[a]))  # stable: big first
    batches = [[] for _ in range(n_batches)]
    members = [set() for _ in range(n_batches)]
    overflow = []
    for a in audio_order:
        for ci in groups[a]:
            best = -1
            for b in range(n_batches):
                if len(batches[b]) < batch_size and a not in members[b]:
                    if best < 0 or len(batches[b]) < len(batches[best]):
                        best = b
            if best < 0:
                overflow.append(ci)
            else:
                batches[best].append(ci)
                members[best].add(a)
    # whatever could not be placed distinctly fills leftover slots (repeats
    # allowed only here); n mod batch_size captions stay dropped
    for ci in overflow:
        for b in range(n_batches):
            if len(batches[b]) < batch_size:
                batches[b].append(ci)
                break
    for b in range(n_batches):
        perm = rng.permutation(batch_size)
        yield [batches[b][i] for i in perm]


@dataclass
class Batch:
    caption_indices: list
    audio_indices: list
    text_frames: np.ndarray  # [B, Tt, d_text], zero-padded
    text_mask: np.ndarray  # [B, Tt]
    audio_frames: np.ndarray  # [B, Ta, d_audio]
    audio_mask: np.ndarray  # [B, Ta]


def pad_stack(items: list) -> tuple:
    t_max = max(item.length for item in items)
    d = items[0].dim
    frames = np.zeros((len(items), t_max, d), dtype=np.float32)
    mask = np.zeros((len(items), t_max), dtype=np.float32)
    for i, item in enumerate(items):
        frames[i, :item.length] = item.frames.data
        mask[i, :item.length] = item.mask
    return frames, mask


def collate(dataset: PairedDataset, caption_indices: list) -> Batch:
    """Pad a batch of caption/audio pairs to rectangular arrays plus masks."""
    audio_indices = [dataset.pairing[ci] for ci in caption_indices]
    text_frames, text_mask = pad_stack([dataset.caption_items[ci] for ci in caption_indices])
    audio_frames, audio_mask = pad_stack([dataset.audio_items[ai] for ai in audio_indices])
    return Batch(list(caption_indices), audio_indices,
                 text_frames, text_mask, audio_frames, audio_mask)
