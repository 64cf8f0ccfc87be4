"""Text-to-audio retrieval scoring.

Every audio clip is encoded once, every caption queries the full clip set
by dot product, and the rank of the paired clip drives mAP@10 and R@k.
Each caption has exactly one relevant clip, so per-query average precision
at 10 collapses to 1/rank (0 beyond rank 10).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import PairedDataset, pad_stack
from .errors import ContractError, ShapeError
from .model import TiedRetrievalModel, encode, project_frames


@dataclass
class RetrievalReport:
    per_query: list  # (caption id, 1-based rank of the paired clip)
    map10: float
    r1: float
    r5: float
    r10: float
    n_queries: int
    n_audio: int

    def to_json(self) -> str:
        payload = {
            "map10": self.map10, "r1": self.r1, "r5": self.r5, "r10": self.r10,
            "n_queries": self.n_queries, "n_audio": self.n_audio,
            "per_query": [[cid, rank] for cid, rank in self.per_query],
        }
        return json.dumps(payload, separators=(",", ":"))

    def table(self) -> str:
        rows = [("mAP@10", self.map10), ("R@1", self.r1),
                ("R@5", self.r5), ("R@10", self.r10)]
        lines = [f"queries: {self.n_queries}   audio clips: {self.n_audio}"]
        for name, value in rows:
            lines.append(f"{name:>7}  {value:8.4f}")
        return "\n".join(lines)


def report_from_json(text: str) -> RetrievalReport:
    obj = json.loads(text)
    return RetrievalReport(
        per_query=[(cid, int(rank)) for cid, rank in obj["per_query"]],
        map10=obj["map10"], r1=obj["r1"], r5=obj["r5"], r10=obj["r10"],
        n_queries=obj["n_queries"], n_audio=obj["n_audio"])


def similarity_matrix(text_reps, audio_reps) -> Tensor:
    """S[q, n] = dot(text_q, audio_n); plain dot product, no normalization."""
    t = text_reps.data if isinstance(text_reps, Tensor) else np.asarray(text_reps)
    a = audio_reps.data if isinstance(audio_reps, Tensor) else np.asarray(audio_reps)
    if t.ndim != 2 or a.ndim != 2 or t.shape[1] != a.shape[1]:
        raise ShapeError(f"similarity_matrix: incompatible shapes {t.shape} and {a.shape}")
    return Tensor(t @ a.T)


def rank_of_target(scores, target: int) -> int:
    """1-based rank with a deterministic tie-break: ties at lower index
    count ahead of the target."""
    s = np.asarray(scores)
    if s.ndim != 1 or not 0 <= target < s.shape[0]:
        raise ContractError(f"rank_of_target: target {target} invalid for {s.shape}")
    tv = s[target]
    greater = int(np.sum(s > tv))
    tied_before = int(np.sum(s[:target] == tv))
    return 1 + greater + tied_before


def metrics_from_ranks(ranks, n_audio: int, query_ids=None) -> RetrievalReport:
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ContractError("metrics_from_ranks: no queries")
    for r in ranks:
        if not 1 <= r <= n_audio:
            raise ContractError(f"rank {r} outside [1, {n_audio}]")
    if query_ids is None:
        query_ids = [str(i) for i in range(len(ranks))]
    n = len(ranks)
    arr = np.asarray(ranks)
    return RetrievalReport(
        per_query=list(zip(query_ids, ranks)),
        map10=float(np.sum(np.where(arr <= 10, 1.0 / arr, 0.0)) / n),
        r1=float(np.sum(arr <= 1) / n),
        r5=float(np.sum(arr <= 5) / n),
        r10=float(np.sum(arr <= 10) / n),
        n_queries=n,
        n_audio=int(n_audio),
    )


def encode_corpus(model: TiedRetrievalModel, items: list, modality: str) -> np.ndarray:
    """Encode a list of EmbeddingSequence into pooled rows [N, d_model].
    One padded pass; no gradients."""
    frames, mask = pad_stack(items)
    dtype = model.params["logit_scale"].data.dtype
    x = Tensor(frames.astype(dtype))
    pooled = encode(model, project_frames(model, x, modality), mask.astype(dtype), modality)
    return pooled.data


def evaluate(model: TiedRetrievalModel, dataset: PairedDataset) -> RetrievalReport:
    if not dataset.audio_items or not dataset.caption_items:
        raise ContractError("evaluate: dataset is empty")
    audio_reps = encode_corpus(model, dataset.audio_items, "audio")
    text_reps = encode_corpus(model, dataset.caption_items, "text")
    scores = similarity_matrix(text_reps, audio_reps).data
    ranks = [rank_of_target(scores[q], dataset.pairing[q]) for q in range(scores.shape[0])]
    ids = [c.id for c in dataset.caption_items]
    return metrics_from_ranks(ranks, n_audio=len(dataset.audio_items), query_ids=ids)
