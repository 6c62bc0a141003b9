"""Text-to-image retrieval evaluation: Rank-k, mAP, mINP.

Scores are computed per query against the full gallery; every metric uses
plain sequential arithmetic so an independent brute-force implementation
can match it exactly, not just approximately.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import DatasetManifest
from .encoders import (
    ModelParams,
    TokenEmbeddingSequence,
    encode_image_batch,
    encode_text_batch,
)
from .losses import tokenwise_max_similarity
from .tensor import no_grad
from .tensor import cosine_similarity as _cos

__all__ = [
    "RankingResult",
    "MetricsReport",
    "rank_gallery",
    "rank_at_k",
    "mean_average_precision",
    "mean_inp",
    "evaluate",
    "append_metrics_csv",
]

THREADS_ENV = "DUALFOCUS_THREADS"


@dataclass
class RankingResult:
    """Gallery permutation (best first) with per-position relevance flags."""

    order: np.ndarray
    relevant: np.ndarray

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.relevant = np.asarray(self.relevant, dtype=bool)
        n = self.order.size
        if sorted(self.order.tolist()) != list(range(n)):
            raise ValueError("order must be a permutation of the gallery")
        if self.relevant.size != n:
            raise ValueError("relevance flags must cover every position")
        if n and not self.relevant.any():
            raise ValueError("query has no relevant gallery item")


@dataclass
class MetricsReport:
    rank_at: dict[int, float]
    map_: float
    minp: float
    num_queries: int

    def __post_init__(self):
        for k in sorted(self.rank_at):
            if not 0.0 <= self.rank_at[k] <= 1.0:
                raise ValueError("rank_at values must lie in [0, 1]")
        ks = sorted(self.rank_at)
        for lo, hi in zip(ks, ks[1:]):
            if self.rank_at[lo] > self.rank_at[hi] + 1e-12:
                raise ValueError("rank_at must be non-decreasing in k")
        if not (0.0 <= self.map_ <= 1.0 and 0.0 <= self.minp <= 1.0):
            raise ValueError("mAP and mINP must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "rank_at": {str(k): v for k, v in sorted(self.rank_at.items())},
            "mAP": self.map_,
            "mINP": self.minp,
            "num_queries": self.num_queries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _order_by_score(scores: np.ndarray) -> np.ndarray:
    """Descending score order; equal scores keep ascending gallery index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def rank_gallery(query: TokenEmbeddingSequence,
                 gallery: list[TokenEmbeddingSequence],
                 scorer) -> np.ndarray:
    """Order gallery indices for one query.

    `scorer` is either a callable (query, item) -> float or one of
    'token' (token-wise max similarity) / 'global' (cls/eos cosine).
    """
    if not gallery:
        raise ValueError("gallery must be non-empty")
    fn = _resolve_scorer(scorer)
    scores = np.array([fn(query, item) for item in gallery])
    return _order_by_score(scores)


def _resolve_scorer(scorer):
    if callable(scorer):
        return scorer
    if scorer == "token":
        return tokenwise_max_similarity
    if scorer == "global":
        return lambda q, g: _cos(q.global_token(), g.global_token())
    raise ValueError(f"unknown scorer {scorer!r}")


def rank_at_k(results: list[RankingResult], k: int) -> float:
    """Fraction of queries with a relevant item somewhere in the top k."""
    hits = sum(1 for r in results if bool(r.relevant[:k].any()))
    return hits / len(results)


def mean_average_precision(results: list[RankingResult]) -> float:
    """Mean over queries of the average precision at relevant positions."""
    aps = []
    for r in results:
        hits = 0
        precisions = []
        for pos, rel in enumerate(r.relevant, start=1):
            if rel:
                hits += 1
                precisions.append(hits / pos)
        aps.append(sum(precisions) / len(precisions))
    return sum(aps) / len(aps)


def mean_inp(results: list[RankingResult]) -> float:
    """Mean inverse negative penalty: |relevant| / rank of hardest match."""
    inps = []
    for r in results:
        positions = np.nonzero(r.relevant)[0]
        hardest = positions[-1] + 1
        inps.append(len(positions) / hardest)
    return sum(inps) / len(inps)


# -- full evaluation protocol ---------------------------------------------------


def _select_identities(manifest: DatasetManifest, protocol: str) -> set[int]:
    confusable = manifest.confusable_identities()
    all_ids = {s.identity_id for s in manifest.samples}
    if protocol == "all":
        return all_ids
    if protocol == "confusable":
        if not confusable:
            raise ValueError("manifest has no confusable identities")
        return confusable
    if protocol == "nonconfusable":
        return all_ids - confusable
    raise ValueError(f"unknown protocol {protocol!r}")


def _encode_texts(id_lists: list[list[int]], params: ModelParams) -> list[np.ndarray]:
    """Content-token arrays per text, grouped by length for batching."""
    by_len: dict[int, list[int]] = {}
    framed = [[0] + ids + [1] for ids in id_lists]
    for i, f in enumerate(framed):
        by_len.setdefault(len(f), []).append(i)
    out: list[np.ndarray | None] = [None] * len(framed)
    with no_grad():
        for length, idx in sorted(by_len.items()):
            ids = np.asarray([framed[i] for i in idx], dtype=np.int64)
            enc = encode_text_batch(ids, params).data
            for row, i in enumerate(idx):
                out[i] = enc[row]
    return out


def _token_scores(query_content_n: np.ndarray, gallery_flat_n: np.ndarray,
                  n_gallery: int, n_patches: int) -> np.ndarray:
    sims = query_content_n @ gallery_flat_n.T
    sims = sims.reshape(query_content_n.shape[0], n_gallery, n_patches)
    return sims.max(axis=2).mean(axis=0)


def evaluate(params: ModelParams, manifest: DatasetManifest,
             scorer: str = "token", protocol: str = "all",
             rank_ks: tuple[int, ...] = (1, 5, 10),
             caption_ids_override: list[list[int]] | None = None) -> MetricsReport:
    """Every caption queries the full image gallery of the chosen protocol.

    Relevance is identity equality. `caption_ids_override` substitutes the
    query token ids sample-by-sample (used by the negative-descriptor
    probe). Query fan-out honours the DUALFOCUS_THREADS env var; results
    are merged in query order, so the report never depends on it.
    """
    keep = _select_identities(manifest, protocol)
    vocab = manifest.vocab
    samples = [s for s in manifest.samples if s.identity_id in keep]
    if not samples:
        raise ValueError("protocol selected no samples")
    positions = {s.sample_id: i for i, s in enumerate(manifest.samples)}
    identities = np.asarray([s.identity_id for s in samples])

    if caption_ids_override is None:
        caption_ids = [vocab.encode(s.caption) for s in samples]
    else:
        caption_ids = [caption_ids_override[positions[s.sample_id]] for s in samples]

    with no_grad():
        imgs = encode_image_batch(
            np.stack([s.patch_features for s in samples]), params).data
    texts = _encode_texts(caption_ids, params)
    n_gallery = len(samples)
    n_patches = imgs.shape[1] - 1

    if scorer == "token":
        content = imgs[:, 1:, :]
        norms = np.linalg.norm(content, axis=2, keepdims=True)
        if np.any(norms < 1e-15):
            raise ValueError("zero-norm image token in gallery")
        gallery_flat_n = (content / norms).reshape(-1, content.shape[2])

        def score_query(qi: int) -> np.ndarray:
            toks = texts[qi][1:len(texts[qi]) - 1]
            qn = toks / np.linalg.norm(toks, axis=1, keepdims=True)
            return _token_scores(qn, gallery_flat_n, n_gallery, n_patches)
    elif scorer == "global":
        cls = imgs[:, 0, :]
        cls_n = cls / np.linalg.norm(cls, axis=1, keepdims=True)

        def score_query(qi: int) -> np.ndarray:
            eos = texts[qi][-1]
            return cls_n @ (eos / np.linalg.norm(eos))
    else:
        raise ValueError(f"unknown scorer {scorer!r}")

    n_threads = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if n_threads == 1:
        all_scores = [score_query(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            all_scores = list(pool.map(score_query, range(len(samples))))

    results = []
    for qi, scores in enumerate(all_scores):
        order = _order_by_score(scores)
        relevant = identities[order] == identities[qi]
        results.append(RankingResult(order=order, relevant=relevant))

    return MetricsReport(
        rank_at={k: rank_at_k(results, k) for k in rank_ks},
        map_=mean_average_precision(results),
        minp=mean_inp(results),
        num_queries=len(results),
    )


def append_metrics_csv(path: str | Path, run_id: str, config_hash: str,
                       report: MetricsReport) -> None:
    """Append one ablation-table row; writes the header on first use."""
    path = Path(path)
    exists = path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(["run_id", "config_hash", "rank1", "rank5", "rank10",
                             "mAP", "mINP", "num_queries"])
        writer.writerow([
            run_id, config_hash,
            repr(report.rank_at.get(1, 0.0)), repr(report.rank_at.get(5, 0.0)),
            repr(report.rank_at.get(10, 0.0)), repr(report.map_),
            repr(report.minp), report.num_queries,
        ])
