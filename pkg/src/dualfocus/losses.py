"""Training objectives: token-wise matching, dual attribute prompts, masking.

Every loss builds one computation graph from the raw batch through the
encoders and returns its value together with analytic gradients for all
parameters, so the finite-difference oracle can cross-check each of them
independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attributes import AttributeAnnotation, PromptSet, gamma
from .encoders import (
    ModelParams,
    TokenEmbeddingSequence,
    cross_encode_batch,
    encode_image_batch,
    encode_text_batch,
)
from .tensor import (
    Tensor,
    compute_gradients,
    concat,
    gather_pairs,
    take_first,
)
from .tensor import cosine_similarity as _cosine

__all__ = [
    "Batch",
    "LossWeights",
    "LossToggles",
    "GradResult",
    "tokenwise_max_similarity",
    "tokenwise_match_indices",
    "batch_match_probabilities",
    "dts_loss",
    "diac_loss",
    "siam_loss",
    "mapm_loss",
    "mlm_loss",
    "id_loss",
    "dapl_loss",
    "total_loss",
    "siam_labels",
]

_NEG_BIG = 1e30
_ZERO_NORM_TOL = 1e-15


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.02
    epsilon: float = 1e-8
    lambda_dts: float = 2.0
    lambda_mlm: float = 1.0
    lambda_id: float = 1.0
    lambda_dapl: float = 0.8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for name in ("lambda_dts", "lambda_mlm", "lambda_id", "lambda_dapl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossToggles:
    dts: bool = True
    diac: bool = True
    siam: bool = True
    mapm: bool = True
    mlm: bool = True
    id: bool = True


@dataclass
class GradResult:
    """Scalar loss value plus per-parameter gradient arrays."""

    value: float
    grads: dict[str, np.ndarray]
    components: dict[str, float] = field(default_factory=dict)


@dataclass
class Batch:
    """B image-text pairs with identity labels and rendered prompt sets.

    Token/patch data stays raw here; each loss encodes it against the
    current parameters so gradients flow. `annotations` carry the ground
    truth attribute partition per sample (the prompt sets may under-report
    positives when a caption omits an attribute the person has).
    """

    patch_features: np.ndarray  # (B, n_v, input_dim)
    caption_ids: list[list[int]]  # unframed content token ids
    identities: np.ndarray  # (B,)
    prompt_sets: list[PromptSet]
    annotations: list[AttributeAnnotation]
    y: np.ndarray  # (B, B) binary match matrix

    def __post_init__(self):
        b = len(self.caption_ids)
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if b < 1:
            raise ValueError("batch must have B >= 1 samples")
        if not (self.patch_features.shape[0] == self.identities.shape[0]
                == len(self.prompt_sets) == len(self.annotations) == b):
            raise ValueError("batch field lengths disagree")
        if self.patch_features.ndim != 3 or not np.all(np.isfinite(self.patch_features)):
            raise ValueError("patch_features must be a finite (B, n_v, d_in) array")
        expect = (self.identities[:, None] == self.identities[None, :]).astype(np.float64)
        if self.y.shape != (b, b) or not np.array_equal(self.y, expect):
            raise ValueError("y must equal the identity-equality matrix")
        assert np.all(np.diag(self.y) == 1.0)

    @classmethod
    def build(cls, patch_features, caption_ids, identities, prompt_sets,
              annotations) -> "Batch":
        identities = np.asarray(identities, dtype=np.int64)
        y = (identities[:, None] == identities[None, :]).astype(np.float64)
        return cls(patch_features, caption_ids, identities, prompt_sets,
                   annotations, y)

    @property
    def size(self) -> int:
        return len(self.caption_ids)


# -- value-level similarity primitives ---------------------------------------


def _content_with_norms(seq: TokenEmbeddingSequence) -> np.ndarray:
    toks = seq.content_tokens()
    norms = np.linalg.norm(toks, axis=-1)
    if np.any(norms < _ZERO_NORM_TOL):
        raise ValueError("zero-norm content token in sequence")
    return toks / norms[:, None]


def tokenwise_max_similarity(a: TokenEmbeddingSequence,
                             b: TokenEmbeddingSequence) -> float:
    """Mean over a's content tokens of the best cosine match in b."""
    an = _content_with_norms(a)
    bn = _content_with_norms(b)
    sims = an @ bn.T
    return float(sims.max(axis=1).mean())


def tokenwise_match_indices(a: TokenEmbeddingSequence,
                            b: TokenEmbeddingSequence) -> np.ndarray:
    """Argmax index in b per content token of a; ties take the lowest index."""
    an = _content_with_norms(a)
    bn = _content_with_norms(b)
    return np.argmax(an @ bn.T, axis=1)


def batch_match_probabilities(queries: Sequence[TokenEmbeddingSequence],
                              candidates: Sequence[TokenEmbeddingSequence],
                              tau: float) -> np.ndarray:
    """Row-wise softmax over candidates of tokenwise similarity / tau."""
    if len(queries) != len(candidates):
        raise ValueError("queries and candidates must have equal length")
    if tau <= 0:
        raise ValueError("tau must be positive")
    xi = np.array([
        [tokenwise_max_similarity(q, c) for c in candidates] for q in queries
    ])
    z = xi / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- grouped sequence banks ---------------------------------------------------


class _SeqBank:
    """Equal-length groups of content-token tensors with padding masks.

    groups: list of (orig_indices, tokens Tensor (G, L, d), mask (G, L) or None).
    Indices across groups partition range(n).
    """

    def __init__(self, groups, n: int):
        self.groups = groups
        self.n = n

    @classmethod
    def from_framed_ids(cls, framed: list[list[int]], params: ModelParams,
                        drop_specials: bool = True) -> "_SeqBank":
        by_len: dict[int, list[int]] = {}
        for i, ids in enumerate(framed):
            by_len.setdefault(len(ids), []).append(i)
        groups = []
        for length in sorted(by_len):
            idx = np.asarray(by_len[length], dtype=np.int64)
            ids = np.asarray([framed[i] for i in idx], dtype=np.int64)
            enc = encode_text_batch(ids, params)
            content = enc[:, 1:length - 1, :] if drop_specials else enc
            groups.append((idx, content, None, enc, length))
        return cls(groups, len(framed))

    @classmethod
    def from_arrays(cls, seqs: list[np.ndarray]) -> "_SeqBank":
        """Plain value-level bank from per-sequence (L, d) content arrays."""
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            by_len.setdefault(s.shape[0], []).append(i)
        groups = []
        for length in sorted(by_len):
            idx = np.asarray(by_len[length], dtype=np.int64)
            stack = np.stack([np.asarray(seqs[i], dtype=np.float64) for i in idx])
            groups.append((idx, Tensor(stack), None, None, length))
        return cls(groups, len(seqs))

    @classmethod
    def from_tensor(cls, tokens: Tensor, mask: np.ndarray | None = None) -> "_SeqBank":
        n = tokens.shape[0]
        return cls([(np.arange(n, dtype=np.int64), tokens, mask, None,
                     tokens.shape[1])], n)

    def normalized(self) -> "_SeqBank":
        groups = []
        for idx, toks, mask, enc, length in self.groups:
            sq = (toks * toks).sum(axis=-1, keepdims=True)
            norms = np.sqrt(sq.data)
            valid = np.ones(norms.shape[:2], dtype=bool) if mask is None else mask.astype(bool)
            if np.any(norms[valid, 0] < _ZERO_NORM_TOL):
                raise ValueError("zero-norm content token")
            if mask is not None:
                # keep padded rows finite; they are masked out of every max/mean
                sq = sq + Tensor((~valid[:, :, None]).astype(np.float64))
            groups.append((idx, toks / sq.sqrt(), mask, enc, length))
        return _SeqBank(groups, self.n)

    def globals_eos(self) -> Tensor:
        """Per-sequence eos token rows (framed encodings required)."""
        parts, order = [], []
        for idx, _toks, _mask, enc, length in self.groups:
            if enc is None:
                raise ValueError("bank was not built from framed ids")
            parts.append(enc[:, length - 1, :])
            order.append(idx)
        stacked = concat(parts, axis=0)
        perm = np.argsort(np.concatenate(order))
        return take_first(stacked, perm)

    def full_encodings(self) -> list[tuple[np.ndarray, Tensor, int]]:
        return [(idx, enc, length) for idx, _t, _m, enc, length in self.groups]


def _pairwise_xi(a_bank: _SeqBank, b_bank: _SeqBank) -> tuple[Tensor, Tensor]:
    """Token-wise max similarities between every (a, b) sequence pair.

    Returns (xi_a, xi_b), both (n_a, n_b) in original order:
      xi_a[i, j] = mean over a_i tokens of max over b_j tokens
      xi_b[i, j] = mean over b_j tokens of max over a_i tokens
    Banks must already be normalized.
    """
    row_blocks_a, row_blocks_b, row_order = [], [], []
    col_order = np.concatenate([g[0] for g in b_bank.groups])
    for a_idx, a_toks, a_mask, _, _alen in a_bank.groups:
        ga, a_len = a_toks.shape[0], a_toks.shape[1]
        blocks_a, blocks_b = [], []
        a_flat = a_toks.reshape(ga * a_len, a_toks.shape[2])
        for b_idx, b_toks, b_mask, _, _blen in b_bank.groups:
            gb, b_len = b_toks.shape[0], b_toks.shape[1]
            b_flat = b_toks.reshape(gb * b_len, b_toks.shape[2])
            s = (a_flat @ b_flat.transpose(1, 0)).reshape(ga, a_len, gb, b_len)
            # a-side: max over b tokens, mean over a tokens
            s_for_amax = s
            if b_mask is not None:
                s_for_amax = s + Tensor(
                    (b_mask.astype(np.float64) - 1.0)[None, None] * _NEG_BIG)
            amax = s_for_amax.max(axis=3)  # (ga, a_len, gb)
            if a_mask is None:
                xi_a_blk = amax.mean(axis=1)
            else:
                am = a_mask.astype(np.float64)
                xi_a_blk = (amax * Tensor(am[:, :, None])).sum(axis=1) \
                    * Tensor((1.0 / am.sum(axis=1))[:, None])
            blocks_a.append(xi_a_blk)
            # b-side: max over a tokens, mean over b tokens
            s_for_bmax = s
            if a_mask is not None:
                s_for_bmax = s + Tensor(
                    (a_mask.astype(np.float64) - 1.0)[:, :, None, None] * _NEG_BIG)
            bmax = s_for_bmax.max(axis=1)  # (ga, gb, b_len)
            if b_mask is None:
                xi_b_blk = bmax.mean(axis=2)
            else:
                bm = b_mask.astype(np.float64)
                xi_b_blk = (bmax * Tensor(bm[None])).sum(axis=2) \
                    * Tensor((1.0 / bm.sum(axis=1))[None, :])
            blocks_b.append(xi_b_blk)
        row_blocks_a.append(concat(blocks_a, axis=1))
        row_blocks_b.append(concat(blocks_b, axis=1))
        row_order.append(a_idx)
    xi_a = concat(row_blocks_a, axis=0)
    xi_b = concat(row_blocks_b, axis=0)
    row_perm = np.argsort(np.concatenate(row_order))
    col_perm = np.argsort(col_order)

    def reorder(t: Tensor) -> Tensor:
        if not np.array_equal(row_perm, np.arange(row_perm.size)):
            t = take_first(t, row_perm)
        if not np.array_equal(col_perm, np.arange(col_perm.size)):
            t = take_first(t.transpose(1, 0), col_perm).transpose(1, 0)
        return t

    return reorder(xi_a), reorder(xi_b)


def _normalize_tokens(t: Tensor) -> Tensor:
    sq = (t * t).sum(axis=-1, keepdims=True)
    if np.any(sq.data < _ZERO_NORM_TOL ** 2):
        raise ValueError("zero-norm content token")
    return t / sq.sqrt()


# -- batch encoding context ----------------------------------------------------


def _frame(ids: list[int]) -> list[int]:
    return [0] + list(ids) + [1]


class _BatchContext:
    """Shared encodings for one loss evaluation over a batch."""

    def __init__(self, batch: Batch, params: ModelParams):
        self.batch = batch
        self.params = params
        self._images = None
        self._captions = None
        self._pos_prompts = None
        self._neg_prompts = None

    def images(self) -> Tensor:
        if self._images is None:
            self._images = encode_image_batch(self.batch.patch_features, self.params)
        return self._images

    def image_content_norm(self) -> _SeqBank:
        return _SeqBank.from_tensor(_normalize_tokens(self.images()[:, 1:, :]))

    def image_global(self) -> Tensor:
        return self.images()[:, 0, :]

    def captions(self) -> _SeqBank:
        if self._captions is None:
            framed = [_frame(ids) for ids in self.batch.caption_ids]
            self._captions = _SeqBank.from_framed_ids(framed, self.params)
        return self._captions

    def prompts(self, positive: bool) -> tuple[list[tuple[int, tuple[int, ...]]], _SeqBank]:
        """Flattened (owner, ids) prompt list plus its encoded bank."""
        cache = self._pos_prompts if positive else self._neg_prompts
        if cache is not None:
            return cache
        flat: list[tuple[int, tuple[int, ...]]] = []
        for i, ps in enumerate(self.batch.prompt_sets):
            prompts = ps.positive_prompts if positive else ps.negative_prompts
            for _attr, ids in prompts:
                flat.append((i, ids))
        if not flat:
            raise ValueError(
                f"every sample needs at least one {'positive' if positive else 'negative'} prompt"
            )
        bank = _SeqBank.from_framed_ids(
            [_frame(list(ids)) for _o, ids in flat], self.params)
        out = (flat, bank)
        if positive:
            self._pos_prompts = out
        else:
            self._neg_prompts = out
        return out


# -- graph builders ------------------------------------------------------------


def _kl_rows(p: Tensor, q: np.ndarray, eps: float) -> Tensor:
    """(1/B) sum_ij p_ij log(p_ij / (q_ij + eps)) for row-stochastic p."""
    b = p.shape[0]
    log_q = np.log(q + eps)
    return (p * (p.log() - Tensor(log_q))).sum() * (1.0 / b)


def _dts_graph(ctx: _BatchContext, w: LossWeights,
               global_tokens: bool = False) -> Tensor:
    batch = ctx.batch
    b = batch.size
    if global_tokens:
        img_bank = _SeqBank.from_tensor(
            _normalize_tokens(ctx.image_global().reshape(b, 1, -1)))
        txt_bank = _SeqBank.from_tensor(
            _normalize_tokens(ctx.captions().globals_eos().reshape(b, 1, -1)))
    else:
        img_bank = ctx.image_content_norm()
        txt_bank = ctx.captions().normalized()
    xi_img, xi_txt = _pairwise_xi(img_bank, txt_bank)
    q = batch.y / batch.y.sum(axis=1, keepdims=True)
    p_i2t = (xi_img * (1.0 / w.tau)).softmax(axis=-1)
    p_t2i = (xi_txt.transpose(1, 0) * (1.0 / w.tau)).softmax(axis=-1)
    # y is symmetric, so the text-to-image target rows are q as well
    return _kl_rows(p_i2t, q, w.epsilon) + _kl_rows(p_t2i, q, w.epsilon)


def _prompt_probability_matrices(ctx: _BatchContext, w: LossWeights,
                                 positive: bool) -> tuple[Tensor, Tensor, np.ndarray]:
    """Eq.-3 style probability matrices between images and individual prompts.

    Returns (S_i2a (B, P), S_a2i (P, B), owners (P,)).
    """
    flat, bank = ctx.prompts(positive)
    owners = np.asarray([o for o, _ in flat], dtype=np.int64)
    xi_img, xi_prm = _pairwise_xi(ctx.image_content_norm(), bank.normalized())
    s_i2a = (xi_img * (1.0 / w.tau)).softmax(axis=-1)
    s_a2i = (xi_prm.transpose(1, 0) * (1.0 / w.tau)).softmax(axis=-1)
    return s_i2a, s_a2i, owners


def _contrastive_prompt_term(ctx: _BatchContext, w: LossWeights,
                             positive: bool) -> Tensor:
    """-(1/2B) sum over prompts of matched log-probabilities, both directions."""
    b = ctx.batch.size
    s_i2a, s_a2i, owners = _prompt_probability_matrices(ctx, w, positive)
    qi = np.arange(owners.size, dtype=np.int64)
    matched_i2a = gather_pairs(s_i2a, owners, qi)
    matched_a2i = gather_pairs(s_a2i, qi, owners)
    logs = (matched_i2a + w.epsilon).log() + (matched_a2i + w.epsilon).log()
    return logs.sum() * (-1.0 / (2.0 * b))


def _diac_graph(ctx: _BatchContext, w: LossWeights) -> Tensor:
    piac = _contrastive_prompt_term(ctx, w, positive=True)
    niac = _contrastive_prompt_term(ctx, w, positive=False)
    return (piac - niac) * 0.5


def siam_labels(batch: Batch) -> np.ndarray:
    """y[i, j] = 1 iff image i truly has every attribute asserted by j's
    positive prompts (ground-truth annotations, not caption extraction)."""
    b = batch.size
    y = np.zeros((b, b))
    asserted = [
        {attr for attr, _ids in ps.positive_prompts} for ps in batch.prompt_sets
    ]
    for i in range(b):
        have = batch.annotations[i].positive_ids
        for j in range(b):
            y[i, j] = 1.0 if asserted[j] <= have else 0.0
    return y


def _prompt_set_bank(ctx: _BatchContext, positive: bool) -> _SeqBank:
    """Per-sample concatenation of prompt content tokens, padded + masked."""
    flat, bank = ctx.prompts(positive)
    b = ctx.batch.size
    owners = [o for o, _ in flat]
    counts = [owners.count(i) for i in range(b)]
    if min(counts) == 0:
        i = counts.index(0)
        raise ValueError(
            f"sample {i} has no {'positive' if positive else 'negative'} prompts")
    # fast path: one prompt length, equal counts, owner-major order
    if len(bank.groups) == 1 and len(set(counts)) == 1 and owners == sorted(owners):
        _idx, toks, _m, _e, _length = bank.groups[0]
        width = toks.shape[1]
        return _SeqBank.from_tensor(toks.reshape(b, counts[0] * width, toks.shape[2]))
    owner_rows: list[list[Tensor]] = [[] for _ in range(b)]
    for idx, toks, _mask, _enc, _length in bank.groups:
        for row, orig in enumerate(idx):
            owner_rows[flat[orig][0]].append(toks[row])
    per_owner = [concat(rows, axis=0) for rows in owner_rows]
    lengths = [t.shape[0] for t in per_owner]
    lmax = max(lengths)
    d = per_owner[0].shape[1]
    padded, mask = [], np.zeros((b, lmax), dtype=bool)
    for i, t in enumerate(per_owner):
        mask[i, :lengths[i]] = True
        if lengths[i] < lmax:
            t = concat([t, Tensor(np.zeros((lmax - lengths[i], d)))], axis=0)
        padded.append(t.reshape(1, lmax, d))
    return _SeqBank.from_tensor(concat(padded, axis=0), mask=mask)


def _siam_graph(ctx: _BatchContext, w: LossWeights) -> Tensor:
    batch = ctx.batch
    b = batch.size
    img_bank = ctx.image_content_norm()
    pos_bank = _prompt_set_bank(ctx, positive=True).normalized()
    neg_bank = _prompt_set_bank(ctx, positive=False).normalized()
    xi_img_p, xi_set_p = _pairwise_xi(img_bank, pos_bank)
    xi_img_n, xi_set_n = _pairwise_xi(img_bank, neg_bank)
    sp_i2a = (xi_img_p * (1.0 / w.tau)).softmax(axis=-1)
    sn_i2a = (xi_img_n * (1.0 / w.tau)).softmax(axis=-1)
    sp_a2i = (xi_set_p.transpose(1, 0) * (1.0 / w.tau)).softmax(axis=-1)
    sn_a2i = (xi_set_n.transpose(1, 0) * (1.0 / w.tau)).softmax(axis=-1)
    g = np.array([
        gamma(len(ps.positive_prompts), len(ps.negative_prompts))
        for ps in batch.prompt_sets
    ])
    gcol = Tensor(g[:, None])
    ginv = Tensor((1.0 / g)[:, None])
    p1 = (gcol * sp_i2a - ginv * sn_i2a).softmax(axis=-1)
    p2 = (gcol * sp_a2i - ginv * sn_a2i).softmax(axis=-1)
    p = (p1 + p2) * 0.5
    y = Tensor(siam_labels(batch))
    eps = w.epsilon
    log_p = p.clip(eps, 1.0 - eps).log()
    log_1mp = (1.0 - p).clip(eps, 1.0 - eps).log()
    bce = y * log_p + (1.0 - y) * log_1mp
    return bce.sum() * (-1.0 / b)


def _mask_framed_ids(framed: np.ndarray, mask_rate: float, rng,
                     mask_id: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Independently mask content positions; rows with no draw mask position 1."""
    masked = framed.copy()
    chosen = np.zeros(framed.shape, dtype=bool)
    n, length = framed.shape
    for r in range(n):
        for pos in range(1, length - 1):
            if rng.random() < mask_rate:
                chosen[r, pos] = True
        if not chosen[r].any():
            chosen[r, 1] = True
    masked[chosen] = mask_id
    return masked, chosen


def _masked_prediction_graph(ctx: _BatchContext, sequences: list[list[int]],
                             owner_images: list[int], mask_rate: float,
                             rng) -> Tensor:
    """Mean cross-entropy of cross-encoder vocab logits at masked positions.

    `sequences` are unframed content ids; masking draws run in input order
    so the pattern is reproducible from the generator state alone. Mixed
    lengths are handled as one term per length class sharing the global
    masked-position count.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    params = ctx.params
    v = params.config.vocab_size
    framed_all = [_frame(list(ids)) for ids in sequences]
    masked_all, chosen_all = [], []
    for row in framed_all:
        arr = np.asarray([row], dtype=np.int64)
        masked, chosen = _mask_framed_ids(arr, mask_rate, rng)
        masked_all.append(masked[0])
        chosen_all.append(chosen[0])
    by_len: dict[int, list[int]] = {}
    for i, row in enumerate(framed_all):
        by_len.setdefault(len(row), []).append(i)
    terms, total = [], 0
    for length in sorted(by_len):
        sel = by_len[length]
        framed = np.asarray([framed_all[i] for i in sel], dtype=np.int64)
        masked = np.asarray([masked_all[i] for i in sel], dtype=np.int64)
        chosen = np.asarray([chosen_all[i] for i in sel])
        owners = np.asarray([owner_images[i] for i in sel], dtype=np.int64)
        enc = encode_text_batch(masked, params)
        imgs = take_first(ctx.images(), owners)
        logp = cross_encode_batch(enc, imgs, params).log_softmax(axis=-1)
        onehot = np.zeros(framed.shape + (v,))
        rows, cols = np.nonzero(chosen)
        onehot[rows, cols, framed[rows, cols]] = 1.0
        total += rows.size
        terms.append((logp * Tensor(onehot)).sum())
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (-1.0 / total)


def _mapm_graph(ctx: _BatchContext, mask_rate: float, rng_seed: int) -> Tensor:
    flat, _bank = ctx.prompts(positive=True)
    rng = np.random.default_rng([rng_seed, 27101])
    return _masked_prediction_graph(
        ctx, [list(ids) for _o, ids in flat], [o for o, _ in flat], mask_rate, rng)


def _mlm_graph(ctx: _BatchContext, mask_rate: float, rng_seed: int) -> Tensor:
    rng = np.random.default_rng([rng_seed, 99721])
    return _masked_prediction_graph(
        ctx, ctx.batch.caption_ids, list(range(ctx.batch.size)), mask_rate, rng)


def _id_graph(ctx: _BatchContext) -> Tensor:
    batch, params = ctx.batch, ctx.params
    c = params.config.num_identities
    ids = batch.identities
    if ids.min() < 0 or ids.max() >= c:
        raise ValueError(f"identity outside 0..{c - 1}")
    img_g = ctx.image_global()
    txt_g = ctx.captions().globals_eos()
    both = concat([img_g, txt_g], axis=0)
    logits = both @ params["id_w"] + params["id_b"]
    logp = logits.log_softmax(axis=-1)
    onehot = np.zeros((2 * batch.size, c))
    onehot[np.arange(2 * batch.size), np.concatenate([ids, ids])] = 1.0
    return (logp * Tensor(onehot)).sum() * (-1.0 / (2 * batch.size))


# -- public losses -------------------------------------------------------------


def _finish(value: Tensor, params: ModelParams) -> GradResult:
    v = float(value.data)
    if not np.isfinite(v):
        raise FloatingPointError("non-finite loss value")
    grads = compute_gradients(value, params.tensors)
    return GradResult(value=v, grads=grads)


def dts_loss(batch: Batch, params: ModelParams, w: LossWeights) -> GradResult:
    """Bidirectional KL between token-wise match probabilities and labels."""
    return _finish(_dts_graph(_BatchContext(batch, params), w), params)


def diac_loss(batch: Batch, params: ModelParams, w: LossWeights) -> GradResult:
    """Positive-prompt contrast minus negative-prompt contrast, halved."""
    return _finish(_diac_graph(_BatchContext(batch, params), w), params)


def siam_loss(batch: Batch, params: ModelParams, w: LossWeights) -> GradResult:
    """BCE over balance-weighted positive-vs-negative prompt-set probabilities."""
    return _finish(_siam_graph(_BatchContext(batch, params), w), params)


def mapm_loss(batch: Batch, params: ModelParams, mask_rate: float = 0.15,
              rng_seed: int = 0) -> GradResult:
    """Masked-token prediction on positive prompts via the cross encoder."""
    return _finish(_mapm_graph(_BatchContext(batch, params), mask_rate, rng_seed),
                   params)


def mlm_loss(batch: Batch, params: ModelParams, mask_rate: float = 0.15,
             rng_seed: int = 0) -> GradResult:
    """Masked-token prediction on full captions via the cross encoder."""
    return _finish(_mlm_graph(_BatchContext(batch, params), mask_rate, rng_seed),
                   params)


def id_loss(batch: Batch, params: ModelParams) -> GradResult:
    """Identity classification of image cls and text eos embeddings."""
    return _finish(_id_graph(_BatchContext(batch, params)), params)


def dapl_loss(batch: Batch, params: ModelParams, w: LossWeights,
              mask_rate: float = 0.15, rng_seed: int = 0) -> GradResult:
    """(diac + siam + mapm) / 3 on one shared graph."""
    ctx = _BatchContext(batch, params)
    value = (_diac_graph(ctx, w) + _siam_graph(ctx, w)
             + _mapm_graph(ctx, mask_rate, rng_seed)) * (1.0 / 3.0)
    return _finish(value, params)


def total_loss(batch: Batch, params: ModelParams, w: LossWeights,
               mask_rate: float = 0.15, rng_seed: int = 0,
               toggles: LossToggles | None = None,
               global_contrastive: bool = False) -> GradResult:
    """Weighted sum of all enabled objectives with per-component reporting.

    Disabled components contribute exactly zero value and gradient (their
    graphs are never built). `global_contrastive` replaces the token-wise
    matching with the cls/eos-only variant used by the ablation baseline.
    """
    toggles = toggles or LossToggles()
    ctx = _BatchContext(batch, params)
    components: dict[str, float] = {}
    terms: list[Tensor] = []

    def book(name: str, tensor: Tensor | None, weight: float) -> None:
        if tensor is None:
            components[name] = 0.0
        else:
            components[name] = float(tensor.data)
            if weight != 0.0:
                terms.append(tensor * weight)

    dts_t = _dts_graph(ctx, w, global_tokens=global_contrastive) if toggles.dts else None
    book("dts", dts_t, w.lambda_dts)
    mlm_t = _mlm_graph(ctx, mask_rate, rng_seed) if toggles.mlm else None
    book("mlm", mlm_t, w.lambda_mlm)
    id_t = _id_graph(ctx) if toggles.id else None
    book("id", id_t, w.lambda_id)

    diac_t = _diac_graph(ctx, w) if toggles.diac else None
    siam_t = _siam_graph(ctx, w) if toggles.siam else None
    mapm_t = _mapm_graph(ctx, mask_rate, rng_seed) if toggles.mapm else None
    components["diac"] = float(diac_t.data) if diac_t is not None else 0.0
    components["siam"] = float(siam_t.data) if siam_t is not None else 0.0
    components["mapm"] = float(mapm_t.data) if mapm_t is not None else 0.0
    dapl_parts = [t for t in (diac_t, siam_t, mapm_t) if t is not None]
    if dapl_parts:
        acc = dapl_parts[0]
        for t in dapl_parts[1:]:
            acc = acc + t
        dapl_t = acc * (1.0 / 3.0)
        components["dapl"] = float(dapl_t.data)
        if w.lambda_dapl != 0.0:
            terms.append(dapl_t * w.lambda_dapl)
    else:
        components["dapl"] = 0.0

    if terms:
        value = terms[0]
        for t in terms[1:]:
            value = value + t
    else:
        value = Tensor(0.0)
    v = float(value.data)
    if not np.isfinite(v):
        raise FloatingPointError(f"non-finite total loss; components={components}")
    if value.requires_grad:
        grads = compute_gradients(value, params.tensors)
    else:
        grads = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    components["total"] = v
    return GradResult(value=v, grads=grads, components=components)
