"""Trainable desk-scale encoders.

One parameter set houses all three encoder roles: the image encoder is a
learnable cls token plus a linear patch projection, the text encoder is a
shared token-embedding table with positional rows followed by a single
self-attention + feed-forward block, and the cross encoder is one
multi-head block where text positions query image positions before a
vocabulary head. Captions and attribute prompts go through the same text
parameters, which is what ties prompt learning to caption matching.
"""

from __future__ import annotations

import base64
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, concat, gather_rows

__all__ = [
    "ModelConfig",
    "ModelParams",
    "TokenEmbeddingSequence",
    "init_params",
    "encode_image",
    "encode_text",
    "cross_encode",
    "encode_image_batch",
    "encode_text_batch",
    "embed_token_batch",
    "cross_encode_batch",
    "save_tensors",
    "load_tensors",
    "save_params",
    "load_params",
]

CHECKPOINT_FORMAT = "dualfocus-tensors"
CHECKPOINT_VERSION = 1

# parameter groups trained at the higher "fresh module" learning rate
FRESH_PARAM_NAMES = frozenset({
    "cross_attn_wq", "cross_attn_wk", "cross_attn_wv", "cross_attn_wo",
    "cross_ffn_w1", "cross_ffn_w2", "vocab_head", "id_w", "id_b",
})


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    input_dim: int = 32
    max_text_len: int = 32
    heads: int = 4
    vocab_size: int = 32
    num_identities: int = 100

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")


@dataclass
class ModelParams:
    """Named parameter tensors plus the shapes they were built for."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
        )


@dataclass
class TokenEmbeddingSequence:
    """Encoded token matrix with special-token bookkeeping.

    Image sequences carry cls at position 0; text sequences carry sos at 0
    and eos at valid_len - 1. Positions at or beyond valid_len are padding
    and excluded from every similarity.
    """

    tokens: np.ndarray
    kind: str
    valid_len: int

    def __post_init__(self):
        if self.kind not in ("image", "text"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be a (n_tokens, dim) matrix")
        if not 1 <= self.valid_len <= self.tokens.shape[0]:
            raise ValueError("valid_len out of range")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("token embeddings must be finite")

    @property
    def special(self) -> dict[str, int]:
        if self.kind == "image":
            return {"cls": 0}
        return {"sos": 0, "eos": self.valid_len - 1}

    def content_tokens(self) -> np.ndarray:
        """Tokens that participate in token-wise similarity."""
        if self.kind == "image":
            return self.tokens[1:self.valid_len]
        return self.tokens[1:self.valid_len - 1]

    def global_token(self) -> np.ndarray:
        """cls for images, eos for texts."""
        if self.kind == "image":
            return self.tokens[0]
        return self.tokens[self.valid_len - 1]


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Gaussian(0, 0.02) tables and projections, zero biases."""
    rng = np.random.default_rng(seed)
    d, d_in, h4 = config.dim, config.input_dim, 4 * config.dim
    v, c, n_t = config.vocab_size, config.num_identities, config.max_text_len

    def g(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    tensors = {
        "text_embed": g(v, d),
        "text_pos": g(n_t, d),
        "txt_attn_wq": g(d, d),
        "txt_attn_wk": g(d, d),
        "txt_attn_wv": g(d, d),
        "txt_attn_wo": g(d, d),
        "txt_ffn_w1": g(d, h4),
        "txt_ffn_w2": g(h4, d),
        "txt_attn_relbias": zeros(config.heads, 2 * n_t - 1),
        "img_proj_w": g(d_in, d),
        "img_proj_b": zeros(d),
        "img_cls": g(d),
        "cross_attn_wq": g(d, d),
        "cross_attn_wk": g(d, d),
        "cross_attn_wv": g(d, d),
        "cross_attn_wo": g(d, d),
        "cross_ffn_w1": g(d, h4),
        "cross_ffn_w2": g(h4, d),
        "vocab_head": g(d, v),
        "id_w": g(d, c),
        "id_b": zeros(c),
    }
    return ModelParams(config, tensors)


# -- batched graph builders ---------------------------------------------------


def _relative_bias(params: ModelParams, lq: int, lk: int) -> Tensor:
    """Per-head additive attention bias indexed by key minus query offset."""
    cfg = params.config
    offsets = (np.arange(lk)[None, :] - np.arange(lq)[:, None]) + cfg.max_text_len - 1
    table = params["txt_attn_relbias"].transpose(1, 0)  # (2*n_t-1, heads)
    return gather_rows(table, offsets).transpose(2, 0, 1)  # (heads, lq, lk)


def _multihead_attention(queries: Tensor, keys: Tensor, params: ModelParams,
                         prefix: str, relative: bool = False) -> Tensor:
    """One residual-free attention read: softmax(QK'/sqrt(dh)) V, projected.

    queries: (..., Lq, d), keys: (..., Lk, d); output (..., Lq, d). With
    `relative`, a learnable offset-indexed bias joins the scores so word
    order relations (a negation word just before a phrase) are readable
    without memorising absolute positions.
    """
    cfg = params.config
    h, dh = cfg.heads, cfg.dim // cfg.heads
    q = queries @ params[f"{prefix}_wq"]
    k = keys @ params[f"{prefix}_wk"]
    v = keys @ params[f"{prefix}_wv"]

    def split(t: Tensor) -> Tensor:
        *lead, L, _ = t.shape
        t = t.reshape(*lead, L, h, dh)
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return t.transpose(perm)  # (..., h, L, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(*range(qh.data.ndim - 2), qh.data.ndim - 1,
                                qh.data.ndim - 2)) * (1.0 / np.sqrt(dh))
    if relative:
        scores = scores + _relative_bias(params, qh.shape[-2], kh.shape[-2])
    attn = scores.softmax(axis=-1)
    out = attn @ vh  # (..., h, Lq, dh)
    lead = out.data.ndim - 3
    perm = tuple(range(lead)) + (lead + 1, lead, lead + 2)
    out = out.transpose(perm)
    *rest, Lq, _, _ = out.shape
    out = out.reshape(*rest, Lq, cfg.dim)
    return out @ params[f"{prefix}_wo"]


def _ffn(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return (x @ params[f"{prefix}_w1"]).gelu() @ params[f"{prefix}_w2"]


def embed_token_batch(ids: np.ndarray, params: ModelParams) -> Tensor:
    """Embedding-table rows plus positional rows for (G, L) framed ids."""
    ids = np.asarray(ids, dtype=np.int64)
    cfg = params.config
    if ids.ndim != 2:
        raise ValueError("ids must be (group, length)")
    if ids.shape[1] > cfg.max_text_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds n_t={cfg.max_text_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    emb = gather_rows(params["text_embed"], ids)
    pos = params["text_pos"][0:ids.shape[1]]
    return emb + pos


def encode_text_batch(ids: np.ndarray, params: ModelParams) -> Tensor:
    """Encode a group of equal-length framed sequences to (G, L, dim).

    `ids` must already carry sos/eos framing. The single self-attention +
    feed-forward block lets negation words reshape nearby phrase tokens,
    which position tables alone cannot express.
    """
    x = embed_token_batch(ids, params)
    x = x + _multihead_attention(x, x, params, "txt_attn", relative=True)
    x = x + _ffn(x, params, "txt_ffn")
    return x


def encode_image_batch(patches: np.ndarray, params: ModelParams) -> Tensor:
    """Project a (G, n_v, input_dim) patch stack to (G, n_v + 1, dim)."""
    patches = np.asarray(patches, dtype=np.float64)
    cfg = params.config
    if patches.ndim != 3 or patches.shape[2] != cfg.input_dim:
        raise ValueError(
            f"expected patches (group, n_v, {cfg.input_dim}), got {patches.shape}"
        )
    g = patches.shape[0]
    proj = Tensor(patches) @ params["img_proj_w"] + params["img_proj_b"]
    cls = params["img_cls"].reshape(1, 1, cfg.dim) * Tensor(np.ones((g, 1, 1)))
    return concat([cls, proj], axis=1)


def cross_encode_batch(text: Tensor, image: Tensor, params: ModelParams) -> Tensor:
    """Cross block: text queries attend image keys/values; vocab logits out.

    text: (G, Lt, dim), image: (G, Li, dim) -> logits (G, Lt, vocab_size).
    """
    if text.shape[-1] != params.config.dim or image.shape[-1] != params.config.dim:
        raise ValueError("encoder dim mismatch in cross_encode")
    x = text + _multihead_attention(text, image, params, "cross_attn")
    x = x + _ffn(x, params, "cross_ffn")
    return x @ params["vocab_head"]


# -- single-sequence convenience wrappers (forward values) -------------------


def frame_ids(token_ids: list[int], params: ModelParams) -> list[int]:
    cfg = params.config
    if len(token_ids) > cfg.max_text_len - 2:
        raise ValueError(
            f"text of {len(token_ids)} ids exceeds n_t - 2 = {cfg.max_text_len - 2}"
        )
    sos_id, eos_id = 0, 1
    return [sos_id] + list(token_ids) + [eos_id]


def encode_text(token_ids: list[int], params: ModelParams) -> TokenEmbeddingSequence:
    framed = np.asarray([frame_ids(token_ids, params)], dtype=np.int64)
    tokens = encode_text_batch(framed, params).data[0]
    return TokenEmbeddingSequence(tokens=tokens, kind="text", valid_len=tokens.shape[0])


def encode_image(patches: np.ndarray, params: ModelParams) -> TokenEmbeddingSequence:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError("patches must be (n_v, input_dim)")
    tokens = encode_image_batch(patches[None], params).data[0]
    return TokenEmbeddingSequence(tokens=tokens, kind="image", valid_len=tokens.shape[0])


def cross_encode(text: TokenEmbeddingSequence, image: TokenEmbeddingSequence,
                 params: ModelParams) -> np.ndarray:
    if text.kind != "text" or image.kind != "image":
        raise ValueError("cross_encode expects (text, image) sequences")
    logits = cross_encode_batch(
        Tensor(text.tokens[None]), Tensor(image.tokens[None]), params
    )
    return logits.data[0]


# -- checkpoint container -----------------------------------------------------


def save_tensors(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Versioned JSON container of named float64 tensors; bit-exact round trip."""
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": {
            name: {
                "shape": list(arr.shape),
                "dtype": "float64",
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, arr in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True))


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    tensors = {}
    for name, spec in obj["tensors"].items():
        raw = base64.b64decode(spec["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(spec["shape"])
        tensors[name] = np.ascontiguousarray(arr)
    return obj["meta"], tensors


def save_params(path: str | Path, params: ModelParams,
                extra_meta: dict | None = None,
                extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    meta = {"model_config": dataclasses.asdict(params.config)}
    if extra_meta:
        meta.update(extra_meta)
    tensors = dict(params.arrays())
    if extra_tensors:
        for name, arr in extra_tensors.items():
            tensors[f"extra/{name}"] = arr
    save_tensors(path, meta, tensors)


def load_params(path: str | Path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    """Returns (params, meta, extra_tensors)."""
    meta, tensors = load_tensors(path)
    config = ModelConfig(**meta["model_config"])
    params_t = {}
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("extra/"):
            extra[name[len("extra/"):]] = arr
        else:
            params_t[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config, params_t), meta, extra
