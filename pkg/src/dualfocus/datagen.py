"""Deterministic synthetic person-attribute dataset.

Every identity is a set of present attributes; every image encodes the
identity's attribute bits as one noisy patch per attribute; every caption
asserts some present attributes and denies some absent ones through the
attribute table's templates.

Identity vectors are sampled so that captions identify their identity
uniquely: non-confusable identities carry exactly `mentioned_positive`
attributes (captions list all of them, and distinct equal-size sets never
contain each other), while each confusable pair adds a twin with one extra
attribute whose captions are forced to mention the differing attribute.
With i.i.d. attribute vectors the caption would routinely match several
identities and no model could reach high Rank-1; this construction keeps
retrieval information-complete while confusable pairs still require the
negated-descriptor distinction.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attributes import (
    AttributeAnnotation,
    AttributeTable,
    default_attribute_table,
    extract_attributes,
    render_prompts,
)
from .losses import Batch
from .vocab import Vocabulary

__all__ = [
    "SynthConfig",
    "Sample",
    "DatasetManifest",
    "generate_dataset",
    "save_manifest",
    "load_manifest",
    "make_batches",
]

MANIFEST_VERSION = 1
_MAX_RESAMPLE_TRIES = 20000


@dataclass(frozen=True)
class SynthConfig:
    num_attributes: int = 12
    identities: int = 100
    images_per_identity: int = 4
    captions_per_image: int = 1
    noise_sigma: float = 0.1
    mentioned_positive: int = 3
    mentioned_negative: int = 2
    confusable_fraction: float = 0.2
    patch_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mentioned_positive + self.mentioned_negative > self.num_attributes:
            raise ValueError(
                "mentioned_positive + mentioned_negative must not exceed num_attributes")
        for name in ("num_attributes", "identities", "images_per_identity",
                     "captions_per_image", "mentioned_positive",
                     "mentioned_negative", "patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.confusable_fraction <= 1.0:
            raise ValueError("confusable_fraction must be in [0, 1]")

    @property
    def num_confusable_pairs(self) -> int:
        return int(round(self.confusable_fraction * self.identities)) // 2


@dataclass
class Sample:
    sample_id: int
    identity_id: int
    patch_features: np.ndarray  # (num_attributes, patch_dim)
    caption: list[str]
    annotation: AttributeAnnotation  # identity ground truth


@dataclass
class DatasetManifest:
    split: str
    samples: list[Sample]
    vocab: Vocabulary
    attribute_table: AttributeTable
    num_attributes: int
    patch_dim: int
    confusable_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def num_identities(self) -> int:
        return int(max(s.identity_id for s in self.samples)) + 1

    def confusable_identities(self) -> set[int]:
        return {i for pair in self.confusable_pairs for i in pair}


def _sample_identity_sets(cfg: SynthConfig, rng) -> tuple[list[frozenset[int]],
                                                          list[tuple[int, int]]]:
    """Attribute sets per identity plus the list of twin identity pairs.

    Non-confusable identities get distinct size-m_p sets; each confusable
    pair is (S, S + {extra}). No identity's set may contain another's
    except within a designated pair, and twin supersets may share at most
    m_p - 1 attributes with each other so captions stay discriminative.
    """
    k, m_p = cfg.num_attributes, cfg.mentioned_positive
    n_pairs = cfg.num_confusable_pairs
    n_single = cfg.identities - 2 * n_pairs
    if n_pairs > 0 and m_p + 1 + cfg.mentioned_negative > k:
        raise ValueError("confusable twins need mentioned_positive + mentioned_negative + 1 <= num_attributes")

    base_sets: list[frozenset[int]] = []
    twin_sets: list[frozenset[int]] = []
    taken: set[frozenset[int]] = set()

    def base_ok(s: frozenset[int]) -> bool:
        if s in taken:
            return False
        # may not sit inside an existing twin superset
        return all(not s <= t for t in twin_sets)

    def twin_ok(t: frozenset[int], own_base: frozenset[int]) -> bool:
        if t in taken:
            return False
        for s in base_sets:
            if s != own_base and s <= t:
                return False
        # two supersets sharing m_p attributes would let one twin's m_p
        # positive mentions fit inside the other
        return all(len(t & other) < m_p for other in twin_sets)

    tries = 0
    while len(base_sets) < n_single + n_pairs:
        tries += 1
        if tries > _MAX_RESAMPLE_TRIES:
            raise RuntimeError("could not sample identity attribute sets; "
                               "increase num_attributes or lower identities")
        s = frozenset(rng.choice(k, size=m_p, replace=False).tolist())
        if not base_ok(s):
            continue
        if len(base_sets) >= n_single:
            # confusable base: also needs a valid twin superset
            rest = [a for a in range(k) if a not in s]
            rng.shuffle(rest)
            twin = None
            for extra in rest:
                t = s | {extra}
                if twin_ok(t, s):
                    twin = t
                    break
            if twin is None:
                continue
            twin_sets.append(twin)
            taken.add(twin)
        base_sets.append(s)
        taken.add(s)

    sets = list(base_sets[:n_single])
    pairs: list[tuple[int, int]] = []
    for i in range(n_pairs):
        a_id = len(sets)
        sets.append(base_sets[n_single + i])
        b_id = len(sets)
        sets.append(twin_sets[i])
        pairs.append((a_id, b_id))
    return sets, pairs


def _caption_mentions(identity_set: frozenset[int], diff_attr: int | None,
                      cfg: SynthConfig, k: int, rng) -> tuple[list[int], list[int]]:
    """Choose asserted/denied attribute ids for one caption.

    Twins always mention the pair's differing attribute (positively when
    present, negatively when absent) so the caption can tell them apart.
    """
    pos_pool = sorted(identity_set)
    neg_pool = sorted(set(range(k)) - identity_set)
    forced_pos = [diff_attr] if diff_attr is not None and diff_attr in identity_set else []
    forced_neg = [diff_attr] if diff_attr is not None and diff_attr not in identity_set else []
    free_pos = [a for a in pos_pool if a not in forced_pos]
    free_neg = [a for a in neg_pool if a not in forced_neg]
    n_pos = cfg.mentioned_positive - len(forced_pos)
    n_neg = cfg.mentioned_negative - len(forced_neg)
    if n_pos > len(free_pos) or n_neg > len(free_neg):
        raise ValueError("identity cannot support the configured mention counts")
    pos = list(forced_pos)
    if n_pos:
        pos += rng.choice(free_pos, size=n_pos, replace=False).tolist()
    neg = list(forced_neg)
    if n_neg:
        neg += rng.choice(free_neg, size=n_neg, replace=False).tolist()
    return pos, neg


def _render_caption(pos: list[int], neg: list[int], table: AttributeTable,
                    rng) -> list[str]:
    clauses = [table.render(a, positive=True) for a in pos]
    clauses += [table.render(a, positive=False) for a in neg]
    order = rng.permutation(len(clauses))
    words: list[str] = []
    for i in order:
        words.extend(clauses[i])
    return words


def generate_dataset(cfg: SynthConfig, split: str = "train") -> DatasetManifest:
    """Fully deterministic manifest for one split.

    Identity attribute sets, patch bases and signal directions depend only
    on cfg.seed, so train and test splits of the same config share them;
    noise and caption draws differ per split.
    """
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    k = cfg.num_attributes
    table = default_attribute_table(k)
    vocab = Vocabulary.from_words(table.words())

    id_rng = np.random.default_rng([cfg.seed, 11])
    sets, pairs = _sample_identity_sets(cfg, id_rng)
    feat_rng = np.random.default_rng([cfg.seed, 23])
    base = feat_rng.normal(0.0, 1.0, size=(k, cfg.patch_dim))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    signal = feat_rng.normal(0.0, 1.0, size=(k, cfg.patch_dim))
    signal /= np.linalg.norm(signal, axis=1, keepdims=True)

    split_tag = 0 if split == "train" else 1
    rng = np.random.default_rng([cfg.seed, 37, split_tag])
    twin_diff: dict[int, int] = {}
    for a, b in pairs:
        diff = (sets[a] ^ sets[b])
        assert len(diff) == 1
        twin_diff[a] = twin_diff[b] = next(iter(diff))

    samples: list[Sample] = []
    sid = 0
    for identity in range(cfg.identities):
        present = sets[identity]
        bits = np.array([1.0 if a in present else 0.0 for a in range(k)])
        ann = AttributeAnnotation(
            frozenset(present), frozenset(range(k)) - frozenset(present))
        for _img in range(cfg.images_per_identity):
            noise = rng.normal(0.0, cfg.noise_sigma, size=(k, cfg.patch_dim))
            patches = base + bits[:, None] * signal + noise
            for _cap in range(cfg.captions_per_image):
                pos, neg = _caption_mentions(
                    present, twin_diff.get(identity), cfg, k, rng)
                caption = _render_caption(pos, neg, table, rng)
                samples.append(Sample(
                    sample_id=sid,
                    identity_id=identity,
                    patch_features=patches,
                    caption=caption,
                    annotation=ann,
                ))
                sid += 1
    return DatasetManifest(
        split=split,
        samples=samples,
        vocab=vocab,
        attribute_table=table,
        num_attributes=k,
        patch_dim=cfg.patch_dim,
        confusable_pairs=pairs,
    )


def reroll_captions(manifest: DatasetManifest, seed,
                    max_text_len: int = 32) -> DatasetManifest:
    """Fresh caption draws for every sample; images and identities stay put.

    Mention counts are inferred per sample from its stored caption, twin
    identities keep their forced mention of the differing attribute, and
    clause order reshuffles. Each redraw may also add a few extra truthful
    negative mentions, so caption lengths (and with them the later
    positional rows) vary during training the way appended descriptors do
    at query time. Used as train-time text augmentation: the attribute
    truth behind each caption is unchanged.
    """
    from .attributes import mentioned_attributes

    rng = np.random.default_rng(seed)
    table = manifest.attribute_table
    ann_by_id = {s.identity_id: s.annotation for s in manifest.samples}
    twin_diff: dict[int, int] = {}
    for a, b in manifest.confusable_pairs:
        diff = ann_by_id[a].positive_ids ^ ann_by_id[b].positive_ids
        twin_diff[a] = twin_diff[b] = next(iter(diff))

    clause_width = max(
        len(table.render(e.attribute_id, False)) for e in table.entries)
    samples = []
    for s in manifest.samples:
        mentioned = mentioned_attributes(s.caption, table)
        m_p = len(mentioned & s.annotation.positive_ids)
        m_n = len(mentioned & s.annotation.negative_ids)
        k = manifest.num_attributes
        base_words = (m_p + max(1, m_n)) * clause_width
        room = (max_text_len - 2 - base_words) // clause_width
        avail = len(s.annotation.negative_ids) - max(1, m_n)
        extra = int(rng.integers(0, min(3, room, avail) + 1)) if min(3, room, avail) > 0 else 0
        cfg_like = SynthConfig(
            num_attributes=k, mentioned_positive=max(1, m_p),
            mentioned_negative=max(1, m_n) + extra, patch_dim=manifest.patch_dim)
        pos, neg = _caption_mentions(
            frozenset(s.annotation.positive_ids),
            twin_diff.get(s.identity_id), cfg_like, k, rng)
        samples.append(Sample(
            sample_id=s.sample_id,
            identity_id=s.identity_id,
            patch_features=s.patch_features,
            caption=_render_caption(pos, neg, table, rng),
            annotation=s.annotation,
        ))
    return DatasetManifest(
        split=manifest.split,
        samples=samples,
        vocab=manifest.vocab,
        attribute_table=table,
        num_attributes=manifest.num_attributes,
        patch_dim=manifest.patch_dim,
        confusable_pairs=list(manifest.confusable_pairs),
    )


# -- JSON-lines round trip -----------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    header = {
        "version": MANIFEST_VERSION,
        "split": manifest.split,
        "num_samples": len(manifest.samples),
        "K": manifest.num_attributes,
        "d_in": manifest.patch_dim,
        "vocab": list(manifest.vocab.words),
        "attribute_table": [
            {
                "id": e.attribute_id,
                "phrase": " ".join(e.phrase),
                "pos": " ".join(e.positive_template),
                "neg": " ".join(e.negative_template),
            }
            for e in manifest.attribute_table.entries
        ],
        "attribute_table_hash": manifest.attribute_table.table_hash(),
        "confusable_pairs": [list(p) for p in manifest.confusable_pairs],
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for s in manifest.samples:
        lines.append(json.dumps({
            "sample_id": s.sample_id,
            "identity_id": s.identity_id,
            "patch_features": s.patch_features.tolist(),
            "caption": s.caption,
            "annotation": {
                "positive_ids": sorted(s.annotation.positive_ids),
                "negative_ids": sorted(s.annotation.negative_ids),
            },
        }, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def _require(obj: dict, key: str, line_no: int):
    if key not in obj:
        raise ValueError(f"manifest line {line_no}: missing field {key!r}")
    return obj[key]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a JSON-lines manifest; any schema violation names its line."""
    from .attributes import AttributeEntry

    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise ValueError("manifest is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest line 1: invalid JSON ({exc})") from None
    for key in ("version", "split", "num_samples", "K", "d_in", "vocab",
                "attribute_table", "attribute_table_hash", "confusable_pairs"):
        _require(header, key, 1)
    if header["version"] != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {header['version']}")
    expected = header["num_samples"]
    if len(lines) - 1 != expected:
        raise ValueError(
            f"manifest truncated: header promises {expected} samples, "
            f"found {len(lines) - 1} lines")
    entries = tuple(
        AttributeEntry(
            attribute_id=int(item["id"]),
            phrase=tuple(item["phrase"].split()),
            positive_template=tuple(item["pos"].split()),
            negative_template=tuple(item["neg"].split()),
        )
        for item in header["attribute_table"]
    )
    table = AttributeTable(entries)
    if table.table_hash() != header["attribute_table_hash"]:
        raise ValueError("attribute_table_hash does not match embedded table")
    vocab = Vocabulary(tuple(header["vocab"]))
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"manifest line {i}: invalid JSON ({exc})") from None
        ann_obj = _require(obj, "annotation", i)
        patches = np.asarray(_require(obj, "patch_features", i), dtype=np.float64)
        if patches.shape != (header["K"], header["d_in"]):
            raise ValueError(
                f"manifest line {i}: patch_features shape {patches.shape} "
                f"!= ({header['K']}, {header['d_in']})")
        if not np.all(np.isfinite(patches)):
            raise ValueError(f"manifest line {i}: non-finite patch_features")
        samples.append(Sample(
            sample_id=int(_require(obj, "sample_id", i)),
            identity_id=int(_require(obj, "identity_id", i)),
            patch_features=patches,
            caption=list(_require(obj, "caption", i)),
            annotation=AttributeAnnotation(
                frozenset(_require(ann_obj, "positive_ids", i)),
                frozenset(_require(ann_obj, "negative_ids", i)),
            ),
        ))
    return DatasetManifest(
        split=header["split"],
        samples=samples,
        vocab=vocab,
        attribute_table=table,
        num_attributes=header["K"],
        patch_dim=header["d_in"],
        confusable_pairs=[tuple(p) for p in header["confusable_pairs"]],
    )


# -- batching -------------------------------------------------------------------


def make_batches(manifest: DatasetManifest, batch_size: int, seed) -> list[Batch]:
    """Seeded shuffle into contiguous chunks; a trailing partial chunk drops."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest.samples))
    table, vocab = manifest.attribute_table, manifest.vocab
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        chunk = [manifest.samples[i] for i in order[start:start + batch_size]]
        caption_ids, prompt_sets, annotations = [], [], []
        for s in chunk:
            caption_ids.append(vocab.encode(s.caption))
            extracted = extract_attributes(s.caption, table)
            prompt_sets.append(render_prompts(extracted, table, vocab))
            annotations.append(s.annotation)
        batches.append(Batch.build(
            patch_features=np.stack([s.patch_features for s in chunk]),
            caption_ids=caption_ids,
            identities=np.asarray([s.identity_id for s in chunk]),
            prompt_sets=prompt_sets,
            annotations=annotations,
        ))
    return batches
