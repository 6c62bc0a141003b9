"""Deterministic training loop, ablation runner and negative-descriptor probe.

Adam with linear warmup into cosine decay, global gradient-norm clipping,
CSV loss logs and bit-exact checkpoint/resume. Freshly initialised modules
(the cross encoder and the identity classifier) train on their own higher
rate, mirroring the two-tier schedule the full-scale recipe uses.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attributes import mentioned_attributes
from .datagen import DatasetManifest, make_batches, reroll_captions
from .encoders import (
    FRESH_PARAM_NAMES,
    ModelConfig,
    ModelParams,
    init_params,
    load_params,
    save_params,
)
from .losses import LossToggles, LossWeights, total_loss
from .metrics import MetricsReport, evaluate

__all__ = [
    "TrainConfig",
    "RunRecord",
    "AdamState",
    "lr_at",
    "fresh_lr_at",
    "adam_step",
    "clip_gradients",
    "train",
    "run_ablation",
    "run_negative_descriptor_probe",
    "load_train_config",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_HEADER = ["step", "lr", "L_dts", "L_diac", "L_siam", "L_mapm", "L_mlm",
              "L_id", "L_total"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 1e-5
    warmup_epochs: int = 5
    warmup_start_lr: float = 1e-6
    fresh_module_lr: float = 5e-5
    clip_norm: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: LossToggles = field(default_factory=LossToggles)
    seed: int = 0
    eval_every: int = 10
    mask_rate: float = 0.15
    global_contrastive: bool = False
    caption_augment: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.epochs and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        for name in ("base_lr", "warmup_start_lr", "fresh_module_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")

    def canonical_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        d["toggles"] = dataclasses.asdict(self.toggles)
        return d

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def load_train_config(path: str | Path) -> TrainConfig:
    """Parse a TrainConfig JSON file; unknown keys are rejected."""
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ValueError("train config must be a JSON object")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(obj) - fields
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    kwargs = dict(obj)
    if "weights" in kwargs:
        wf = {f.name for f in dataclasses.fields(LossWeights)}
        bad = set(kwargs["weights"]) - wf
        if bad:
            raise ValueError(f"unknown loss weight keys: {sorted(bad)}")
        kwargs["weights"] = LossWeights(**kwargs["weights"])
    if "toggles" in kwargs:
        tf = {f.name for f in dataclasses.fields(LossToggles)}
        bad = set(kwargs["toggles"]) - tf
        if bad:
            raise ValueError(f"unknown loss toggle keys: {sorted(bad)}")
        kwargs["toggles"] = LossToggles(**kwargs["toggles"])
    return TrainConfig(**kwargs)


# -- learning-rate schedule ------------------------------------------------------


def _cosine_factor(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    span = max(1, total_steps - warmup_steps - 1)
    progress = (step - warmup_steps) / span
    return 0.5 * (1.0 + np.cos(np.pi * progress))


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the last step."""
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warmup_steps:
        frac = step / warmup_steps
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    return cfg.base_lr * _cosine_factor(step, steps_per_epoch, cfg)


def fresh_lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Fresh modules skip the ramp and start at full rate, then decay."""
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.fresh_module_lr
    return cfg.fresh_module_lr * _cosine_factor(step, steps_per_epoch, cfg)


# -- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            t=0,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients to a global L2 norm of at most max_norm."""
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- training ----------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    step_records: list[dict]
    eval_records: list[tuple[int, MetricsReport]]
    checkpoint_path: str | None
    loss_log_path: str | None


def _model_config_for(manifest: DatasetManifest,
                      override: ModelConfig | None) -> ModelConfig:
    if override is not None:
        return override
    return ModelConfig(
        dim=64,
        input_dim=manifest.patch_dim,
        max_text_len=32,
        heads=4,
        vocab_size=len(manifest.vocab),
        num_identities=manifest.num_identities,
    )


def _mask_seed(cfg: TrainConfig, step: int) -> int:
    return cfg.seed * 1_000_003 + step


def _split_groups(arrays: dict[str, np.ndarray]):
    base = {k: a for k, a in arrays.items() if k not in FRESH_PARAM_NAMES}
    fresh = {k: a for k, a in arrays.items() if k in FRESH_PARAM_NAMES}
    return base, fresh


def train(train_manifest: DatasetManifest, cfg: TrainConfig,
          test_manifest: DatasetManifest | None = None,
          out_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          model_config: ModelConfig | None = None,
          log: bool = False) -> RunRecord:
    """Run the configured number of epochs; fully reproducible from seeds.

    A checkpoint (parameters, Adam state, epoch) lands at the end of
    training; resuming from one continues at the recorded epoch boundary
    with bit-identical results to an uninterrupted run.
    """
    cfg_hash = cfg.config_hash()
    if resume_from is not None:
        params, meta, extra = load_params(resume_from)
        if meta.get("config_hash") != cfg_hash:
            raise ValueError("checkpoint was written under a different train config")
        start_epoch = int(meta["epoch"])
        arrays = params.arrays()
        base_arrays, fresh_arrays = _split_groups(arrays)
        state_base = AdamState(
            m={k: extra[f"adam_base_m/{k}"] for k in base_arrays},
            v={k: extra[f"adam_base_v/{k}"] for k in base_arrays},
            t=int(meta["adam_t_base"]))
        state_fresh = AdamState(
            m={k: extra[f"adam_fresh_m/{k}"] for k in fresh_arrays},
            v={k: extra[f"adam_fresh_v/{k}"] for k in fresh_arrays},
            t=int(meta["adam_t_fresh"]))
    else:
        params = init_params(_model_config_for(train_manifest, model_config),
                             seed=cfg.seed)
        arrays = params.arrays()
        base_arrays, fresh_arrays = _split_groups(arrays)
        state_base = AdamState.init(base_arrays)
        state_fresh = AdamState.init(fresh_arrays)
        start_epoch = 0

    steps_per_epoch = len(train_manifest.samples) // cfg.batch_size
    if cfg.epochs > 0 and steps_per_epoch < 1:
        raise ValueError("dataset smaller than one batch")

    step_records: list[dict] = []
    eval_records: list[tuple[int, MetricsReport]] = []
    scorer = "global" if cfg.global_contrastive else "token"

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_rows: list[list] = []

    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        epoch_manifest = train_manifest
        if cfg.caption_augment:
            epoch_manifest = reroll_captions(train_manifest, [cfg.seed, 500 + epoch])
        batches = make_batches(epoch_manifest, cfg.batch_size, [cfg.seed, 1000 + epoch])
        for batch in batches:
            lr_base = lr_at(step, steps_per_epoch, cfg)
            lr_fresh = fresh_lr_at(step, steps_per_epoch, cfg)
            try:
                result = total_loss(
                    batch, params, cfg.weights, mask_rate=cfg.mask_rate,
                    rng_seed=_mask_seed(cfg, step), toggles=cfg.toggles,
                    global_contrastive=cfg.global_contrastive)
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"non-finite loss at step {step}: {exc}") from exc
            clip_gradients(result.grads, cfg.clip_norm)
            adam_step(base_arrays, {k: result.grads[k] for k in base_arrays},
                      state_base, lr_base)
            adam_step(fresh_arrays, {k: result.grads[k] for k in fresh_arrays},
                      state_fresh, lr_fresh)
            rec = {"step": step, "lr": lr_base, **{
                f"L_{k}": result.components.get(k, 0.0)
                for k in ("dts", "diac", "siam", "mapm", "mlm", "id")
            }, "L_total": result.value}
            step_records.append(rec)
            log_rows.append([rec["step"], repr(rec["lr"])] + [
                repr(rec[f"L_{k}"]) for k in ("dts", "diac", "siam", "mapm", "mlm", "id")
            ] + [repr(rec["L_total"])])
            step += 1
        if log:
            print(f"epoch {epoch + 1}/{cfg.epochs} total={result.value:.4f}",
                  file=sys.stderr)
        if (test_manifest is not None and cfg.eval_every > 0
                and (epoch + 1) % cfg.eval_every == 0):
            eval_records.append(
                (epoch + 1, evaluate(params, test_manifest, scorer=scorer)))

    checkpoint_path = None
    loss_log_path = None
    if out_dir is not None:
        checkpoint_path = str(out_dir / "checkpoint.json")
        _save_checkpoint(checkpoint_path, params, cfg, cfg.epochs,
                         state_base, state_fresh)
        loss_log_path = str(out_dir / "loss_log.csv")
        with open(loss_log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_HEADER)
            writer.writerows(log_rows)
    return RunRecord(
        config_hash=cfg_hash,
        step_records=step_records,
        eval_records=eval_records,
        checkpoint_path=checkpoint_path,
        loss_log_path=loss_log_path,
    )


def _save_checkpoint(path: str | Path, params: ModelParams, cfg: TrainConfig,
                     epoch: int, state_base: AdamState,
                     state_fresh: AdamState) -> None:
    extra = {}
    for k, a in state_base.m.items():
        extra[f"adam_base_m/{k}"] = a
    for k, a in state_base.v.items():
        extra[f"adam_base_v/{k}"] = a
    for k, a in state_fresh.m.items():
        extra[f"adam_fresh_m/{k}"] = a
    for k, a in state_fresh.v.items():
        extra[f"adam_fresh_v/{k}"] = a
    save_params(path, params, extra_meta={
        "epoch": epoch,
        "adam_t_base": state_base.t,
        "adam_t_fresh": state_fresh.t,
        "config_hash": cfg.config_hash(),
        "train_config": cfg.canonical_dict(),
    }, extra_tensors=extra)


# -- ablation ---------------------------------------------------------------------


ABLATION_ROWS = [
    ("baseline", dict(dts=True, diac=False, siam=False, mapm=False, mlm=True,
                      id=True), True),
    ("+dts", dict(dts=True, diac=False, siam=False, mapm=False, mlm=True,
                  id=True), False),
    ("+diac", dict(dts=True, diac=True, siam=False, mapm=False, mlm=True,
                   id=True), True),
    ("+siam", dict(dts=True, diac=False, siam=True, mapm=False, mlm=True,
                   id=True), True),
    ("+dapl", dict(dts=True, diac=True, siam=True, mapm=True, mlm=True,
                   id=True), True),
    ("full", dict(dts=True, diac=True, siam=True, mapm=True, mlm=True,
                  id=True), False),
]


@dataclass
class AblationRow:
    name: str
    config: TrainConfig
    record: RunRecord
    reports: dict[str, MetricsReport]  # protocol -> report

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "config_hash": self.config.config_hash(),
            "toggles": dataclasses.asdict(self.config.toggles),
            "global_contrastive": self.config.global_contrastive,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
        }


def run_ablation(train_manifest: DatasetManifest,
                 test_manifest: DatasetManifest, base_cfg: TrainConfig,
                 out_dir: str | Path,
                 model_config: ModelConfig | None = None,
                 log: bool = False) -> list[AblationRow]:
    """Train and evaluate the six component configurations.

    The baseline row replaces token-wise matching with the cls/eos global
    contrast and is scored globally; every other row scores token-wise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[AblationRow] = []
    protocols = ["all", "nonconfusable"]
    if test_manifest.confusable_pairs:
        protocols.append("confusable")
    for name, toggles, global_c in ABLATION_ROWS:
        cfg = dataclasses.replace(
            base_cfg, toggles=LossToggles(**toggles), global_contrastive=global_c)
        if log:
            print(f"ablation row {name!r} (hash {cfg.config_hash()[:12]})",
                  file=sys.stderr)
        run_out = out_dir / name.replace("+", "plus_")
        record = train(train_manifest, cfg, test_manifest=None,
                       out_dir=run_out, model_config=model_config, log=log)
        params, _meta, _extra = load_params(record.checkpoint_path)
        scorer = "global" if global_c else "token"
        reports = {
            proto: evaluate(params, test_manifest, scorer=scorer, protocol=proto)
            for proto in protocols
        }
        rows.append(AblationRow(name=name, config=cfg, record=record,
                                reports=reports))
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["no", "name", "dts", "diac", "siam", "mapm", "mlm", "id",
                  "global_contrastive", "scorer",
                  "rank1", "rank5", "rank10", "mAP", "mINP"]
        if "confusable" in protocols:
            header += ["rank1_confusable", "rank1_nonconfusable"]
        header.append("config_hash")
        writer.writerow(header)
        for no, row in enumerate(rows, start=1):
            rep = row.reports["all"]
            t = row.config.toggles
            vals = [no, row.name, int(t.dts), int(t.diac), int(t.siam),
                    int(t.mapm), int(t.mlm), int(t.id),
                    int(row.config.global_contrastive),
                    "global" if row.config.global_contrastive else "token",
                    repr(rep.rank_at[1]), repr(rep.rank_at[5]),
                    repr(rep.rank_at[10]), repr(rep.map_), repr(rep.minp)]
            if "confusable" in protocols:
                vals += [repr(row.reports["confusable"].rank_at[1]),
                         repr(row.reports["nonconfusable"].rank_at[1])]
            vals.append(row.config.config_hash())
            writer.writerow(vals)
    return rows


# -- negative-descriptor probe -------------------------------------------------


@dataclass
class NegProbeResult:
    baseline: MetricsReport
    augmented: MetricsReport
    num_neg: int

    def deltas(self) -> dict[str, float]:
        return {
            "rank1": self.augmented.rank_at[1] - self.baseline.rank_at[1],
            "rank5": self.augmented.rank_at[5] - self.baseline.rank_at[5],
            "rank10": self.augmented.rank_at[10] - self.baseline.rank_at[10],
            "mAP": self.augmented.map_ - self.baseline.map_,
            "mINP": self.augmented.minp - self.baseline.minp,
        }

    def to_json_dict(self) -> dict:
        return {
            "num_neg": self.num_neg,
            "baseline": self.baseline.to_dict(),
            "augmented": self.augmented.to_dict(),
            "deltas": self.deltas(),
        }


def augment_captions_with_negatives(manifest: DatasetManifest, num_neg: int,
                                    seed: int, max_text_len: int = 32
                                    ) -> list[list[int]]:
    """Caption token ids with `num_neg` true negative descriptors appended.

    Descriptors come from each query identity's truly absent attributes,
    skipping ones the caption already denies; the construction asserts the
    chosen attributes really are absent.
    """
    rng = np.random.default_rng([seed, 4242])
    table, vocab = manifest.attribute_table, manifest.vocab
    out: list[list[int]] = []
    for s in manifest.samples:
        caption = list(s.caption)
        if num_neg > 0:
            already = mentioned_attributes(s.caption, table)
            pool = sorted(s.annotation.negative_ids - already)
            if len(pool) < num_neg:
                raise ValueError(
                    f"sample {s.sample_id} lacks {num_neg} unmentioned absent attributes")
            chosen = rng.choice(pool, size=num_neg, replace=False)
            for attr in chosen:
                assert attr in s.annotation.negative_ids
                caption.extend(table.render(int(attr), positive=False))
        ids = vocab.encode(caption)
        if len(ids) > max_text_len - 2:
            raise ValueError("augmented caption exceeds the text length budget")
        out.append(ids)
    return out


def run_negative_descriptor_probe(checkpoint: str | Path,
                                  manifest: DatasetManifest,
                                  num_neg: int = 2, seed: int = 0,
                                  protocol: str = "all",
                                  scorer: str = "token") -> NegProbeResult:
    """Evaluate a checkpoint with and without appended negative descriptors."""
    params, _meta, _extra = load_params(checkpoint)
    baseline = evaluate(params, manifest, scorer=scorer, protocol=protocol)
    override = augment_captions_with_negatives(
        manifest, num_neg, seed, params.config.max_text_len)
    augmented = evaluate(params, manifest, scorer=scorer, protocol=protocol,
                         caption_ids_override=override)
    return NegProbeResult(baseline=baseline, augmented=augmented, num_neg=num_neg)
