"""Finite-difference verification harness for every loss component.

Runs each loss on a small random batch and compares its analytic
gradients against central differences on a seeded random subset of
coordinates per parameter tensor. Model dimensions are kept tiny so a
full sweep over seeds and batch sizes stays fast; the per-operation unit
tests cover exhaustive coordinate checks separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as losses_mod
from .attributes import build_vocabulary, default_attribute_table, extract_attributes, render_prompts
from .encoders import ModelConfig, init_params
from .gradcheck import check_gradients
from .losses import Batch, LossWeights
from .tensor import no_grad

__all__ = ["GradcheckReport", "run_gradcheck", "make_random_batch", "COMPONENTS"]

COMPONENTS = ("dts", "diac", "siam", "mapm", "mlm", "id")

_TINY = dict(dim=8, input_dim=4, max_text_len=16, heads=2)
_NUM_ATTRS = 3


@dataclass
class GradcheckReport:
    seed: int
    batch_size: int
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "tolerance": self.tolerance,
            "components": {
                name: {"max_rel_err": err, "pass": err <= self.tolerance}
                for name, err in self.errors.items()
            },
            "pass": self.passed,
        }


def make_random_batch(seed: int, batch_size: int):
    """Random batch plus freshly randomised tiny parameters.

    Patches draw from U[-1, 1]; captions assert or deny each attribute at
    random, so positive and negative prompt paths are always exercised.
    """
    table = default_attribute_table(_NUM_ATTRS)
    vocab = build_vocabulary(table)
    cfg = ModelConfig(vocab_size=len(vocab), num_identities=batch_size, **_TINY)
    rng = np.random.default_rng([seed, 314159])
    params = init_params(cfg, seed=seed)
    for t in params.tensors.values():
        t.data = rng.uniform(-0.5, 0.5, size=t.data.shape)

    n_v = _NUM_ATTRS
    captions, anns, prompts = [], [], []
    for _ in range(batch_size):
        polarity = rng.integers(0, 2, size=_NUM_ATTRS)
        # both prompt polarities must stay populated
        if polarity.all():
            polarity[rng.integers(0, _NUM_ATTRS)] = 0
        if not polarity.any():
            polarity[rng.integers(0, _NUM_ATTRS)] = 1
        clauses = [table.render(a, bool(polarity[a])) for a in range(_NUM_ATTRS)]
        order = rng.permutation(_NUM_ATTRS)
        words = [w for i in order for w in clauses[i]]
        ann = extract_attributes(words, table)
        captions.append(vocab.encode(words))
        anns.append(ann)
        prompts.append(render_prompts(ann, table, vocab))
    identities = rng.integers(0, batch_size, size=batch_size)
    batch = Batch.build(
        patch_features=rng.uniform(-1.0, 1.0, size=(batch_size, n_v, cfg.input_dim)),
        caption_ids=captions,
        identities=identities,
        prompt_sets=prompts,
        annotations=anns,
    )
    return batch, params


def _loss_callables(batch: Batch, w: LossWeights, mask_rate: float, seed: int):
    # resolved through the module so tests can monkeypatch a component
    return {
        "dts": lambda p: losses_mod.dts_loss(batch, p, w),
        "diac": lambda p: losses_mod.diac_loss(batch, p, w),
        "siam": lambda p: losses_mod.siam_loss(batch, p, w),
        "mapm": lambda p: losses_mod.mapm_loss(batch, p, mask_rate, seed),
        "mlm": lambda p: losses_mod.mlm_loss(batch, p, mask_rate, seed),
        "id": lambda p: losses_mod.id_loss(batch, p),
    }


def run_gradcheck(seed: int = 0, batch_size: int = 3,
                  probes_per_tensor: int = 6, h: float = 1e-5,
                  tolerance: float = 1e-3,
                  mask_rate: float = 0.3) -> GradcheckReport:
    """Check all six loss components at one (seed, batch size) setting."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batch, params = make_random_batch(seed, batch_size)
    w = LossWeights()
    arrays = params.arrays()
    probe_rng = np.random.default_rng([seed, 555])
    coords = {
        name: np.sort(probe_rng.choice(
            arr.size, size=min(probes_per_tensor, arr.size), replace=False))
        for name, arr in arrays.items()
    }
    errors: dict[str, float] = {}
    for name, fn in _loss_callables(batch, w, mask_rate, seed).items():
        analytic = fn(params).grads

        def value_of(_arrs, fn=fn):
            with no_grad():
                return fn(params).value

        errs = check_gradients(value_of, arrays, analytic, h=h, coords=coords)
        errors[name] = max(errs.values())
    return GradcheckReport(seed=seed, batch_size=batch_size, errors=errors,
                           tolerance=tolerance)
