"""Shared fixtures, including a session-scoped cache of trained runs.

The statistical acceptance criteria compare several trained variants
(full model, single-module ablations, paired ablations) across seeds.
Training is the expensive part, so every test that needs a trained run
goes through ``train_cache`` and identical (variant, seed) requests are
served from memory.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from equifuse import synthetic as syn
from equifuse import train as tr
from equifuse.config import default_config

EVAL_SAMPLES = 4000

VARIANTS = {
    "full": (),
    "no_disentangle": ("disentangle",),
    "no_enhance": ("enhance",),
    "no_energy": ("energy",),
    "no_trust": ("trust",),
    "no_energy_trust": ("energy", "trust"),
}


def acceptance_config(seed: int):
    return default_config(seed=seed)


def acceptance_spec(seed: int) -> syn.GeneratorSpec:
    return syn.default_spec(seed=seed)


class TrainedRuns:
    """Lazily trains and memoizes (variant, seed) runs on the default spec."""

    def __init__(self):
        self._runs = {}
        self._data = {}

    def data(self, seed: int):
        if seed not in self._data:
            spec = acceptance_spec(seed)
            cfg = acceptance_config(seed)
            train_b = syn.generate(spec, cfg.train.train_samples, partition="train")
            eval_b = syn.generate(spec, EVAL_SAMPLES, partition="eval")
            self._data[seed] = (spec, train_b, eval_b)
        return self._data[seed]

    def get(self, variant: str, seed: int) -> tr.TrainResult:
        key = (variant, seed)
        if key not in self._runs:
            spec, train_b, eval_b = self.data(seed)
            cfg = acceptance_config(seed)
            self._runs[key] = tr.train_full(
                cfg, train_b, eval_b, disable=VARIANTS[variant]
            )
        return self._runs[key]


@pytest.fixture(scope="session")
def trained_runs() -> TrainedRuns:
    return TrainedRuns()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Config small enough for wiring tests that still runs both stages."""
    cfg = default_config(seed=3)
    return replace(
        cfg,
        train=replace(
            cfg.train,
            stage1_epochs=2,
            stage2_epochs=2,
            train_samples=64,
            log_eval_samples=64,
        ),
    )


@pytest.fixture
def tiny_data():
    spec = syn.default_spec(seed=11)
    return spec, syn.generate(spec, 64, partition="train"), syn.generate(
        spec, 80, partition="eval"
    )
