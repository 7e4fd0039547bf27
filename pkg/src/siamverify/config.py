"""Run configuration and seed derivation.

One global seed reproduces a whole run. Each pipeline stage draws its own
seed from ``SeedSequence([global_seed, stream])`` where ``stream`` is the
fixed index below, so adding a stage never shifts the others.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataio import SyntheticSpec
from .encoder import EncoderConfig, HeadConfig
from .mining import MiningConfig
from .trainer import TrainConfig

STREAMS = {"synth": 0, "split": 1, "encoder": 2, "projection": 3, "train": 4, "trials": 5}


def derive_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(seed), STREAMS[stream]]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 10
    matched_per_fold: int = 300
    mismatched_per_fold: int = 300
    batch_size: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def seeded(self) -> "RunConfig":
        """Copy with every stage seed derived from the global seed."""
        return replace(
            self,
            synth=replace(self.synth, seed=derive_seed(self.seed, "synth")),
            encoder=replace(self.encoder, seed=derive_seed(self.seed, "encoder")),
            train=replace(self.train, seed=derive_seed(self.seed, "train")),
        )


_SECTIONS = {"synth": SyntheticSpec, "encoder": EncoderConfig, "head": HeadConfig,
             "mining": MiningConfig, "train": TrainConfig, "eval": EvalConfig}


def _update(obj, values: dict, section: str):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return replace(obj, **values)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file, then apply overrides.

    ``overrides`` maps section names to dicts of fields (or ``"seed"`` to an
    int). Overrides win over file values, which win over defaults.
    """
    cfg = RunConfig()
    layers = []
    if path is not None:
        layers.append(json.loads(Path(path).read_text(encoding="utf-8")))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key == "seed":
                cfg.seed = int(value)
            elif key in _SECTIONS:
                setattr(cfg, key, _update(getattr(cfg, key), value, key))
            else:
                raise ValueError(f"unknown config section {key!r}")
    return cfg
