"""Run configuration: stage presets and a strict sectioned key=value format.

Presets mirror the full-scale progressive schedule at toy extents: duration
grows first (1 -> 29 -> 125 frames), then resolution (24x24 -> 40x72);
fine-tuning drops the learning rate to 10% of pretraining.  Unknown config
keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError

PRESET_NAMES = ("vae-adapt", "stage1", "stage2", "stage3", "sft", "rlhf", "toy2d")


@dataclass
class RunConfig:
    preset: str = "toy2d"
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    optimizer: str = "adam"

    # data extents (video presets)
    frames: int = 29
    height: int = 24
    width: int = 24
    image_batch: int = 64
    video_batch: int = 32
    image_video_ratio: float = 2.0  # image:video sample-count mix
    n_items: int = 64

    # model
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    pe_mode: str = "APE"
    patch_t: int = 1
    patch_h: int = 1
    patch_w: int = 1
    cond_dim: int = 32

    # timestep sampler (training)
    t_kind: str = "logit-normal"
    logit_mean: float = 0.0
    logit_std: float = 1.0
    s_train: float = 1.0

    # inference sampling
    sample_steps: int = 50
    s_infer: float = 17.0
    cfg_scale: float = 1.0

    # toy2d experiment
    toy_batch: int = 256
    toy_hidden: int = 80
    toy_depth: int = 3
    eval_samples: int = 4000

    # fine-tuning / rlhf
    anchor_weight: float = 0.0
    rlhf_k: int = 4
    rlhf_n: int = 20
    rlhf_batch: int = 4
    reward_kind: str = "target-mean"
    reward_mu: float = 1.5
    frames_short: int = 29

    # vae-adaptation experiment
    adapt_pretrain_steps: int = 800
    adapt_steps: int = 1600
    adapt_checkpoints: tuple = (0, 200, 800, 1600)
    vae_seed_a: int = 1
    vae_seed_b: int = 2

    def __post_init__(self):
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESET_NAMES}")
        if self.lr < 0 or self.steps < 0:
            raise ConfigError("lr and steps must be nonnegative")

    def model_config(self):
        from ..dit import ModelConfig
        return ModelConfig(
            patch=(self.patch_t, self.patch_h, self.patch_w),
            layers=self.layers, heads=self.heads, head_dim=self.head_dim,
            ffn_dim=self.ffn_dim, pe_mode=self.pe_mode, cond_dim=self.cond_dim)

    def timestep_sampler(self):
        from ..flow import TimestepSampler
        return TimestepSampler(kind=self.t_kind, logit_mean=self.logit_mean,
                               logit_std=self.logit_std, train_shift=self.s_train)


PRESETS: dict[str, dict] = {
    # duration first, then resolution; LRs follow the full-scale schedule
    "vae-adapt": dict(frames=1, height=24, width=24, image_batch=64,
                      video_batch=0, lr=1e-4, steps=1600),
    "stage1": dict(frames=29, height=24, width=24, image_batch=64,
                   video_batch=32, lr=1e-4, steps=2000),
    "stage2": dict(frames=125, height=24, width=24, image_batch=64,
                   video_batch=8, lr=1e-4, steps=3000),
    "stage3": dict(frames=125, height=40, width=72, image_batch=32,
                   video_batch=4, lr=5e-5, steps=1500),
    "sft": dict(frames=125, height=40, width=72, image_batch=0,
                video_batch=4, lr=1e-5, steps=500, anchor_weight=0.1),
    "rlhf": dict(frames=29, height=24, width=24, lr=1e-4, steps=300,
                 rlhf_k=4, rlhf_n=20),
    "toy2d": dict(steps=2000, lr=1e-3, toy_batch=256, sample_steps=50,
                  s_infer=17.0),
}


def make_config(preset: str, **overrides) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESET_NAMES}")
    merged = dict(PRESETS[preset])
    merged.update(overrides)
    return RunConfig(preset=preset, **merged)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("tuple", tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config_file(path) -> RunConfig:
    """Sectioned key=value file; every key must be a RunConfig field."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            values[key] = _coerce(key, raw)
    preset = values.pop("preset", "toy2d")
    return make_config(preset, **values)


def preset_progression() -> list[tuple[str, int, int]]:
    """(preset, frames, pixels) rows for the pretraining stages in order."""
    rows = []
    for name in ("vae-adapt", "stage1", "stage2", "stage3"):
        p = PRESETS[name]
        rows.append((name, p["frames"], p["height"] * p["width"]))
    return rows
