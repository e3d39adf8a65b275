"""Run configuration: JSON files, the two shipped presets, cross-field checks."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .lm import LMConfig, LoRAConfig
from .mae import PAPER_VIT, ConfigError, ViT3DConfig
from .perceiver import PerceiverSpec, check_grid
from .volume import PAPER_PREPROCESS, PreprocessConfig


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    # MAE pretraining
    mae_steps: int = 600
    mae_lr: float = 1.5e-4
    mae_decay: float = 0.95
    # text-only warm start of the base LM
    lm_epochs: int = 6
    lm_lr: float = 1e-3
    lm_noise: float = 0.1
    lm_scale: tuple = (0.5, 4.0)
    # supervised fine-tuning
    stage1_lr: float = 1e-3
    stage1_epochs: int = 4
    stage2_lr: float = 5e-4
    stage2_epochs: int = 3
    sft_weight_decay: float = 0.3
    error_budget: int = 0
    max_new_tokens: int = 64


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    out: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    vit: ViT3DConfig = field(default_factory=ViT3DConfig)
    perceiver: PerceiverSpec = field(default_factory=PerceiverSpec)
    lm: LMConfig = field(default_factory=LMConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        validate(self)

    @property
    def prefix_len(self) -> int:
        return check_grid(self.vit.grid, self.perceiver.k).n_tokens

    def to_dict(self):
        return {f.name: _plain(asdict(getattr(self, f.name))) for f in fields(self)}

    @property
    def hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()[:16]


_SECTIONS = {"preprocess": PreprocessConfig, "vit": ViT3DConfig, "perceiver": PerceiverSpec,
             "lm": LMConfig, "lora": LoRAConfig, "train": TrainConfig, "paths": PathsConfig}


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def validate(cfg: RunConfig) -> None:
    """Cross-field consistency; raises ConfigError naming the fields involved."""
    if tuple(cfg.preprocess.target_dims) != tuple(cfg.vit.input_dims):
        raise ConfigError(f"preprocess.target_dims {tuple(cfg.preprocess.target_dims)} != "
                          f"vit.input_dims {tuple(cfg.vit.input_dims)}")
    for n, p in zip(cfg.vit.input_dims, cfg.vit.patch_size):
        if n % p:
            raise ConfigError(f"vit.patch_size {tuple(cfg.vit.patch_size)} does not divide "
                              f"vit.input_dims {tuple(cfg.vit.input_dims)}")
    grid = cfg.vit.grid
    if any(n % cfg.perceiver.k for n in grid.dims):
        raise ConfigError(f"perceiver.k={cfg.perceiver.k} does not divide the token grid {grid.dims}")
    if cfg.perceiver.out_channels != cfg.lm.d_model:
        raise ConfigError(f"perceiver.out_channels {cfg.perceiver.out_channels} != lm.d_model {cfg.lm.d_model}")
    cfg.lm.check_prefix(check_grid(grid, cfg.perceiver.k).n_tokens)


# soft-tissue window: the phantom lesions all sit inside it
TOY = RunConfig(preprocess=PreprocessConfig(hu_window=(-160.0, 240.0)))

# shape audit only by default: training this size is far outside a CPU budget
PAPER_SCALE = RunConfig(
    preprocess=PAPER_PREPROCESS,
    vit=PAPER_VIT,
    perceiver=PerceiverSpec(kind="conv3d", k=2, out_channels=4096),
    lm=LMConfig(d_model=4096, layers=32, heads=32, max_seq_len=768, ff=4),
    train=TrainConfig(batch_size=8, lm_epochs=3, lm_noise=0.0, lm_scale=(1.0, 1.0), stage1_lr=1e-4, stage2_lr=5e-5,
                      stage1_epochs=1, stage2_epochs=1, sft_weight_decay=0.0),
)

PRESETS = {"toy": TOY, "paper-scale": PAPER_SCALE}


def _section(cls, base, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {unknown}")
    vals = {}
    for k, v in data.items():
        vals[k] = tuple(v) if isinstance(v, list) else v
    try:
        return replace(base, **vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(data: dict, base: RunConfig = TOY) -> RunConfig:
    """Overlay ``data`` on ``base``; missing keys keep the base values."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    if "preset" in data:
        name = data["preset"]
        if name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        base = PRESETS[name]
    unknown = sorted(set(data) - set(_SECTIONS) - {"preset"})
    if unknown:
        raise ConfigError(f"config: unknown sections {unknown}")
    parts = {name: _section(cls, getattr(base, name), data[name], name)
             for name, cls in _SECTIONS.items() if name in data}
    try:
        return replace(base, **parts)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(source: str | None) -> RunConfig:
    """``source`` is a preset name, a JSON file path, or None (toy preset).

    ``VOLVLM_DATA`` / ``VOLVLM_OUT`` override the data and output paths.
    """
    if source is None:
        cfg = TOY
    elif source in PRESETS:
        cfg = PRESETS[source]
    else:
        try:
            data = json.loads(Path(source).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {source}: malformed JSON at line {exc.lineno}") from exc
        cfg = from_dict(data)
    env = {k: os.environ[v] for k, v in (("data", "VOLVLM_DATA"), ("out", "VOLVLM_OUT")) if v in os.environ}
    if env:
        cfg = replace(cfg, paths=replace(cfg.paths, **env))
    return cfg
