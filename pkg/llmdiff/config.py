import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass


@dataclass
class DataConfig:
    n_items: int = 10000
    image_size: int = 16
    cond_len: int = 16  # conditioning rows fed to cross-attention, <pad>-filled
    workers: int = 1


@dataclass
class LMConfigSection:
    hidden: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 32
    dtype: str = "f32"
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    log_every: int = 50


@dataclass
class DiffusionConfig:
    n_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: list = field(default_factory=lambda: [32, 64, 64])
    cond_dim: int = 64
    attn_heads: int = 4
    cond_drop_prob: float = 0.1
    guidance_weight: float = None
    dtype: str = "f32"
    steps: int = 15000
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    log_every: int = 100


@dataclass
class AdapterConfig:
    init_a2: float = 0.1
    steps: int = 8000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    log_every: int = 100


@dataclass
class EvalConfig:
    n_captions: int = 50
    images_per_caption: int = 10
    embed_dim: int = 64
    metric_steps: int = 2000
    metric_batch: int = 64
    metric_lr: float = 1e-3
    clf_steps: int = 3000
    clf_batch: int = 64
    clf_lr: float = 2e-3
    clf_holdout: int = 1000
    clf_min_accuracy: float = 0.95


@dataclass
class SeedConfig:
    data: int = 0
    lm: int = 1
    diffusion: int = 2
    adapter: int = 3
    eval: int = 4
    sample: int = 5
    metric: int = 6
    clf: int = 7
    log_wall_time: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    lm: LMConfigSection = field(default_factory=LMConfigSection)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def to_dict(self):
        return asdict(self)


def _build(cls, values, path):
    if not isinstance(values, dict):
        raise ValueError(f"Config section '{path or 'root'}' must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        dotted = ", ".join(f"{path}.{key}" if path else key for key in unknown)
        raise ValueError(f"Unknown config keys: {dotted}")
    kwargs = {}
    for name, value in values.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(values):
    return _build(RunConfig, values, "")


def load_config(filepath=None):
    """
    Load a RunConfig from a JSON file; missing keys keep their defaults.

    Args:
    - filepath: JSON config path, or None for the built-in defaults.
    """
    if filepath is None:
        return RunConfig()
    try:
        with open(filepath, "r") as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise RuntimeError(f"Failed to load config {filepath}: {e}")
    return config_from_dict(values)


def dump_config(config):
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def write_resolved_config(config, run_dir):
    """Echo the resolved config into the run directory as config.resolved.json."""
    path = os.path.join(run_dir, "config.resolved.json")
    with open(path, "w") as f:
        f.write(dump_config(config))
    return path
