"""Model configuration: the architecture description, the expert-spec
string, validation, parameter counting, and preset/config file IO.

The parameter-count oracle is analytic (no tensors are allocated), so it
works for configurations far larger than this machine could instantiate.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

PE_MODES = ("ape", "rope1d", "rope2d")

TIME_EMBED_DIM = 256  # sinusoidal feature width feeding the timestep MLP


class ConfigError(ValueError):
    """A configuration that fails validation."""


_SPEC_RE = re.compile(r"^S(\d+)E(\d+)A(\d+)$")


def parse_expert_spec(spec: str):
    """'S{shared}E{routed}A{active}' -> (n_shared, n_routed, n_active)."""
    m = _SPEC_RE.match(spec)
    if not m:
        raise ConfigError(f"malformed expert spec {spec!r} (want S<n>E<n>A<n>)")
    n_shared, n_routed, n_active = (int(g) for g in m.groups())
    if n_active > n_routed:
        raise ConfigError(
            f"expert spec {spec!r} activates {n_active} of {n_routed} experts")
    if n_active < 1:
        raise ConfigError(f"expert spec {spec!r} must activate at least one expert")
    return n_shared, n_routed, n_active


@dataclass
class ModelConfig:
    blocks: int
    hidden: int
    intermediate: int
    heads: int
    expert_spec: str = "S1E16A2"
    dense_intermediate: int | None = None  # None: dense FFNs reuse `intermediate`
    interleave: bool = True
    moe_parity: int = 0        # 0: blocks 0,2,4,... carry MoE; 1 flips
    pe_mode: str = "rope2d"
    gqa_kv_heads: int | None = None
    patch_size: int = 2
    in_channels: int = 4
    num_classes: int = 1000
    grid_h: int = 16
    grid_w: int = 16
    rope_base: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def n_kv_heads(self) -> int:
        return self.gqa_kv_heads if self.gqa_kv_heads else self.heads

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def image_h(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def image_w(self) -> int:
        return self.grid_w * self.patch_size

    @property
    def dense_width(self) -> int:
        return self.dense_intermediate or self.intermediate

    @property
    def null_class(self) -> int:
        return self.num_classes

    def expert_counts(self):
        return parse_expert_spec(self.expert_spec)

    def is_moe_block(self, index: int) -> bool:
        if not self.interleave:
            return True
        return index % 2 == self.moe_parity

    def moe_block_indices(self):
        return [i for i in range(self.blocks) if self.is_moe_block(i)]


def validate_config(config: ModelConfig) -> list:
    """Report-only check; returns a list of violation strings (empty: ok)."""
    problems = []
    for name in ("blocks", "hidden", "intermediate", "heads", "patch_size",
                 "in_channels", "grid_h", "grid_w"):
        if getattr(config, name) < 1:
            problems.append(f"{name} must be positive")
    if config.num_classes < 1:
        problems.append("num_classes must be positive")
    try:
        parse_expert_spec(config.expert_spec)
    except ConfigError as err:
        problems.append(str(err))
    if config.heads >= 1 and config.hidden % config.heads:
        problems.append(f"hidden {config.hidden} not divisible by heads {config.heads}")
    if config.pe_mode not in PE_MODES:
        problems.append(f"pe_mode {config.pe_mode!r} not in {PE_MODES}")
    if config.moe_parity not in (0, 1):
        problems.append(f"moe_parity must be 0 or 1, got {config.moe_parity}")
    if config.gqa_kv_heads is not None:
        if config.gqa_kv_heads < 1 or config.gqa_kv_heads > config.heads:
            problems.append(
                f"gqa_kv_heads {config.gqa_kv_heads} outside [1, heads={config.heads}]")
        elif config.heads % config.gqa_kv_heads:
            problems.append(
                f"heads {config.heads} not divisible by gqa_kv_heads {config.gqa_kv_heads}")
    if config.hidden % config.heads == 0:
        hd = config.head_dim
        if config.pe_mode == "rope2d" and hd % 4:
            problems.append(f"rope2d needs head_dim divisible by 4, got {hd}")
        if config.pe_mode == "rope1d" and hd % 2:
            problems.append(f"rope1d needs head_dim divisible by 2, got {hd}")
    if config.dense_intermediate is not None and config.dense_intermediate < 1:
        problems.append("dense_intermediate must be positive when set")
    return problems


def count_parameters(config: ModelConfig):
    """Analytic (total, activated) parameter counts.

    Activated counts swap the per-layer routed-expert population N_r for
    the per-token K_r; the router centroids stay fully counted because
    every token computes affinities against all of them.
    """
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    d = config.hidden
    n_shared, n_routed, n_active = config.expert_counts()
    hd = config.head_dim
    kv_width = config.n_kv_heads * hd

    attn = (d * d + d) * 2 + (d * kv_width + kv_width) * 2  # q,o + k,v with biases
    adaln = d * 6 * d + 6 * d

    def ffn(width):
        return 3 * d * width

    router = n_routed * d
    moe_total = (n_shared + n_routed) * ffn(config.intermediate) + router
    moe_active = (n_shared + n_active) * ffn(config.intermediate) + router

    n_moe = len(config.moe_block_indices())
    n_dense = config.blocks - n_moe
    per_block = attn + adaln

    patch_in = config.patch_size ** 2 * config.in_channels
    extras = (
        patch_in * d + d                              # patch embedding
        + (config.num_classes + 1) * d                # class table with null row
        + TIME_EMBED_DIM * d + d + d * d + d          # two-layer timestep MLP
        + d * 2 * d + 2 * d                           # final modulation
        + d * patch_in + patch_in                     # output head
    )
    if config.pe_mode == "ape":
        extras += config.n_tokens * d

    dense_params = n_dense * ffn(config.dense_width)
    total = extras + config.blocks * per_block + n_moe * moe_total + dense_params
    activated = extras + config.blocks * per_block + n_moe * moe_active + dense_params
    return total, activated


# Config files are JSON: {"name": ..., "model": {ModelConfig fields},
# "train": {TrainConfig fields, optional}}.

@dataclass
class ConfigFile:
    name: str
    model: ModelConfig
    train: dict = field(default_factory=dict)


_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}


def model_config_from_dict(raw: dict) -> ModelConfig:
    unknown = set(raw) - _MODEL_FIELDS
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    missing = {"blocks", "hidden", "intermediate", "heads"} - set(raw)
    if missing:
        raise ConfigError(f"missing model config keys: {sorted(missing)}")
    return ModelConfig(**raw)


def config_from_dict(raw: dict) -> ConfigFile:
    if "model" not in raw:
        raise ConfigError("config file needs a 'model' section")
    return ConfigFile(
        name=raw.get("name", ""),
        model=model_config_from_dict(raw["model"]),
        train=dict(raw.get("train", {})),
    )


def config_to_dict(cf: ConfigFile) -> dict:
    model = {k: v for k, v in asdict(cf.model).items() if v is not None}
    return {"name": cf.name, "model": model, "train": dict(cf.train)}


def load_config(path) -> ConfigFile:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"unparseable config {path}: {err}") from err
    return config_from_dict(raw)


def save_config(cf: ConfigFile, path):
    Path(path).write_text(json.dumps(config_to_dict(cf), indent=2, sort_keys=True) + "\n")


def preset_names() -> list:
    root = resources.files("ditmoe") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> ConfigFile:
    root = resources.files("ditmoe") / "presets"
    candidate = root / f"{name}.json"
    if not candidate.is_file():
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return config_from_dict(json.loads(candidate.read_text()))


def resolve_config(spec: str) -> ConfigFile:
    """Accept a literal path, a path missing its .json suffix, or a
    bundled preset name (a path prefix like presets/ is ignored)."""
    path = Path(spec)
    if path.is_file():
        return load_config(path)
    with_suffix = Path(str(spec) + ".json")
    if with_suffix.is_file():
        return load_config(with_suffix)
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    return load_preset(stem)
