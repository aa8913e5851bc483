"""Run configuration: one flat dataclass, one flat key=value file format.

Every tunable in the pipeline lives here so that checkpoints can embed a
complete snapshot and the CLI can override single values. The file format
is deliberately plain: one `key = value` pair per line, `#` comments,
blank lines ignored. Unknown keys are rejected rather than silently
dropped.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .labels import NUM_CLASSES

if TYPE_CHECKING:
    from .modeling import TokenEncoderConfig
    from .tokenizer import TokenizerConfig


class ConfigError(ValueError):
    """Malformed config text, unknown key, or inconsistent values."""


@dataclass(frozen=True)
class RunConfig:
    # --- image / tokenizer ---
    image_size: int = 32          # square input edge length
    channels: int = 3             # input channels
    enc_widths: tuple[int, ...] = (32, 64)  # encoder conv widths; one 2x downsample each
    codebook_size: int = 64       # N, number of codewords
    code_dim: int = 16            # D, codeword dimension
    beta: float = 0.25            # commitment weight in the tokenizer loss

    # --- token model ---
    d_model: int = 128            # transformer width
    depth: int = 4                # encoder blocks
    heads: int = 4                # attention heads
    mlp_ratio: int = 4            # feedforward expansion
    recon_depth: int = 2          # reconstruction decoder blocks

    # --- pretraining losses ---
    mask_ratio: float = 0.75      # fraction of tokens hidden during pretraining
    lambda_dist: float = 1.0      # weight of the embedding-distillation term
    lambda_contra: float = 1.0    # weight of the contrastive term
    temperature: float = 0.07     # contrastive softmax temperature
    teacher_dim: int = 32         # teacher embedding width

    # --- token selection ---
    k_min: int = 16               # lower bound for sampled K (variable-rate training)
    k_max: int = 64               # upper bound for sampled K
    fill_dropped: bool = False    # cloud: fill dropped slots with [C'] instead of shortening

    # --- data ---
    data_seed: int = 11           # dataset generator seed (test split uses data_seed + 1)
    train_count: int = 8000
    test_count: int = 2000

    # --- optimization ---
    seed: int = 0                 # model init / batch sampling seed
    batch_size: int = 32
    lr: float = 3e-4
    tokenizer_steps: int = 300
    pretrain_steps: int = 700
    finetune_steps: int = 500
    probe_steps: int = 400        # linear-probe classifier steps

    # --- transport ---
    transport: str = "queue"      # "queue" (in-process) or "socket" (localhost stream)
    host: str = "127.0.0.1"
    port: int = 0                 # 0 picks an ephemeral port

    # --- optional teacher embedding files (empty = built-in toy teacher) ---
    teacher_labels: str = ""      # path to a label-embedding file
    teacher_images: str = ""      # path to an image-embedding file

    def __post_init__(self):
        downsample = 2 ** len(self.enc_widths)
        if self.image_size % downsample != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by the "
                f"{downsample}x encoder downsample")
        if not (1 <= self.k_min <= self.k_max <= self.total_tokens):
            raise ConfigError(
                f"need 1 <= k_min <= k_max <= {self.total_tokens}, "
                f"got [{self.k_min}, {self.k_max}]")
        if self.transport not in ("queue", "socket"):
            raise ConfigError(f"transport must be queue or socket, got {self.transport!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0,1), got {self.mask_ratio}")

    # --- derived geometry ---
    @property
    def grid_size(self) -> int:
        return self.image_size // (2 ** len(self.enc_widths))

    @property
    def total_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES

    def tokenizer_config(self) -> "TokenizerConfig":
        # local import keeps the receiver-side process free of image code
        from .tokenizer import TokenizerConfig
        return TokenizerConfig(
            height=self.image_size, width=self.image_size,
            channels=self.channels, downsample=2 ** len(self.enc_widths),
            widths=self.enc_widths, codebook_size=self.codebook_size,
            code_dim=self.code_dim, beta=self.beta)

    def encoder_config(self) -> "TokenEncoderConfig":
        from .modeling import TokenEncoderConfig
        return TokenEncoderConfig(
            d_model=self.d_model, depth=self.depth, heads=self.heads,
            mlp_ratio=self.mlp_ratio, max_tokens=self.total_tokens,
            vocab=self.codebook_size)

    # --- serialization ---
    def to_text(self) -> str:
        lines = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{field.name} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    field = _FIELDS[key]
    base = RunConfig.__dataclass_fields__[key].default
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
        if field.type in ("bool", bool) or isinstance(base, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(base, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if isinstance(base, int) and not isinstance(base, bool):
            return int(raw)
        if isinstance(base, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat key=value text into a RunConfig, starting from ``base``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    if base is not None:
        merged = dataclasses.asdict(base)
        # asdict() deep-converts; restore the tuple field
        merged["enc_widths"] = base.enc_widths
        merged.update(values)
        values = merged
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text())
