"""Model and run configuration.

Run configs are UTF-8 text files of ``key = value`` lines; ``#`` starts a
comment. Unknown keys are rejected with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    img_size: int = 64
    patch_size: int = 4
    in_channels: int = 3
    stage_widths: tuple[int, ...] = (96, 192, 384, 768)
    stage_depths: tuple[int, ...] = (2, 2, 6, 2)
    heads_per_stage: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 4
    effn_ratio: int = 4
    num_classes: int = 2
    use_effn: bool = True
    use_mff_decoder: bool = True
    dspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    head_upsample: str = "expand"

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = len(self.stage_widths)
        if n != 4 or len(self.stage_depths) != 4 or len(self.heads_per_stage) != 4:
            raise ConfigError("widths, depths and heads need exactly four stages")
        if self.img_size % (self.patch_size * 2 ** (n - 1)):
            raise ConfigError(
                f"img_size {self.img_size} not divisible by patch_size * 2^3 = "
                f"{self.patch_size * 2 ** (n - 1)}"
            )
        for a, b in zip(self.stage_widths, self.stage_widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage widths must double per stage, got {self.stage_widths}")
        for w, h in zip(self.stage_widths, self.heads_per_stage):
            if h < 1 or w % h:
                raise ConfigError(f"width {w} not divisible by {h} heads")
        for d in self.stage_depths:
            if d < 2 or d % 2:
                raise ConfigError(f"stage depths must be positive and even, got {self.stage_depths}")
        if self.window_size < 1 or self.effn_ratio < 1 or self.num_classes < 2:
            raise ConfigError("window_size, effn_ratio must be >= 1 and num_classes >= 2")
        if any(r < 1 for r in self.dspp_rates) or not self.dspp_rates:
            raise ConfigError(f"dilation rates must be >= 1, got {self.dspp_rates}")
        if self.head_upsample not in ("expand", "bilinear"):
            raise ConfigError(f"head_upsample must be expand or bilinear, got {self.head_upsample!r}")

    @property
    def token_side(self) -> int:
        return self.img_size // self.patch_size

    def stage_resolutions(self) -> list[int]:
        return [self.token_side // 2 ** i for i in range(4)]

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def micro_config(**changes) -> ModelConfig:
    """32x32 input, window 2, tiny widths: the configuration used for full-model gradient checks."""
    base = ModelConfig(
        img_size=32,
        stage_widths=(4, 8, 16, 32),
        stage_depths=(2, 2, 2, 2),
        heads_per_stage=(1, 2, 2, 4),
        window_size=2,
        effn_ratio=2,
        num_classes=3,
    )
    return replace(base, **changes)


# ---------------------------------------------------------------------------
# run configuration files

TASKS = ("train", "eval", "gradcheck", "synth")


@dataclass
class RunConfig:
    task: str = "train"
    img_size: int = 64
    patch_size: int = 4
    in_channels: int = 3
    widths: tuple[int, ...] = (96, 192, 384, 768)
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 4
    effn_ratio: int = 4
    num_classes: int = 3
    dspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    head_upsample: str = "expand"
    decoder: str = "mff"
    encoder_ffn: str = "effn"
    seeds: tuple[int, ...] = (3407, 8261, 10993)
    lr: float = 1e-2
    lr_min: float = 6e-6
    momentum: float = 0.98
    weight_decay: float = 1e-6
    batch_size: int = 4
    total_steps: int = 500
    eval_every: int = 0
    augment: bool = True
    grad_clip: float = 0.0
    num_samples: int = 8
    data_seed: int = 0
    min_tumors: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            img_size=self.img_size,
            patch_size=self.patch_size,
            in_channels=self.in_channels,
            stage_widths=tuple(self.widths),
            stage_depths=tuple(self.depths),
            heads_per_stage=tuple(self.heads),
            window_size=self.window_size,
            effn_ratio=self.effn_ratio,
            num_classes=self.num_classes,
            use_effn=self.encoder_ffn == "effn",
            use_mff_decoder=self.decoder == "mff",
            dspp_rates=tuple(self.dspp_rates),
            head_upsample=self.head_upsample,
        )

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if self.decoder not in ("mff", "plain"):
            raise ConfigError(f"decoder must be mff or plain, got {self.decoder!r}")
        if self.encoder_ffn not in ("effn", "ffn"):
            raise ConfigError(f"encoder_ffn must be effn or ffn, got {self.encoder_ffn!r}")
        if self.batch_size < 1 or self.total_steps < 1 or not self.seeds:
            raise ConfigError("batch_size and total_steps must be positive and seeds non-empty")
        if self.lr < 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 <= lr_min <= lr")
        self.model_config()

    def render(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def _parse_value(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is tuple:
        return tuple(int(p) for p in raw.split(",") if p.strip())
    return kind(raw)


_KINDS = {
    f.name: (tuple if isinstance(f.default, tuple) else type(f.default)) for f in fields(RunConfig)
}


def parse_run_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KINDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(_KINDS[key], raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))
