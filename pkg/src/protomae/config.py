"""Run configuration: one flat dataclass, three named presets, text round-trip.

The config file format is deliberately plain: one ``key = value`` pair per
line, ``#`` comments, no sections.  Unknown keys are an error so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

_STRATEGIES = ("randm", "randbm", "csem")


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, flat and serialisable."""

    preset: str = "paper-default"
    seed: int = 0

    # geometry / tokens
    n_points: int = 1024
    n_patches: int = 64
    knn_k: int = 32
    dim: int = 384
    heads: int = 6
    encoder_blocks: int = 12
    decoder_blocks: int = 4
    mlp_ratio: float = 4.0
    embed_hidden1: int = 128
    embed_hidden2: int = 256

    # component semantic modelling
    n_prototypes: int = 8
    cont_temperature: float = 0.07
    knorm_k: int = 8
    knorm_enabled: bool = True

    # masking
    mask_ratio: float = 0.6
    mask_strategy: str = "csem"
    full_mask_components: int = 1

    # loss weights
    lambda_proto: float = 1.0
    lambda_cont: float = 1.0

    # optimisation
    learning_rate: float = 1e-3
    proto_learning_rate: float = 1e-3
    proto_lr_decay: float = 1.0   # factor reached at the last epoch, linear
    proto_weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 300
    batch_size: int = 32

    # data
    shape_kinds: str = "chair,plane,rocket,table"
    clouds_per_kind: int = 64

    # fine-tuning
    head_hidden: int = 256
    finetune_epochs: int = 50
    finetune_learning_rate: float = 5e-4
    stop_train_accuracy: float = 1.01   # > 1 disables early stop
    val_fraction: float = 0.2
    split_seed: int = 7

    # ------------------------------------------------------------------

    @property
    def recon_points(self) -> int:
        """Points reconstructed per token by the prototype-position head."""
        return max(1, round(self.n_points / self.n_patches))

    def kinds(self) -> list[str]:
        return [k for k in self.shape_kinds.split(",") if k]

    def validate(self) -> "RunConfig":
        c = self
        checks = [
            (c.n_points >= 64, "n_points must be >= 64"),
            (1 <= c.n_patches <= c.n_points, "n_patches must be in [1, n_points]"),
            (1 <= c.knn_k <= c.n_points, "knn_k must be in [1, n_points]"),
            (c.dim >= 2, "dim must be >= 2"),
            (c.heads >= 1 and c.dim % c.heads == 0, "heads must divide dim"),
            (c.encoder_blocks >= 1, "encoder_blocks must be >= 1"),
            (c.decoder_blocks >= 1, "decoder_blocks must be >= 1"),
            (c.embed_hidden1 >= 1 and c.embed_hidden2 >= 1, "embed widths must be positive"),
            (c.n_prototypes >= 2, "n_prototypes must be >= 2"),
            (c.cont_temperature > 0, "cont_temperature must be positive"),
            (1 <= c.knorm_k <= c.n_patches, "knorm_k must be in [1, n_patches]"),
            (0.0 < c.mask_ratio < 1.0, "mask_ratio must be in (0, 1)"),
            (c.mask_strategy in _STRATEGIES,
             f"mask_strategy must be one of {', '.join(_STRATEGIES)}"),
            (c.full_mask_components >= 0, "full_mask_components must be >= 0"),
            (c.learning_rate > 0, "learning_rate must be positive"),
            (c.proto_learning_rate > 0, "proto_learning_rate must be positive"),
            (0 < c.proto_lr_decay <= 1.0, "proto_lr_decay must be in (0, 1]"),
            (c.proto_weight_decay >= 0, "proto_weight_decay must be >= 0"),
            (0 <= c.beta1 < 1 and 0 <= c.beta2 < 1, "betas must be in [0, 1)"),
            (c.weight_decay >= 0, "weight_decay must be >= 0"),
            (c.epochs >= 1 and c.finetune_epochs >= 1, "epoch counts must be >= 1"),
            (c.batch_size >= 1, "batch_size must be >= 1"),
            (len(c.kinds()) >= 1, "shape_kinds must name at least one kind"),
            (c.clouds_per_kind >= 2, "clouds_per_kind must be >= 2"),
            (0.0 < c.val_fraction < 1.0, "val_fraction must be in (0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    # ------------------------------------------------------------------
    # text round-trip
    # ------------------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# run configuration"]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = f"{value:.17g}"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
            key, _, val = (part.strip() for part in line.partition("="))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown config key '{key}'")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate config key '{key}'")
            values[key] = _coerce(key, fields[key].type, val, lineno)
        base = preset(values["preset"]) if "preset" in values else cls()
        return dataclasses.replace(base, **values).validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        return cls.from_text(text)


def _coerce(key: str, type_name: str, val: str, lineno: int):
    try:
        if type_name == "int":
            return int(val)
        if type_name == "float":
            return float(val)
        if type_name == "bool":
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: '{val}'")
        return val
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_PRESETS: dict[str, dict] = {
    # full-size architecture; used for shape and contract checks, not trained
    # in the test suite
    "paper-default": {},
    # small enough to pretrain end to end on one desktop core in minutes
    "test-small": dict(
        n_points=256, n_patches=32, knn_k=8, dim=64, heads=4,
        encoder_blocks=2, decoder_blocks=1,
        embed_hidden1=32, embed_hidden2=64,
        n_prototypes=4, knorm_k=4,
        cont_temperature=0.005,
        proto_learning_rate=0.5, proto_lr_decay=0.02, proto_weight_decay=0.01,
        epochs=30, batch_size=8,
        clouds_per_kind=64,
        finetune_epochs=50, stop_train_accuracy=0.9,
    ),
    # tiny nets for finite-difference gradient checks
    "toy": dict(
        n_points=64, n_patches=8, knn_k=4, dim=16, heads=2,
        encoder_blocks=1, decoder_blocks=1,
        embed_hidden1=8, embed_hidden2=16,
        n_prototypes=4, knorm_k=3, mask_ratio=0.5,
        epochs=2, batch_size=4, head_hidden=16,
        clouds_per_kind=4, finetune_epochs=2,
    ),
}


def preset(name: str) -> RunConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset '{name}' (have {', '.join(sorted(_PRESETS))})")
    return RunConfig(preset=name, **_PRESETS[name]).validate()
