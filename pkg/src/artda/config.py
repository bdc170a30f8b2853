"""Flat ``key = value`` configuration files.

Training keys use the ``TrainConfig`` field names (``epochs``, ``lambda_c``,
...); dataset keys carry a ``data_`` prefix (``data_kind``, ``data_target``,
...).  Lists are comma separated, booleans are ``true``/``false``, ``#``
starts a comment.  Unknown or repeated keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DATA_PREFIX = "data_"

HELP = {
    "mode": "DA (unlabeled target used in training) or DG (sources only)",
    "strategy": "none, rnd-all, rnd-color, rnd-geo, adv-stn, adv-stn-color or a '+' combination",
    "epochs": "training epochs",
    "lr": "initial SGD learning rate",
    "lr_decay_at": "fraction of epochs after which lr drops to lr_final",
    "lr_final": "learning rate after the decay epoch",
    "batch_size": "samples per source batch (and per target batch in DA)",
    "n_aug": "random ops applied per image",
    "m_aug": "shared normalized magnitude in [0, 10]",
    "lambda_c": "weight of the random-augmentation consistency loss",
    "lambda_e": "weight of target entropy minimization (DA only)",
    "lambda_t": "weight of the adversarial spatial-transformer consistency loss",
    "seeds": "comma-separated run seeds; results are averaged",
    "weak_augment": "flip/shift/jitter the labeled source images",
    "dtype": "float32 or float64 training arithmetic",
    "data_kind": "synthetic or directory",
    "data_num_classes": "number of classes (synthetic)",
    "data_samples_per_class": "images per class per domain (synthetic)",
    "data_image_size": "square input side in pixels",
    "data_channels": "1 or 3",
    "data_domains": "domains to generate or load",
    "data_sources": "source domains",
    "data_target": "target domain",
    "data_root": "dataset root for kind=directory: root/<domain>/<class>/<image>",
    "data_train_fraction": "fraction of each source domain used for training",
    "data_seed": "dataset generation and split seed",
    "out": "output directory",
}


@dataclass
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    out: str = "runs/latest"

    def items(self) -> list[tuple[str, object]]:
        pairs = [(f.name, getattr(self.train, f.name)) for f in fields(self.train)]
        pairs += [(DATA_PREFIX + f.name, getattr(self.data, f.name)) for f in fields(self.data)]
        pairs.append(("out", self.out))
        return pairs

    def validate(self) -> None:
        try:
            self.train.validate()
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _defaults() -> dict[str, object]:
    return dict(CliConfig().items())


def keys() -> list[str]:
    return list(_defaults())


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of ``key``'s default."""
    default = _defaults()[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true or false, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(elem(t) for t in items)
        if default is None:
            return text or None
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    known = set(keys())
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


def build(values: dict[str, object], base: CliConfig | None = None) -> CliConfig:
    """Apply already-typed ``values`` on top of ``base`` (defaults if omitted)."""
    base = base or CliConfig()
    train_kw, data_kw, out = {}, {}, base.out
    train_names = {f.name for f in fields(TrainConfig)}
    for key, value in values.items():
        if key == "out":
            out = value
        elif key.startswith(DATA_PREFIX) and key[len(DATA_PREFIX):] in {f.name for f in fields(DatasetSpec)}:
            data_kw[key[len(DATA_PREFIX):]] = value
        elif key in train_names:
            train_kw[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    return CliConfig(replace(base.train, **train_kw), replace(base.data, **data_kw), out)


def load(path, overrides: dict[str, object] | None = None) -> CliConfig:
    """Read a config file, then apply typed command-line ``overrides``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = parse_lines(path.read_text().splitlines(), str(path))
    cfg = build({k: parse_value(k, v) for k, v in raw.items()})
    return build(overrides or {}, cfg)


def dumps(cfg: CliConfig) -> str:
    lines = ["# effective settings; pass back with --config to reproduce this run"]
    lines += [f"{k} = {format_value(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: CliConfig, directory) -> Path:
    path = Path(directory) / "config.resolved"
    path.write_text(dumps(cfg))
    return path
