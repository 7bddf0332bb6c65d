"""Flat ``key = value`` run configuration.

Grammar: one assignment per line, ``#`` starts a comment, blank lines are
ignored.  Integer lists are written space- or comma-separated
(``enc_hidden = 64 64``); an empty value means an empty list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _int_tuple(value: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in value.replace(",", " ").split())


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "uvb"
    sigma: float = 1.0
    dz: int = 100
    enc_hidden: tuple[int, ...] = (200,)
    dec_hidden: tuple[int, ...] = (2000,)
    dec_readout: str = "logistic"
    # empty means: width matched to the UVB parameter count at deen_depth layers
    deen_hidden: tuple[int, ...] = ()
    deen_depth: int = 2
    k_samples: int = 1
    lr: float = 1e-4
    batch: int = 128
    epochs: int = 50
    seed: int = 0
    noise_draws: int = 1
    deterministic: bool = True
    threads: int = 1
    checkpoint_every: int = 0
    data: str = "gmm:corners"
    n_train: int = 4000
    n_test: int = 1000
    idx_images: str = ""
    idx_labels: str = ""
    max_images: int = 10000
    split_fraction: float = 0.8

    def __post_init__(self):
        checks = [
            ("model", self.model in ("uvb", "deen", "vae"), "must be one of uvb, deen, vae"),
            ("sigma", self.sigma > 0, "must be > 0"),
            ("dz", self.dz >= 1, "must be >= 1"),
            ("k_samples", self.k_samples >= 1, "must be >= 1"),
            ("lr", self.lr >= 0, "must be >= 0"),
            ("batch", self.batch >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 0, "must be >= 0"),
            ("noise_draws", self.noise_draws >= 1, "must be >= 1"),
            ("dec_readout", self.dec_readout in ("linear", "logistic"), "must be linear or logistic"),
            ("deen_depth", self.deen_depth >= 1, "must be >= 1"),
            ("threads", self.threads >= 1, "must be >= 1"),
            ("checkpoint_every", self.checkpoint_every >= 0, "must be >= 0"),
            ("split_fraction", 0 < self.split_fraction < 1, "must lie in (0, 1)"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg} (got {getattr(self, name)!r})")
        for name in ("enc_hidden", "dec_hidden", "deen_hidden"):
            if any(w < 1 for w in getattr(self, name)):
                raise ConfigError(name, "widths must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict[str, object]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            kind = types[key]
            try:
                if not isinstance(raw, str):
                    kwargs[key] = tuple(raw) if "tuple" in kind else raw
                elif "tuple" in kind:
                    kwargs[key] = _int_tuple(raw)
                elif kind == "bool":
                    kwargs[key] = _bool(raw)
                elif kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_text(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"
