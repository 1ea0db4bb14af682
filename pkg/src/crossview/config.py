"""Flat key=value configuration files with dotted section prefixes.

Example::

    synth.n_pairs=2000
    sampler.picks_per_anchor=64
    train.epochs=40
    loss.label_smoothing=0.1

Unknown keys are errors; an empty file yields every default. Overrides
(``key=value`` strings) are applied after the file.
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

from .datasets import SynthConfig
from .errors import ValidationError
from .geo import GeoConfig
from .losses import LossConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig


class ConfigBundle(NamedTuple):
    synth: SynthConfig
    sampler: SamplerConfig
    train: TrainConfig
    geo: GeoConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section, field name, parser)
_SCHEMA: dict[str, tuple[str, str, type | callable]] = {
    "synth.n_pairs": ("synth", "n_pairs", int),
    "synth.latent_dim": ("synth", "latent_dim", int),
    "synth.view_dim": ("synth", "view_dim", int),
    "synth.noise_sigma": ("synth", "noise_sigma", float),
    "synth.map_extent_m": ("synth", "map_extent_m", float),
    "synth.n_semi_positives": ("synth", "n_semi_positives", int),
    "synth.region_grid": ("synth", "region_grid", int),
    "synth.region_within": ("synth", "region_within", float),
    "synth.seed": ("synth", "seed", int),
    "sampler.batch_size": ("sampler", "batch_size", int),
    "sampler.pool_size": ("sampler", "pool_size", int),
    "sampler.picks_per_anchor": ("sampler", "picks_per_anchor", int),
    "sampler.refresh_every": ("sampler", "refresh_every", int),
    "sampler.gps_epochs": ("sampler", "gps_epochs", int),
    "sampler.strategy": ("sampler", "strategy", str),
    "sampler.seed": ("sampler", "seed", int),
    "train.epochs": ("train", "epochs", int),
    "train.lr_max": ("train", "lr_max", float),
    "train.warmup_epochs": ("train", "warmup_epochs", int),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.eps": ("train", "eps", float),
    "train.hidden_dim": ("train", "hidden_dim", int),
    "train.embed_dim": ("train", "embed_dim", int),
    "train.shared_weights": ("train", "shared_weights", _parse_bool),
    "train.loss_kind": ("train", "loss_kind", str),
    "train.seed": ("train", "seed", int),
    "loss.label_smoothing": ("loss", "label_smoothing", float),
    "loss.logit_scale": ("loss", "logit_scale", float),
    "loss.logit_scale_max": ("loss", "logit_scale_max", float),
    "loss.direction": ("loss", "direction", str),
    "loss.triplet_margin": ("loss", "triplet_margin", float),
    "geo.earth_radius_m": ("geo", "earth_radius_m", float),
}


def _parse_line(line: str, where: str, sections: dict[str, dict]) -> None:
    if "=" not in line:
        raise ValidationError(f"{where}: expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    key = key.strip()
    value = value.strip()
    if key not in _SCHEMA:
        raise ValidationError(f"{where}: unknown key {key!r}")
    section, name, parser = _SCHEMA[key]
    try:
        sections[section][name] = parser(value)
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{where}: bad value for {key!r}: {exc}") from exc


def parse_config(path: str | Path | None, overrides: list[str] = ()) -> ConfigBundle:
    """Read a config file (optional) and apply overrides last."""
    sections: dict[str, dict] = {"synth": {}, "sampler": {}, "train": {}, "loss": {}, "geo": {}}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            _parse_line(line, f"{path}:{lineno}", sections)
    for i, override in enumerate(overrides, start=1):
        _parse_line(override.strip(), f"override {i} ({override!r})", sections)

    synth = SynthConfig(**sections["synth"])
    sampler = SamplerConfig(**sections["sampler"])
    loss = LossConfig(**sections["loss"])
    train = TrainConfig(loss=loss, sampler=sampler, **sections["train"])
    geo = GeoConfig(**sections["geo"])
    return ConfigBundle(synth=synth, sampler=sampler, train=train, geo=geo)


def serialize_config(bundle: ConfigBundle) -> str:
    """Emit every key as key=value lines; parse(serialize(x)) == x."""
    values = {}
    for key, (section, name, _) in _SCHEMA.items():
        source = {
            "synth": bundle.synth,
            "sampler": bundle.sampler,
            "train": bundle.train,
            "loss": bundle.train.loss,
            "geo": bundle.geo,
        }[section]
        value = getattr(source, name)
        if isinstance(value, bool):
            values[key] = "true" if value else "false"
        elif isinstance(value, float):
            values[key] = repr(value)
        else:
            values[key] = str(value)
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))
