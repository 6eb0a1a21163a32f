"""Flat `key = value` configuration files.

UTF-8 text, one setting per line, `#` starts a comment, no sections.  Keys
not consumed by any builder are reported as unknown, so typos fail loudly
instead of silently using a default.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .data import (
    CodecError,
    SynthConfig,
    gen_synthetic_pair,
    load_dataset,
)
from .losses import LossConfig
from .network import NetworkConfig, desk_config
from .matching import ShiftConvConfig
from .training import TrainConfig


class ConfigMap:
    """Parsed settings with per-key byte offsets for error messages."""

    def __init__(self, entries: dict):
        self._entries = entries  # key -> (value string, byte offset)
        self._used: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self._entries

    def _raw(self, key: str):
        self._used.add(key)
        return self._entries.get(key)

    def get_str(self, key: str, default=None):
        entry = self._raw(key)
        return default if entry is None else entry[0]

    def _coerce(self, key: str, kind: str, fn):
        entry = self._entries[key]
        try:
            return fn(entry[0])
        except ValueError:
            raise CodecError(
                f"config key {key!r} needs {kind}; got {entry[0]!r}", entry[1]
            ) from None

    def get_int(self, key: str, default: int) -> int:
        if self._raw(key) is None:
            return default
        return self._coerce(key, "an integer", lambda s: int(s, 10))

    def get_float(self, key: str, default: float) -> float:
        if self._raw(key) is None:
            return default
        return self._coerce(key, "a number", float)

    def get_bool(self, key: str, default: bool) -> bool:
        entry = self._raw(key)
        if entry is None:
            return default
        lowered = entry[0].lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise CodecError(
            f"config key {key!r} needs a boolean; got {entry[0]!r}", entry[1]
        )

    def get_int_tuple(self, key: str, default: tuple) -> tuple:
        if self._raw(key) is None:
            return tuple(default)
        return self._coerce(
            key, "comma-separated integers",
            lambda s: tuple(int(part.strip(), 10) for part in s.split(",")),
        )

    def touch(self, *keys):
        """Mark keys as consumed without reading them (for subcommands that
        legitimately ignore parts of a shared config file)."""
        self._used.update(keys)

    def ensure_consumed(self):
        unknown = sorted(set(self._entries) - self._used)
        if unknown:
            offset = min(self._entries[k][1] for k in unknown)
            raise CodecError(f"unknown config keys: {', '.join(unknown)}", offset)


def parse_config_text(text: str) -> ConfigMap:
    entries = {}
    offset = 0
    for raw_line in text.split("\n"):
        line = raw_line.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise CodecError(
                    f"expected 'key = value', got {line!r}", offset
                )
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not key:
                raise CodecError("empty config key", offset)
            if key in entries:
                raise CodecError(f"duplicate config key {key!r}", offset)
            entries[key] = (value, offset)
        offset += len(raw_line.encode("utf-8")) + 1
    return ConfigMap(entries)


def parse_config_file(path) -> ConfigMap:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    return parse_config_text(path.read_bytes().decode("utf-8"))


def network_config_from(cm: ConfigMap) -> NetworkConfig:
    base = desk_config()
    shift = ShiftConvConfig(
        maxdisp=cm.get_int("maxdisp", base.shift_cfg.maxdisp),
        clue_filters=cm.get_int("clue_filters", base.shift_cfg.clue_filters),
        variant=cm.get_str("variant", base.shift_cfg.variant),
        both_directions=cm.get_bool("both_directions",
                                    base.shift_cfg.both_directions),
    )
    return NetworkConfig(
        image_channels=cm.get_int("image_channels", base.image_channels),
        feat_channels=cm.get_int_tuple("feat_channels", base.feat_channels),
        redir_channels=cm.get_int("redir_channels", base.redir_channels),
        encode_channels=cm.get_int_tuple("encode_channels",
                                         base.encode_channels),
        decode_channels=cm.get_int_tuple("decode_channels",
                                         base.decode_channels),
        shift_cfg=shift,
        cost_volume=cm.get_str("cost_volume", base.cost_volume),
        refine_enabled=cm.get_bool("refine_enabled", base.refine_enabled),
        small_map_scale=cm.get_int("small_map_scale", base.small_map_scale),
    )


def train_config_from(cm: ConfigMap) -> TrainConfig:
    loss_defaults = LossConfig()
    loss = LossConfig(
        alpha1=cm.get_float("alpha1", loss_defaults.alpha1),
        alpha2=cm.get_float("alpha2", loss_defaults.alpha2),
        beta2=cm.get_float("beta2", loss_defaults.beta2),
    )
    defaults = TrainConfig()
    return TrainConfig(
        base_lr=cm.get_float("base_lr", defaults.base_lr),
        decay_start=cm.get_int("decay_start", defaults.decay_start),
        decay_period=cm.get_int("decay_period", defaults.decay_period),
        lr_floor=cm.get_float("lr_floor", defaults.lr_floor),
        stage1_iters=cm.get_int("stage1_iters", defaults.stage1_iters),
        stage2_iters=cm.get_int("stage2_iters", defaults.stage2_iters),
        batch_size=cm.get_int("batch_size", defaults.batch_size),
        seed=cm.get_int("seed", defaults.seed),
        log_interval=cm.get_int("log_interval", defaults.log_interval),
        checkpoint_interval=cm.get_int("checkpoint_interval",
                                       defaults.checkpoint_interval),
        loss=loss,
    )


_SYNTH_KEYS = ("synth_count", "synth_width", "synth_height",
               "synth_num_shapes", "synth_disp_min", "synth_disp_max",
               "synth_background_disp", "synth_seed", "synth_channels")

DATA_KEYS = ("data_root",) + _SYNTH_KEYS


def load_samples_from(cm: ConfigMap) -> list:
    """Samples from `data_root` if set, otherwise generated in memory."""
    root = cm.get_str("data_root")
    synth_given = [k for k in _SYNTH_KEYS if cm.has(k)]
    count = cm.get_int("synth_count", 4)
    synth = SynthConfig(
        width=cm.get_int("synth_width", 128),
        height=cm.get_int("synth_height", 64),
        num_shapes=cm.get_int("synth_num_shapes", 4),
        disp_min=cm.get_int("synth_disp_min", 1),
        disp_max=cm.get_int("synth_disp_max", 8),
        background_disp=cm.get_int("synth_background_disp", 2),
        seed=cm.get_int("synth_seed", 0),
        channels=cm.get_int("synth_channels", 1),
    )
    if root is not None:
        if synth_given:
            raise CodecError(
                f"config sets both data_root and {synth_given[0]}; "
                f"pick one data source", 0
            )
        return load_dataset(root)
    return [gen_synthetic_pair(replace(synth, seed=synth.seed + i))
            for i in range(count)]
