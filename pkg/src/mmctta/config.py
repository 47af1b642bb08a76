"""Experiment configuration: an INI file read with :mod:`configparser`.

Sections: ``[world]``, ``[pretrain]``, ``[schedule]``, zero or more
``[segment.<name>]`` (used when ``schedule.preset = custom``, in file
order), ``[adapter]``, ``[run]`` and ``[ablate]``. Every key is optional;
``mmctta config --defaults`` prints the complete default file.
"""

from __future__ import annotations

import configparser
import math
import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, MethodVariant
from .errors import ConfigError
from .stream import SegmentSpec, WorldSpec, default_schedule, forgetting_schedule, make_world, shift_direction

OUT_ENV = "MMCTTA_OUT"


@dataclass(frozen=True)
class WorldParams:
    n_classes: int = 5
    dim_2d: int = 8
    dim_3d: int = 3
    noise: float = 0.4
    points_per_sample: int = 256
    scale_2d: float = 1.0
    offset_2d: float = 2.0
    scale_xy: float = 0.4
    scale_z: float = 2.0
    min_sep_2d: float = 1.5
    min_sep_3d: float = 1.5

    def build(self, seed: int) -> WorldSpec:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        return make_world(seed, **kw)


@dataclass(frozen=True)
class PretrainParams:
    n_samples: int = 100
    epochs: int = 30
    lr: float = 0.05


@dataclass(frozen=True)
class SegmentParams:
    """A segment as written in the config; ``bias_2d`` is a magnitude or a vector."""

    name: str
    length: int = 200
    bias_2d: float | tuple[float, ...] = 0.0
    noise_gain_2d: float = 0.0
    rotation_3d_deg: float = 0.0
    noise_gain_3d: float = 0.0
    dropout_3d: float = 0.0

    def build(self, world: WorldSpec) -> SegmentSpec:
        if isinstance(self.bias_2d, tuple):
            bias = np.asarray(self.bias_2d, dtype=float)
        else:
            bias = self.bias_2d * shift_direction(world) if self.bias_2d else None
        return SegmentSpec(
            self.name, self.length, bias, self.noise_gain_2d,
            math.radians(self.rotation_3d_deg), self.noise_gain_3d, self.dropout_3d,
        )


@dataclass(frozen=True)
class AblateParams:
    n_aug_2d: tuple[int, ...] = ()
    n_aug_3d: tuple[int, ...] = ()
    sweeps: tuple[tuple[str, tuple[float, ...]], ...] = ()
    metric: str = "miou"


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldParams = WorldParams()
    pretrain: PretrainParams = PretrainParams()
    preset: str = "default"
    segment_length: int = 200
    custom_segments: tuple[SegmentParams, ...] = ()
    adapter: AdapterConfig = AdapterConfig()
    seeds: tuple[int, ...] = (0,)
    variants: tuple[MethodVariant, ...] = (MethodVariant.COMAC,)
    output_dir: str = field(default_factory=lambda: os.environ.get(OUT_ENV, "results"))
    workers: int = 1
    trace: bool = True
    trace_centroids: bool = False
    ablate: AblateParams = AblateParams()

    def segments(self, world: WorldSpec) -> list[SegmentSpec]:
        if self.preset == "default":
            return default_schedule(world, self.segment_length)
        if self.preset == "forgetting":
            return forgetting_schedule(world, self.segment_length)
        return [s.build(world) for s in self.custom_segments]


SWEEPABLE = ("p_rs", "tau_cf", "lambda_cts", "lambda_s", "lr")

_TYPES = {
    "world": WorldParams,
    "pretrain": PretrainParams,
    "adapter": AdapterConfig,
}

_SEGMENT_KEYS = {"length", "bias_2d", "noise_gain_2d", "rotation_3d_deg", "noise_gain_3d", "dropout_3d"}
_SCHEDULE_KEYS = {"preset", "segment_length"}
_RUN_KEYS = {"seeds", "variants", "output_dir", "workers", "trace", "trace_centroids"}
_ABLATE_KEYS = {"n_aug_2d", "n_aug_3d", "metric"} | {f"sweep_{p}" for p in SWEEPABLE}


class _Locator:
    """Maps (section, key) to a 1-based line number in the source text."""

    def __init__(self, text: str, path: str):
        self.path = path
        self.sections: dict[str, int] = {}
        self.keys: dict[tuple[str, str], int] = {}
        current = None
        for i, line in enumerate(text.splitlines(), start=1):
            m = re.match(r"\s*\[([^\]]+)\]", line)
            if m:
                current = m.group(1).strip()
                self.sections[current] = i
                continue
            m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
            if m and current is not None:
                self.keys[(current, m.group(1).strip().lower())] = i

    def error(self, section: str, key: str | None, msg: str) -> ConfigError:
        line = self.keys.get((section, key)) if key else None
        if line is None:
            line = self.sections.get(section, 0)
        where = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{self.path}:{line}: {where}: {msg}")


def _parse_scalar(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _parse_list(raw: str, kind) -> tuple:
    parts = [p for p in re.split(r"[,\s]+", raw.strip()) if p]
    return tuple(_parse_scalar(p, kind) for p in parts)


def _field_kind(cls, name: str):
    for f in fields(cls):
        if f.name == name:
            t = str(f.type)
            if t.startswith("tuple"):
                return ("list", float)
            if "bool" in t:
                return bool
            if "int" in t and "float" not in t:
                return int
            if "float" in t:
                return float
            return str
    return None


def _load_typed(section: str, cls, items: dict[str, str], loc: _Locator, base):
    updates = {}
    for key, raw in items.items():
        kind = _field_kind(cls, key)
        if kind is None:
            raise loc.error(section, key, "unknown key")
        try:
            if isinstance(kind, tuple):
                updates[key] = _parse_list(raw, kind[1])
            elif key == "variant":
                updates[key] = MethodVariant(raw.strip())
            else:
                updates[key] = _parse_scalar(raw, kind)
        except ValueError as exc:
            raise loc.error(section, key, str(exc)) from None
    try:
        return replace(base, **updates)
    except ConfigError as exc:
        key = next((k for k in updates if k in str(exc)), None)
        raise loc.error(section, key, str(exc)) from None


def loads(text: str, path: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    loc = _Locator(text, path)
    cfg = ExperimentConfig()
    segments = []

    for section in parser.sections():
        items = dict(parser.items(section))
        if section in _TYPES:
            setattr_name = section
            typed = _load_typed(section, _TYPES[section], items, loc, getattr(cfg, setattr_name))
            cfg = replace(cfg, **{setattr_name: typed})
        elif section == "schedule":
            for key, raw in items.items():
                if key not in _SCHEDULE_KEYS:
                    raise loc.error(section, key, "unknown key")
            preset = items.get("preset", cfg.preset).strip()
            if preset not in ("default", "forgetting", "custom"):
                raise loc.error(section, "preset", f"must be default, forgetting or custom, got {preset!r}")
            try:
                length = int(items.get("segment_length", cfg.segment_length))
            except ValueError as exc:
                raise loc.error(section, "segment_length", str(exc)) from None
            if length < 1:
                raise loc.error(section, "segment_length", "must be >= 1")
            cfg = replace(cfg, preset=preset, segment_length=length)
        elif section.startswith("segment."):
            segments.append(_load_segment(section, items, loc))
        elif section == "run":
            cfg = _load_run(cfg, items, loc)
        elif section == "ablate":
            cfg = replace(cfg, ablate=_load_ablate(items, loc))
        else:
            raise loc.error(section, None, "unknown section")

    if segments:
        cfg = replace(cfg, custom_segments=tuple(segments))
    if cfg.preset == "custom" and not cfg.custom_segments:
        raise loc.error("schedule", "preset", "custom preset needs at least one [segment.<name>] section")
    return cfg


def _load_segment(section: str, items: dict[str, str], loc: _Locator) -> SegmentParams:
    name = section.split(".", 1)[1]
    kw: dict = {}
    for key, raw in items.items():
        if key not in _SEGMENT_KEYS:
            raise loc.error(section, key, "unknown key")
        try:
            if key == "bias_2d":
                vals = _parse_list(raw, float)
                kw[key] = vals[0] if len(vals) == 1 else vals
            elif key == "length":
                kw[key] = int(raw)
            else:
                kw[key] = float(raw)
        except ValueError as exc:
            raise loc.error(section, key, str(exc)) from None
    seg = SegmentParams(name, **kw)
    if seg.length < 1:
        raise loc.error(section, "length", "must be >= 1")
    if not 0.0 <= seg.dropout_3d < 1.0:
        raise loc.error(section, "dropout_3d", "must lie in [0, 1)")
    if seg.noise_gain_2d < 0:
        raise loc.error(section, "noise_gain_2d", "must be >= 0")
    if seg.noise_gain_3d < 0:
        raise loc.error(section, "noise_gain_3d", "must be >= 0")
    return seg


def _load_run(cfg: ExperimentConfig, items: dict[str, str], loc: _Locator) -> ExperimentConfig:
    kw: dict = {}
    for key, raw in items.items():
        if key not in _RUN_KEYS:
            raise loc.error("run", key, "unknown key")
        try:
            if key == "seeds":
                kw[key] = _parse_list(raw, int)
                if not kw[key]:
                    raise ValueError("need at least one seed")
            elif key == "variants":
                kw[key] = tuple(MethodVariant(v) for v in _parse_list(raw, str))
                if not kw[key]:
                    raise ValueError("need at least one variant")
            elif key == "workers":
                kw[key] = int(raw)
                if kw[key] < 1:
                    raise ValueError("workers must be >= 1")
            elif key in ("trace", "trace_centroids"):
                kw[key] = _parse_scalar(raw, bool)
            else:
                kw[key] = raw.strip()
        except ValueError as exc:
            raise loc.error("run", key, str(exc)) from None
    return replace(cfg, **kw)


def _load_ablate(items: dict[str, str], loc: _Locator) -> AblateParams:
    kw: dict = {}
    sweeps = []
    for key, raw in items.items():
        if key not in _ABLATE_KEYS:
            raise loc.error("ablate", key, "unknown key")
        try:
            if key in ("n_aug_2d", "n_aug_3d"):
                vals = _parse_list(raw, int)
                if not vals:
                    raise ValueError("empty axis")
                if min(vals) < 0:
                    raise ValueError("augmentation counts must be >= 0")
                kw[key] = vals
            elif key == "metric":
                if raw.strip() not in ("miou", "accuracy"):
                    raise ValueError("metric must be miou or accuracy")
                kw[key] = raw.strip()
            else:
                vals = _parse_list(raw, float)
                if not vals:
                    raise ValueError("empty axis")
                sweeps.append((key[len("sweep_"):], vals))
        except ValueError as exc:
            raise loc.error("ablate", key, str(exc)) from None
    if ("n_aug_2d" in kw) != ("n_aug_3d" in kw):
        missing = "n_aug_3d" if "n_aug_2d" in kw else "n_aug_2d"
        raise loc.error("ablate", None, f"augmentation grid needs both axes; {missing} is missing")
    return AblateParams(sweeps=tuple(sweeps), **kw)


def load(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config: {exc.strerror}") from None
    return loads(text, str(p))


def _fmt(v) -> str:
    if isinstance(v, enum_types()):
        return v.value
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def enum_types():
    return (MethodVariant,)


def dumps(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as a complete INI file that :func:`loads` reads back."""
    out = []
    for section, obj in (("world", cfg.world), ("pretrain", cfg.pretrain)):
        out.append(f"[{section}]")
        out.extend(f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj))
        out.append("")
    out += ["[schedule]", "# default | forgetting | custom ([segment.<name>] sections, in order)",
            f"preset = {cfg.preset}", f"segment_length = {cfg.segment_length}", ""]
    for seg in cfg.custom_segments:
        out.append(f"[segment.{seg.name}]")
        out.extend(f"{f.name} = {_fmt(getattr(seg, f.name))}" for f in fields(seg) if f.name != "name")
        out.append("")
    out.append("[adapter]")
    out.extend(f"{f.name} = {_fmt(getattr(cfg.adapter, f.name))}" for f in fields(cfg.adapter))
    out.append("")
    out += ["[run]", f"seeds = {_fmt(cfg.seeds)}", f"variants = {_fmt(cfg.variants)}",
            f"output_dir = {cfg.output_dir}", f"workers = {cfg.workers}", f"trace = {_fmt(cfg.trace)}",
            f"trace_centroids = {_fmt(cfg.trace_centroids)}", ""]
    ab = cfg.ablate
    out.append("[ablate]")
    if ab.n_aug_2d:
        out.append(f"n_aug_2d = {_fmt(ab.n_aug_2d)}")
        out.append(f"n_aug_3d = {_fmt(ab.n_aug_3d)}")
    for name, vals in ab.sweeps:
        out.append(f"sweep_{name} = {_fmt(vals)}")
    out.append(f"metric = {ab.metric}")
    return "\n".join(out) + "\n"
