"""Experiment configuration: an INI-style file parsed with :mod:`configparser`.

Sections and keys are closed sets; anything unknown is a :class:`ConfigError`.
Paths are resolved relative to the config file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import types
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .serialization import DEFAULT_CAPACITY, DEFAULT_P_DROP, Mode, SerializationConfig
from .synthetic import SyntheticSpec, spec_to_dict
from .training import TrainConfig

log = logging.getLogger(__name__)

VOCAB_SOURCES = ("train_kb", "train_mentions", "test_kb", "test_mentions")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    cross_kb: bool = True
    schema_aware: bool = False


@dataclass(frozen=True)
class DataSection:
    train_kb: str = ""
    train_kb_id: str = ""
    train_mentions: str = ""
    test_kb: str = ""
    test_kb_id: str = ""
    test_mentions: str = ""
    validation_fraction: float = 0.1
    validation_seed: int = 0
    top_attributes: int | None = None


@dataclass(frozen=True)
class SerializationSection:
    mode: str = Mode.ATTRIBUTE_SEPARATION.value
    shuffle: bool = True
    oov_drop_prob: float = DEFAULT_P_DROP
    max_tokens: int = 128
    registry_capacity: int = DEFAULT_CAPACITY
    candgen_mode: str = Mode.SEP_SEPARATION.value

    def for_rerank(self, rng_seed: int = 0) -> SerializationConfig:
        return SerializationConfig(Mode(self.mode), self.shuffle, self.oov_drop_prob, self.max_tokens, rng_seed)

    def for_candgen(self) -> SerializationConfig:
        return SerializationConfig(Mode(self.candgen_mode), False, 0.0, self.max_tokens)


@dataclass(frozen=True)
class EncoderSection:
    layers: int = 2
    hidden_size: int = 64
    heads: int = 4
    ffn_size: int | None = None
    max_positions: int = 256
    dropout: float = 0.0
    qk_tie_scale: float = 0.0
    share_towers: bool = False
    vocab: str | None = None  # plain vocab file; built from vocab_sources when absent
    vocab_sources: tuple[str, ...] = ("train_kb", "train_mentions")
    init_seed: int = 0

    def __post_init__(self):
        if min(self.layers, self.hidden_size, self.heads) < 1:
            raise ValueError("layers, hidden_size and heads must be positive")
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def spec_kwargs(self) -> dict:
        return dict(layers=self.layers, hidden_size=self.hidden_size, heads=self.heads, ffn_size=self.ffn_size,
                    max_positions=self.max_positions, dropout=self.dropout, qk_tie_scale=self.qk_tie_scale)


@dataclass(frozen=True)
class FinetuneSection:
    fractions: tuple[float, ...] = (0.25, 1.0)
    held_out_documents: int = 200
    target_mentions: str = ""  # mentions of the target KB with gold labels; defaults to test mentions
    held_out_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection
    data: DataSection
    serialization: SerializationSection
    encoder: EncoderSection
    rerank_encoder: EncoderSection
    candgen: TrainConfig
    rerank: TrainConfig
    finetune: TrainConfig | None = None
    finetune_plan: FinetuneSection | None = None
    synthetic: SyntheticSpec | None = None
    source: str = ""
    base_dir: str = "."

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_dir(self) -> Path:
        return self.path(self.experiment.output_dir)

    def to_dict(self) -> dict:
        d = {
            "experiment": asdict(self.experiment),
            "data": asdict(self.data),
            "serialization": asdict(self.serialization),
            "encoder": asdict(self.encoder),
            "encoder.rerank": asdict(self.rerank_encoder),
            "train.candgen": asdict(self.candgen),
            "train.rerank": asdict(self.rerank),
        }
        if self.finetune is not None:
            d["train.finetune"] = {**asdict(self.finetune), **asdict(self.finetune_plan)}
        if self.synthetic is not None:
            d["synthetic"] = spec_to_dict(self.synthetic)
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# --------------------------------------------------------------------------- coercion

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(raw: str, tp, where: str):
    tp, optional = _unwrap_optional(tp)
    text = raw.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            args = typing.get_args(tp)
            item = args[0]
            parts = text.replace(",", " ").split()
            values = tuple(_coerce(p, item, where) for p in parts)
            if args[-1] is not Ellipsis and len(values) != len(args):
                raise ValueError(f"expected {len(args)} values, got {len(values)}")
            return values
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")  # pragma: no cover


def _build(cls, section: dict[str, str], where: str, base=None, exclude=()):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {', '.join(unknown)}")
    values = {k: _coerce(v, hints[k], f"[{where}] {k}") for k, v in section.items()}
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"stage", "seeds"}
_SECTIONS = ("experiment", "data", "serialization", "encoder", "encoder.rerank", "train",
             "train.candgen", "train.rerank", "train.finetune", "synthetic")


def _train(stage: str, common: dict[str, str], own: dict[str, str], where: str) -> TrainConfig:
    unknown = sorted(set(own) - _TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {', '.join(unknown)}")
    return _build(TrainConfig, {**common, **own}, where, TrainConfig.defaults(stage), exclude=("stage", "seeds"))


def parse_overrides(items) -> dict[tuple[str, str], str]:
    """``section.key=value`` strings (the key is the text after the last dot)."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {item!r} lacks a section")
        section, key = lhs.rsplit(".", 1)
        out[(section.strip(), key.strip())] = value.strip()
    return out


def read_sections(text: str, source: str = "<string>") -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = {s: dict(parser[s]) for s in parser.sections()}
    unknown = sorted(set(sections) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(unknown)}")
    return sections


def apply_overrides(sections: dict[str, dict[str, str]], overrides: dict[tuple[str, str], str]) -> list[str]:
    """Fill keys the file leaves unset; on conflict the file value is kept and a warning is returned."""
    warnings = []
    for (section, key), value in overrides.items():
        if section not in _SECTIONS:
            raise ConfigError(f"override for unknown section [{section}]")
        current = sections.setdefault(section, {})
        if key in current and current[key].strip() != value:
            msg = f"--set {section}.{key}={value} ignored: config file sets {key} = {current[key].strip()}"
            warnings.append(msg)
            log.warning(msg)
        elif key not in current:
            current[key] = value
    return warnings


def config_from_sections(sections: dict[str, dict[str, str]], source: str = "", base_dir: str = ".") -> ExperimentConfig:
    experiment = _build(ExperimentSection, sections.get("experiment", {}), "experiment")
    data = _build(DataSection, sections.get("data", {}), "data")
    serialization = _build(SerializationSection, sections.get("serialization", {}), "serialization")
    for key in ("mode", "candgen_mode"):
        value = getattr(serialization, key)
        if value not in {m.value for m in Mode}:
            raise ConfigError(f"[serialization] {key}: unknown mode {value!r}")
    encoder = _build(EncoderSection, sections.get("encoder", {}), "encoder")
    bad = sorted(set(encoder.vocab_sources) - set(VOCAB_SOURCES))
    if bad:
        raise ConfigError(f"[encoder] vocab_sources: unknown source(s) {', '.join(bad)}")
    rerank_encoder = _build(EncoderSection, sections.get("encoder.rerank", {}), "encoder.rerank", encoder,
                            exclude=("vocab", "vocab_sources", "share_towers"))
    common = sections.get("train", {})
    candgen = _train("candgen", common, sections.get("train.candgen", {}), "train.candgen")
    rerank = _train("rerank", common, sections.get("train.rerank", {}), "train.rerank")
    finetune = plan = None
    if "train.finetune" in sections:
        own = dict(sections["train.finetune"])
        plan_keys = {f.name for f in fields(FinetuneSection)}
        plan = _build(FinetuneSection, {k: own.pop(k) for k in list(own) if k in plan_keys}, "train.finetune")
        finetune = _train("finetune", {}, own, "train.finetune")
        for f in plan.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"[train.finetune] fractions: {f} outside (0, 1]")
    synthetic = None
    if "synthetic" in sections:
        synthetic = _build(SyntheticSpec, sections["synthetic"], "synthetic")
        try:
            synthetic.validate()
        except ValueError as exc:
            raise ConfigError(f"[synthetic]: {exc}") from None
    if not 0 < data.validation_fraction < 1:
        raise ConfigError("[data] validation_fraction must lie in (0, 1)")
    if not experiment.seeds:
        raise ConfigError("[experiment] seeds must list at least one seed")
    if synthetic is None:
        missing = [k for k in ("train_kb", "train_kb_id", "train_mentions", "test_kb", "test_kb_id", "test_mentions")
                   if not getattr(data, k)]
        if missing:
            raise ConfigError(f"[data] missing required key(s) {', '.join(missing)} (or add a [synthetic] section)")
    elif data.train_kb or data.test_kb:
        raise ConfigError("[data] file paths and a [synthetic] section are mutually exclusive")
    return ExperimentConfig(experiment, data, serialization, encoder, rerank_encoder, candgen, rerank,
                            finetune, plan, synthetic, source, base_dir)


def load_config(path: str | Path, overrides=None) -> tuple[ExperimentConfig, list[str]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    sections = read_sections(text, str(path))
    warnings = apply_overrides(sections, parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    return config_from_sections(sections, str(path), str(path.parent)), warnings
