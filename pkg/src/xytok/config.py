"""Sectioned ``key = value`` run configuration.

Every section maps onto one config dataclass; keys must be fields of that
dataclass. Resolution order is flag > file > dataclass default.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .model import AdapterConfig, CodecConfig, DecoderConfig, DiscriminatorConfig, EncoderConfig
from .probing import ProbeConfig
from .rvq import RVQConfig
from .losses import PosttrainWeights, PretrainWeights
from .training import PosttrainConfig, PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    n_train: int = 800
    n_dev: int = 100
    n_test: int = 100
    n_speakers: int = 8
    sample_rate: int = 16000
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    rvq: RVQConfig = field(default_factory=lambda: RVQConfig(codebook_size=64))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    codec: dict = field(default_factory=lambda: {"bypass_quantizer": False})
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    posttrain: PosttrainConfig = field(default_factory=PosttrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0

    def codec_config(self) -> CodecConfig:
        return CodecConfig(sample_rate=self.data.sample_rate, encoder=self.encoder, adapter=self.adapter,
                           rvq=self.rvq, decoder=self.decoder, discriminator=self.discriminator,
                           bypass_quantizer=bool(self.codec["bypass_quantizer"]), seed=self.seed)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), sort_keys=True))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# Loss weights are nested dataclasses; they are exposed as flat prefixed keys.
_WEIGHT_SECTIONS = {"pretrain": PretrainWeights, "posttrain": PosttrainWeights}


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    where = f"[{section}] {key}"
    if section == "run":
        if key != "seed":
            raise ConfigError(f"unknown key {where}")
        return replace(cfg, seed=_parse_value(raw, 0, where))
    if key == "seed":
        raise ConfigError(f"{where}: seeds are set once under [run]")
    if section == "codec":
        if key not in cfg.codec:
            raise ConfigError(f"unknown key {where}")
        return replace(cfg, codec={**cfg.codec, key: _parse_value(raw, cfg.codec[key], where)})
    if not hasattr(cfg, section) or section == "seed":
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    if section in _WEIGHT_SECTIONS and key.startswith("weight_"):
        w = obj.weights
        name = key[len("weight_"):]
        if name not in {f.name for f in fields(w)}:
            raise ConfigError(f"unknown key {where}")
        new_w = replace(w, **{name: _parse_value(raw, getattr(w, name), where)})
        return replace(cfg, **{section: replace(obj, weights=new_w)})
    names = {f.name for f in fields(obj)} - {"weights"}
    if key not in names:
        raise ConfigError(f"unknown key {where}")
    try:
        new = replace(obj, **{key: _parse_value(raw, getattr(obj, key), where)})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None
    return replace(cfg, **{section: new})


def load_run_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    """Read an INI file, then apply ``section.key=value`` overrides and the global seed."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg = _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        cfg = _apply(cfg, section.strip(), key.strip(), raw)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    # The run seed drives every stage so (config, seed) pins the whole run.
    return replace(cfg,
                   data=replace(cfg.data, seed=cfg.seed),
                   pretrain=replace(cfg.pretrain, seed=cfg.seed),
                   posttrain=replace(cfg.posttrain, seed=cfg.seed),
                   probe=replace(cfg.probe, seed=cfg.seed))


def dump_run_config(cfg: RunConfig) -> str:
    """Render a config as INI text that :func:`load_run_config` reads back."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    lines += ["[codec]"] + [f"{k} = {v}" for k, v in cfg.codec.items()] + [""]
    for section in ("data", "encoder", "adapter", "rvq", "decoder", "discriminator",
                    "pretrain", "posttrain", "probe"):
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            if f.name == "seed":
                continue
            v = getattr(obj, f.name)
            if f.name == "weights":
                for wf in fields(v):
                    lines.append(f"weight_{wf.name} = {getattr(v, wf.name)}")
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = {','.join(str(x) for x in v)}")
            else:
                lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
