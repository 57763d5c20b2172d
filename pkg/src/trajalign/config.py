"""Pipeline configuration: one TOML document plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .alignment import BootstrapConfig
from .embedding import EmbeddingProviderConfig
from .errors import ConfigError

DEFAULT_JUDGES = ("judge_a", "judge_b", "judge_c")


@dataclass(frozen=True)
class Paths:
    corpus: str = ""
    catalog: str = ""
    guideline: str = ""
    lexicon: str = ""
    items: str = ""
    reference: str = ""
    template: str = ""
    rubric: str = ""
    out: str = "out"


@dataclass(frozen=True)
class Limits:
    context_tokens: int = 20_000
    output_tokens: int = 4_096
    history_share: float = 0.8
    max_depth: int = 12
    max_paths: int = 10_000


@dataclass(frozen=True)
class Providers:
    stub_reranker: bool = True
    stub_judges: bool = True
    judges: tuple[str, ...] = DEFAULT_JUDGES
    judge_fixed: tuple[int, ...] = ()  # empty means seeded pseudo-random stub scores
    rerank_endpoint: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    embedding: EmbeddingProviderConfig = field(default_factory=EmbeddingProviderConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    limits: Limits = field(default_factory=Limits)
    providers: Providers = field(default_factory=Providers)
    seed: int = 0
    parallelism: int = 1
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if type(self.seed) is not int or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        lim = self.limits
        if lim.context_tokens <= 0 or lim.output_tokens <= 0:
            raise ConfigError("token caps must be positive")
        if not 0 < lim.history_share < 1:
            raise ConfigError("history_share must lie strictly between 0 and 1")
        if lim.max_depth < 1 or lim.max_paths < 1:
            raise ConfigError("max_depth and max_paths must be >= 1")
        if self.providers.judge_fixed and len(self.providers.judge_fixed) != 4:
            raise ConfigError("judge_fixed needs four scores (factual, completeness, soundness, actionability)")
        if not self.providers.judges:
            raise ConfigError("at least one judge id is required")

    def resolve(self, name: str) -> Path | None:
        """Absolute path for a ``[paths]`` entry, or None when unset."""
        raw = getattr(self.paths, name)
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def require(self, *names: str) -> dict[str, Path]:
        out = {}
        for name in names:
            p = self.resolve(name)
            if p is None:
                raise ConfigError(f"config is missing paths.{name}")
            if not p.is_file():
                raise ConfigError(f"paths.{name} does not exist: {getattr(self.paths, name)}")
            out[name] = p
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring key order and the output directory."""
        d = self.to_dict()
        d["paths"].pop("out")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_SECTIONS = {
    "paths": Paths,
    "embedding": EmbeddingProviderConfig,
    "bootstrap": BootstrapConfig,
    "limits": Limits,
    "providers": Providers,
}
_BOOTSTRAP_ALIASES = {"iterations": "max_iterations"}


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key = _BOOTSTRAP_ALIASES.get(key, key) if cls is BootstrapConfig else key
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    kwargs = {"base_dir": str(base_dir)}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key in ("seed", "parallelism"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return config_from_dict(data, path.parent)


def with_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Apply flag overrides; ``None`` values leave the config untouched."""
    o = {k: v for k, v in overrides.items() if v is not None}
    boot = {k: o.pop(k) for k in ("alpha", "theta", "max_iterations", "top_n") if k in o}
    prov = {k: o.pop(k) for k in ("stub_judges", "stub_reranker") if k in o}
    out_dir = o.pop("out", None)
    embedder = o.pop("embedder", None)
    try:
        if boot:
            cfg = replace(cfg, bootstrap=replace(cfg.bootstrap, **boot))
        if prov:
            cfg = replace(cfg, providers=replace(cfg.providers, **prov))
        if embedder:
            cfg = replace(cfg, embedding=replace(cfg.embedding, kind=embedder))
        if out_dir:
            cfg = replace(cfg, paths=replace(cfg.paths, out=str(out_dir)))
        cfg = replace(cfg, **o)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    # the hash embedder seed follows the run seed
    return replace(cfg, embedding=replace(cfg.embedding, seed=cfg.seed))
