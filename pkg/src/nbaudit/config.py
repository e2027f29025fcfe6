"""Run configuration.

A run is configured from up to four layers, later layers winning:

1. built-in defaults (the dataclass field defaults below),
2. an INI config file,
3. environment variables named ``NBAUDIT_<SECTION>_<KEY>``,
4. explicit CLI flag overrides.

Every option lives in exactly one ``(section, key)`` slot, listed in
``_SCHEMA``; unknown sections or keys are rejected so typos fail loudly
instead of silently running with defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

__all__ = ["RunConfig", "load_config"]


@dataclass
class RunConfig:
    # [mining]
    query: str = "(ipynb OR jupyter OR ipython) AND github"
    max_results: int = 10000
    date_cutoff: str = ""  # inclusive upper publication date, YYYY/MM/DD; empty = open
    entrez_api_key: str = ""

    # [endpoints]
    entrez_base: str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
    github_api_base: str = "https://api.github.com"  # "none" disables metadata calls
    git_base_url: str = "https://github.com/"  # prefix cloned repos resolve against

    # [paths]
    workdir: str = "audit-workdir"
    db_path: str = ""  # default: <workdir>/audit.sqlite
    xml_cache_dir: str = ""  # default: <workdir>/xmlcache
    repos_dir: str = ""  # default: <workdir>/repos
    envs_dir: str = ""  # default: <workdir>/envs
    reports_dir: str = ""  # default: <workdir>/reports

    # [limits]
    rate_limit_per_sec: float = 3.0
    rate_burst: int = 3
    retries: int = 3
    clone_size_cap_mb: int = 2048
    mine_workers: int = 4
    harvest_workers: int = 4
    analyze_workers: int = 4
    install_workers: int = 2
    execute_workers: int = 2

    # [envs]
    env_manager: str = "venv"  # "venv" or "conda"
    conda_tool: str = "conda"  # executable used when env_manager = conda
    install_timeout_sec: int = 1200
    default_python: str = "3.6"  # assumed version when a notebook declares none
    default_stack: str = ""  # manifest path; empty = packaged default

    # [execution]
    notebook_timeout_sec: int = 300
    stop_on_exception: bool = True
    kill_grace_sec: int = 10
    shim_path: str = ""  # empty = bundled shim

    # [footprint]
    n_cores: int = 36
    power_per_core_watts: float = 4.7
    core_usage_fraction: float = 1.0
    memory_gb: float = 192.0
    power_per_gb_watts: float = 0.3725
    pue: float = 1.67
    carbon_intensity_kg_per_kwh: float = 0.33875

    # derived, not configurable
    config_path: str = field(default="", compare=False)

    def resolve_paths(self) -> None:
        """Fill path defaults that hang off ``workdir``."""
        wd = Path(self.workdir)
        if not self.db_path:
            self.db_path = str(wd / "audit.sqlite")
        if not self.xml_cache_dir:
            self.xml_cache_dir = str(wd / "xmlcache")
        if not self.repos_dir:
            self.repos_dir = str(wd / "repos")
        if not self.envs_dir:
            self.envs_dir = str(wd / "envs")
        if not self.reports_dir:
            self.reports_dir = str(wd / "reports")

    def validate(self) -> None:
        if self.env_manager not in ("venv", "conda"):
            raise ConfigError(f"env_manager must be 'venv' or 'conda', got {self.env_manager!r}")
        if self.rate_limit_per_sec <= 0:
            raise ConfigError("rate_limit_per_sec must be positive")
        for name in ("max_results", "retries", "rate_burst", "install_timeout_sec",
                     "notebook_timeout_sec", "kill_grace_sec", "clone_size_cap_mb",
                     "mine_workers", "harvest_workers", "analyze_workers",
                     "install_workers", "execute_workers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.query.strip():
            raise ConfigError("query must not be empty")
        if self.pue < 1.0:
            raise ConfigError("pue below 1.0 is not physical")


# (section, key) -> dataclass field name.  Keys equal field names; sections
# group them for the INI file and the env-var namespace.
_SCHEMA: dict[str, tuple[str, ...]] = {
    "mining": ("query", "max_results", "date_cutoff", "entrez_api_key"),
    "endpoints": ("entrez_base", "github_api_base", "git_base_url"),
    "paths": ("workdir", "db_path", "xml_cache_dir", "repos_dir", "envs_dir", "reports_dir"),
    "limits": ("rate_limit_per_sec", "rate_burst", "retries", "clone_size_cap_mb",
               "mine_workers", "harvest_workers", "analyze_workers",
               "install_workers", "execute_workers"),
    "envs": ("env_manager", "conda_tool", "install_timeout_sec", "default_python",
             "default_stack"),
    "execution": ("notebook_timeout_sec", "stop_on_exception", "kill_grace_sec", "shim_path"),
    "footprint": ("n_cores", "power_per_core_watts", "core_usage_fraction", "memory_gb",
                  "power_per_gb_watts", "pue", "carbon_intensity_kg_per_kwh"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(field_name: str, raw: str):
    ftype = _FIELD_TYPES[field_name]
    try:
        if ftype == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {field_name}: {exc}") from None


def load_config(path: str | None = None,
                env: dict[str, str] | None = None,
                overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from file, environment, and overrides.

    ``overrides`` maps ``"section.key"`` to raw string values (CLI layer).
    Raises :class:`ConfigError` on unknown keys or malformed values.
    """
    cfg = RunConfig()
    env = os.environ if env is None else env

    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                setattr(cfg, key, _coerce(key, raw))
        cfg.config_path = path

    for section, keys in _SCHEMA.items():
        for key in keys:
            var = f"NBAUDIT_{section.upper()}_{key.upper()}"
            if var in env:
                setattr(cfg, key, _coerce(key, env[var]))

    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown option {dotted!r}")
        setattr(cfg, key, _coerce(key, raw))

    cfg.resolve_paths()
    cfg.validate()
    return cfg
