from __future__ import annotations
# config.py
__version__ = "1.0.0"


from dotenv import load_dotenv
load_dotenv()

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from engine.errors import ConfigError


# ============================================================
# Helpers
# ============================================================

def _int_env(name: str, default: int = 0) -> int:
    raw = (os.getenv(name) or "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        raise RuntimeError(f"{name} must be an integer (got {raw!r})")


def _bool_env(name: str, default: bool = False) -> bool:
    raw = (os.getenv(name) or "").strip().lower()
    if not raw:
        return default
    return raw in {"1", "true", "yes", "y", "on"}


def _str_env(name: str, default: str = "") -> str:
    return (os.getenv(name) or default or "").strip()


# ============================================================
# Settings (process environment)
# ============================================================

@dataclass(frozen=True)
class Settings:
    out_dir: Optional[Path]     # UNIG_OUT, overrides --out when set
    workers: int                # UNIG_WORKERS, 0 = one per core
    log_level: str
    progress: bool


def load_settings() -> Settings:
    out_raw = _str_env("UNIG_OUT")
    workers = _int_env("UNIG_WORKERS", 0)
    if workers < 0:
        raise RuntimeError("UNIG_WORKERS must be >= 0")

    return Settings(
        out_dir=Path(out_raw) if out_raw else None,
        workers=workers,
        log_level=_str_env("UNIG_LOG_LEVEL", "INFO").upper(),
        progress=_bool_env("UNIG_PROGRESS", False),
    )


settings = load_settings()


# ============================================================
# Run configuration (defaults <- config file <- flags)
# ============================================================

Parser = Callable[[str], Any]


def _p_int(raw: str) -> int:
    return int(raw)


def _p_float(raw: str) -> float:
    return float(raw)


def _p_str(raw: str) -> str:
    return raw


def _p_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in {"1", "true", "yes", "y", "on"}:
        return True
    if v in {"0", "false", "no", "n", "off"}:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _p_alpha(raw: str) -> Any:
    # "auto" defers to the per-model sweep run by evaluate and sweep
    return "auto" if raw.strip().lower() == "auto" else float(raw)


def _p_list(item: Parser) -> Parser:
    def parse(raw: str) -> Tuple[Any, ...]:
        return tuple(item(x.strip()) for x in raw.split(",") if x.strip())
    return parse


def _p_choice(*options: str) -> Parser:
    def parse(raw: str) -> str:
        v = raw.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


# key -> (parser, default as written in a config file)
SCHEMA: Dict[str, Tuple[Parser, str]] = {
    # ---- model ----
    "model.path": (_p_str, ""),
    "model.seed": (_p_int, "0"),
    "model.conv_channels": (_p_list(_p_int), "8,16"),
    "model.kernel": (_p_int, "3"),
    "model.stride": (_p_int, "2"),
    "model.feature_dim": (_p_int, "64"),
    "model.epochs": (_p_int, "30"),
    "model.lr": (_p_float, "0.05"),
    "model.momentum": (_p_float, "0.9"),
    "model.batch_size": (_p_int, "64"),
    "model.target_accuracy": (_p_float, "0.97"),
    "model.holdout": (_p_float, "0.2"),

    # ---- data ----
    "data.source": (_p_choice("synthetic", "idx"), "synthetic"),
    "data.classes": (_p_int, "4"),
    "data.n": (_p_int, "4000"),
    "data.side": (_p_int, "16"),
    "data.noise": (_p_float, "0.1"),
    "data.seed": (_p_int, "0"),
    "data.images": (_p_str, ""),
    "data.labels": (_p_str, ""),
    "data.eval_n": (_p_int, "512"),

    # ---- defense ----
    "defense.kinds": (_p_list(_p_choice("vanilla", "rnd", "unig")), "vanilla,rnd,unig"),
    "defense.rnd_sigma": (_p_float, "0.02"),
    "defense.delta": (_p_float, "0.5"),
    "defense.p": (_p_int, "1"),
    "defense.alpha": (_p_alpha, "1.0"),
    "defense.eps_norm": (_p_float, "1e-12"),
    "defense.cascade_k": (_p_int, "0"),
    "defense.frozen_p": (_p_bool, "false"),
    "defense.single_sample": (_p_bool, "false"),

    # ---- attack ----
    "attack.kinds": (
        _p_list(_p_choice("square", "simba", "signhunter", "nes", "bandits")),
        "square,simba,signhunter,nes,bandits",
    ),
    "attack.norm": (_p_choice("linf", "l2"), "linf"),
    "attack.epsilon": (_p_float, "0.15"),
    "attack.targeted": (_p_bool, "false"),
    "attack.p_init": (_p_float, "0.05"),
    "attack.simba_step": (_p_float, "0"),
    "attack.simba_basis": (_p_choice("pixel", "dct"), "pixel"),
    "attack.nes_samples": (_p_int, "10"),
    "attack.nes_sigma": (_p_float, "0.01"),
    "attack.nes_step": (_p_float, "0.01"),
    "attack.bandits_prior_lr": (_p_float, "0.1"),
    "attack.bandits_exploration": (_p_float, "0.1"),
    "attack.bandits_tile": (_p_int, "0"),
    "attack.bandits_fd_eta": (_p_float, "0.1"),
    "attack.bandits_step": (_p_float, "0.01"),
    "attack.freeze": (_p_bool, "true"),
    "attack.batch_composition": (_p_choice("distinct", "identical"), "distinct"),

    # ---- eval ----
    "eval.budgets": (_p_list(_p_int), "100,2500"),
    "eval.seeds": (_p_list(_p_int), "0,1,2"),
    "eval.batch_size": (_p_int, "128"),
    "eval.workers": (_p_int, str(settings.workers)),
    "eval.axis": (_p_str, ""),
    "eval.values": (_p_list(_p_float), ""),

    # ---- out ----
    "out.dir": (_p_str, "out"),
    "out.run_id": (_p_str, ""),
    "out.timing": (_p_bool, "false"),
    "out.formats": (_p_list(_p_choice("csv", "json", "curves")), "csv,json,curves"),
    "out.from": (_p_str, ""),
}


@dataclass(frozen=True)
class Config:
    raw: Dict[str, str]
    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key}")
        return self.values[key]

    def section(self, prefix: str) -> Dict[str, Any]:
        p = prefix.rstrip(".") + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def dump(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    def with_overrides(self, overrides: Dict[str, str]) -> "Config":
        return build_config({**self.raw, **overrides})


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
        out[key] = value
    return out


def parse_flag_overrides(args: Iterable[str]) -> Dict[str, str]:
    """`--ns.key value` / `--ns.key=value` pairs; anything else is an error."""
    items: List[str] = list(args)
    out: Dict[str, str] = {}
    i = 0
    while i < len(items):
        tok = items[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"missing value for --{key}")
            value = items[i + 1]
            i += 2
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = value
    return out


def build_config(raw: Dict[str, str]) -> Config:
    merged = {k: default for k, (_parser, default) in SCHEMA.items()}
    for k, v in raw.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key: {k}")
        merged[k] = str(v).strip()

    values: Dict[str, Any] = {}
    for k, v in merged.items():
        parser = SCHEMA[k][0]
        try:
            values[k] = parser(v)
        except ValueError as e:
            raise ConfigError(f"bad value for {k}: {v!r} ({e})")
    return Config(raw=merged, values=values)


def resolve_config(
    config_path: Optional[Path] = None,
    flags: Optional[Dict[str, str]] = None,
) -> Config:
    raw: Dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    raw.update(flags or {})
    if settings.out_dir is not None:
        raw["out.dir"] = str(settings.out_dir)
    return build_config(raw)
