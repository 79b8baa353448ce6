"""Layered configuration: CLI flags > environment > config file > defaults.

The config file is YAML (schema in docs/config.md). Secrets never live
here: the API key is read from the environment variable whose *name* is
configured, and the effective-config echo redacts everything secret-like.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .agents import AgentConfig
from .backends import BackendDescriptor, BackendKind, default_registry
from .errors import ConfigError
from .orchestrator import RefinementConfig
from .sandbox import ExecLimits
from .validators import Toolchain

ENDPOINT_ENV = "A4D_ENDPOINT"

_KIND_ALIASES = {
    "rule_based": BackendKind.RULE_BASED,
    "rulebased": BackendKind.RULE_BASED,
    "lifting": BackendKind.LIFTING,
    "ml_based": BackendKind.ML_BASED,
    "mlbased": BackendKind.ML_BASED,
    "passthrough": BackendKind.PASSTHROUGH,
}


def load_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {p} is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must contain a mapping")
    return doc


def _parse_kind(text: str) -> BackendKind:
    key = str(text).replace("-", "_").lower()
    try:
        return _KIND_ALIASES[key]
    except KeyError:
        raise ConfigError(
            f"unknown backend kind {text!r}; expected one of "
            f"{sorted(set(_KIND_ALIASES))}"
        ) from None


def build_registry(file_cfg: dict) -> dict[str, BackendDescriptor]:
    registry = default_registry()
    for name, spec in (file_cfg.get("backends") or {}).items():
        if not isinstance(spec, dict):
            raise ConfigError(f"backend {name!r}: expected a mapping")
        base = registry.get(name)
        registry[name] = BackendDescriptor(
            name=name,
            command_template=spec.get(
                "command", base.command_template if base else ""
            ),
            timeout_s=float(spec.get("timeout_s", base.timeout_s if base else 600.0)),
            kind=_parse_kind(spec["kind"]) if "kind" in spec
            else (base.kind if base else BackendKind.RULE_BASED),
        )
    return registry


@dataclass(frozen=True)
class Settings:
    """Everything a command needs, after merging all the layers."""

    refinement: RefinementConfig
    agent_mode: str  # http | mock
    transcript_path: str | None
    results_dir: str
    dry_run: bool


def _get(section: dict, key, default):
    value = section.get(key, default)
    return default if value is None else value


def merge(args, file_cfg: dict, env: dict | None = None) -> Settings:
    """args is the parsed argparse namespace; absent flags are None."""
    env = env if env is not None else dict(os.environ)

    tool_sec = file_cfg.get("toolchain") or {}
    strict = bool(args.strict) if getattr(args, "strict", False) else bool(
        _get(tool_sec, "strict", False)
    )
    toolchain = Toolchain(compiler=str(_get(tool_sec, "compiler", "cc")), strict=strict)

    lim_sec = file_cfg.get("limits") or {}
    limits = ExecLimits(
        wall_clock_s=float(
            args.timeout_s if getattr(args, "timeout_s", None) is not None
            else _get(lim_sec, "wall_clock_s", 10.0)
        ),
        memory_mb=int(
            args.mem_mb if getattr(args, "mem_mb", None) is not None
            else _get(lim_sec, "memory_mb", 256)
        ),
        max_stdout_bytes=int(_get(lim_sec, "max_stdout_bytes", 1024 * 1024)),
    )

    agent_sec = file_cfg.get("agent") or {}
    endpoint = env.get(ENDPOINT_ENV) or str(_get(agent_sec, "endpoint", ""))
    agent = AgentConfig(
        temperature=float(_get(agent_sec, "temperature", 0.0)),
        max_output_tokens=int(_get(agent_sec, "max_output_tokens", 4096)),
        max_retries=int(_get(agent_sec, "max_retries", 3)),
        backoff_base_ms=int(_get(agent_sec, "backoff_base_ms", 500)),
        endpoint_url=endpoint,
        model_name=str(_get(agent_sec, "model", "")),
        api_key_env=str(_get(agent_sec, "api_key_env", "A4D_API_KEY")),
        requests_per_minute=(
            float(agent_sec["requests_per_minute"])
            if agent_sec.get("requests_per_minute")
            else None
        ),
    )
    agent_mode = getattr(args, "agent", None) or str(_get(agent_sec, "mode", "http"))
    if agent_mode not in ("http", "mock"):
        raise ConfigError(f"agent mode must be http or mock, got {agent_mode!r}")
    transcript = getattr(args, "transcript", None) or agent_sec.get("transcript")
    if agent_mode == "mock" and not transcript:
        raise ConfigError("--agent mock requires --transcript")

    registry = build_registry(file_cfg)
    backend_name = getattr(args, "backend", None) or str(_get(file_cfg, "backend", "file"))
    if backend_name not in registry:
        raise ConfigError(
            f"unknown backend {backend_name!r}; known: {', '.join(sorted(registry))}"
        )

    ref_sec = file_cfg.get("refine") or {}
    refinement = RefinementConfig(
        backend=registry[backend_name],
        toolchain=toolchain,
        limits=limits,
        agent=agent,
        max_iterations=int(
            args.max_iters if getattr(args, "max_iters", None) is not None
            else _get(ref_sec, "max_iterations", 5)
        ),
        check_exit=bool(_get(ref_sec, "check_exit", True)),
        workers=int(
            args.workers if getattr(args, "workers", None) is not None
            else _get(ref_sec, "workers", 1)
        ),
        cache_dir=(
            str(args.cache_dir) if getattr(args, "cache_dir", None) is not None
            else (str(file_cfg["cache_dir"]) if file_cfg.get("cache_dir") else None)
        ),
        log_dir=(
            str(args.log_dir) if getattr(args, "log_dir", None) is not None
            else (str(file_cfg["log_dir"]) if file_cfg.get("log_dir") else None)
        ),
    )
    return Settings(
        refinement=refinement,
        agent_mode=agent_mode,
        transcript_path=str(transcript) if transcript else None,
        results_dir=(
            str(args.results_dir) if getattr(args, "results_dir", None) is not None
            else str(_get(file_cfg, "results_dir", "results"))
        ),
        dry_run=bool(getattr(args, "dry_run", False)),
    )


def effective_text(settings: Settings) -> str:
    """One-look summary of what a run will actually use, secrets redacted."""
    r = settings.refinement
    doc = {
        "backend": {
            "name": r.backend.name,
            "command": r.backend.command_template,
            "timeout_s": r.backend.timeout_s,
            "kind": r.backend.kind.value,
        },
        "toolchain": {"compiler": r.toolchain.compiler, "strict": r.toolchain.strict},
        "limits": {
            "wall_clock_s": r.limits.wall_clock_s,
            "memory_mb": r.limits.memory_mb,
            "max_stdout_bytes": r.limits.max_stdout_bytes,
        },
        "agent": {
            "mode": settings.agent_mode,
            "endpoint": r.agent.endpoint_url or "(none)",
            "model": r.agent.model_name or "(none)",
            "api_key": f"${r.agent.api_key_env}"
            + (" (set)" if os.environ.get(r.agent.api_key_env) else " (unset)"),
            "max_retries": r.agent.max_retries,
            "max_output_tokens": r.agent.max_output_tokens,
            "temperature": r.agent.temperature,
        },
        "refine": {
            "max_iterations": r.max_iterations,
            "check_exit": r.check_exit,
            "workers": r.workers,
        },
        "cache_dir": r.cache_dir or "(disabled)",
        "log_dir": r.log_dir or "(disabled)",
        "results_dir": settings.results_dir,
        "dry_run": settings.dry_run,
    }
    return "effective config: " + json.dumps(doc, indent=2)
