"""Run configuration: one human-editable JSON file, strictly validated.

Unknown keys are rejected at every level so a typo in an ablation study
fails loudly instead of silently running the default. Command-line flags
override file values; the effective configuration is echoed into every
output artifact. Environment variables carry endpoint secrets only:
``CIRLOOP_ENDPOINT_BEARER`` (outbound model calls) and
``CIRLOOP_AUTH_TOKEN`` (inbound service auth).
"""

from __future__ import annotations

import json
from pathlib import Path

from .compose import ComposerBinding
from .errors import ConfigError
from .feedback import DatasetProfile, SimulatorBinding
from .gallery import EmbeddingGallery, load_gallery
from .ranking import NextRefPolicy
from .session import EvalConfig

_TOP_KEYS = {
    "dataset", "galleries", "triplets", "out_dir", "eval", "workers",
    "composer", "simulator", "profile", "report", "service",
}
_EVAL_KEYS = {
    "r_max", "m", "stop_k", "history_mode", "feedback_mode", "next_ref",
    "pool_narrow", "exclusion_mode", "seed",
}
_GALLERY_KEYS = {"path", "format", "subset_tag"}
_COMPOSER_KEYS = {
    "toy": {"kind", "toy_beta", "toy_seed"},
    "replay": {"kind", "table"},
    "remote": {"kind", "endpoint", "timeout_s", "retries"},
}
_SIMULATOR_KEYS = {
    "oracle": {"kind", "alpha", "seed"},
    "caption_pipeline": {
        "kind", "captioner_endpoint", "generator_endpoint", "temperature", "max_tokens",
    },
    "direct_diff": {"kind", "endpoint"},
}
_PROFILE_KEYS = {"kind", "category"}
_REPORT_KEYS = {"ks", "rounds"}
_SERVICE_KEYS = {"port", "store_path", "mode", "ttl_s", "auth_token", "cors_origin"}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def load_run_config(path: str | Path) -> dict:
    """Parse and validate a run-config file; relative paths resolve to its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    validate_run_config(cfg)
    cfg["_base_dir"] = str(path.parent)
    return cfg


def validate_run_config(cfg: dict) -> None:
    _check_keys(cfg, _TOP_KEYS | {"_base_dir"}, "config")
    if "eval" in cfg:
        _check_keys(cfg["eval"], _EVAL_KEYS, "config.eval")
    for name, spec in (cfg.get("galleries") or {}).items():
        _check_keys(spec, _GALLERY_KEYS, f"config.galleries.{name}")
        if "path" not in spec:
            raise ConfigError(f"config.galleries.{name}: missing path")
    if "composer" in cfg:
        composer = cfg["composer"]
        kind = composer.get("kind") if isinstance(composer, dict) else None
        if kind not in _COMPOSER_KEYS:
            raise ConfigError(f"config.composer.kind must be one of {sorted(_COMPOSER_KEYS)}")
        _check_keys(composer, _COMPOSER_KEYS[kind], "config.composer")
    if cfg.get("simulator") is not None:
        simulator = cfg["simulator"]
        kind = simulator.get("kind") if isinstance(simulator, dict) else None
        if kind not in _SIMULATOR_KEYS:
            raise ConfigError(f"config.simulator.kind must be one of {sorted(_SIMULATOR_KEYS)}")
        _check_keys(simulator, _SIMULATOR_KEYS[kind], "config.simulator")
    if "profile" in cfg:
        _check_keys(cfg["profile"], _PROFILE_KEYS, "config.profile")
    if "report" in cfg:
        _check_keys(cfg["report"], _REPORT_KEYS, "config.report")
    if "service" in cfg:
        _check_keys(cfg["service"], _SERVICE_KEYS, "config.service")


_OVERRIDE_MAP = {
    "rmax": ("eval", "r_max", int),
    "topm": ("eval", "m", int),
    "stop_k": ("eval", "stop_k", int),
    "pool_narrow": ("eval", "pool_narrow", int),
    "seed": ("eval", "seed", int),
}


def apply_overrides(cfg: dict, args) -> dict:
    """Merge CLI flags into a parsed config (flags win over file values)."""
    for attr, (section, key, cast) in _OVERRIDE_MAP.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.setdefault(section, {})[key] = cast(value)
    history = getattr(args, "history", None)
    if history is not None:
        cfg.setdefault("eval", {})["history_mode"] = {"mean": "mean", "last": "last_only"}[history]
    feedback = getattr(args, "feedback", None)
    if feedback is not None:
        cfg.setdefault("eval", {})["feedback_mode"] = feedback
    next_ref = getattr(args, "next_ref", None)
    if next_ref is not None:
        NextRefPolicy.parse(next_ref)  # fail fast on bad syntax
        cfg.setdefault("eval", {})["next_ref"] = next_ref
    exclude = getattr(args, "exclude", None)
    if exclude is not None:
        cfg.setdefault("eval", {})["exclusion_mode"] = {
            "none": "none", "current": "current_ref", "all": "all_prior_refs",
        }[exclude]
    workers = getattr(args, "workers", None)
    if workers is not None:
        cfg["workers"] = int(workers)
    out = getattr(args, "out", None)
    if out is not None:
        cfg["out_dir"] = str(out)
    validate_run_config(cfg)
    return cfg


def _resolve(cfg: dict, path_text: str) -> Path:
    path = Path(path_text)
    if not path.is_absolute() and "_base_dir" in cfg:
        return Path(cfg["_base_dir"]) / path
    return path


def build_eval_config(cfg: dict) -> EvalConfig:
    return EvalConfig.from_dict(cfg.get("eval", {}))


def build_galleries(cfg: dict) -> dict[str, EmbeddingGallery]:
    specs = cfg.get("galleries")
    if not specs:
        raise ConfigError("config.galleries must declare at least one gallery")
    galleries = {}
    for name, spec in specs.items():
        galleries[name] = load_gallery(
            _resolve(cfg, spec["path"]),
            format=spec.get("format", "binary"),
            gallery_id=name,
            subset_tag=spec.get("subset_tag"),
        )
    return galleries


def build_composer_binding(cfg: dict) -> ComposerBinding:
    composer = cfg.get("composer", {"kind": "toy"})
    kind = composer["kind"]
    if kind == "toy":
        return ComposerBinding(
            "toy",
            toy_beta=float(composer.get("toy_beta", 0.5)),
            toy_seed=int(composer.get("toy_seed", 0)),
        )
    if kind == "replay":
        return ComposerBinding("replay", replay_table=str(_resolve(cfg, composer["table"])))
    return ComposerBinding(
        "remote",
        endpoint=composer["endpoint"],
        timeout_s=float(composer.get("timeout_s", 30.0)),
        retries=int(composer.get("retries", 2)),
    )


def build_simulator_binding(cfg: dict) -> SimulatorBinding | None:
    simulator = cfg.get("simulator")
    if simulator is None:
        return None
    kind = simulator["kind"]
    if kind == "oracle":
        return SimulatorBinding(
            "oracle", alpha=float(simulator.get("alpha", 1.0)), seed=int(simulator.get("seed", 0))
        )
    if kind == "caption_pipeline":
        return SimulatorBinding(
            "caption_pipeline",
            captioner_endpoint=simulator["captioner_endpoint"],
            generator_endpoint=simulator["generator_endpoint"],
            temperature=float(simulator.get("temperature", 0.0)),
            max_tokens=int(simulator.get("max_tokens", 256)),
        )
    return SimulatorBinding("direct_diff", diff_endpoint=simulator["endpoint"])


def build_profile(cfg: dict) -> DatasetProfile:
    profile = cfg.get("profile")
    if profile is None:
        return DatasetProfile("cirr_like")
    # a fisd profile without a category resolves per triplet at run time
    return DatasetProfile(profile.get("kind", "cirr_like"), profile.get("category"))
