"""
Run configuration: settings defaults, deep-merged with a JSON file and CLI
overrides, validated by the section serializers.
"""

import copy
import hashlib
import json
import logging
import platform
import re
from importlib import metadata
from pathlib import Path

from django.conf import settings

from cli.serializers import RunConfigSerializer
from core.exceptions import ConfigError

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ("numpy", "simpy", "tqdm", "django", "djangorestframework")


def default_config():
    return copy.deepcopy(settings.FASTER)


def deep_merge(base, override):
    """Returns a new dict; nested dicts merge, everything else is replaced."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _first_error(errors, prefix=()):
    """Walks DRF's nested error structure down to the first leaf message."""
    if isinstance(errors, dict):
        key = next(iter(errors))
        path = prefix if key == "non_field_errors" else (*prefix, key)
        return _first_error(errors[key], path)
    if isinstance(errors, list) and errors:
        if isinstance(errors[0], (dict, list)):
            return _first_error(errors[0], prefix)
        return prefix, str(errors[0])
    return prefix, str(errors)


def key_line(text, path):
    """1-based line of the last key of a dotted path in JSON text, or None."""
    if not text or not path:
        return None
    pos = 0
    for key in path:
        match = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if match is None:
            return None
        pos = match.start()
    return text.count("\n", 0, pos) + 1


def parse_config_text(text, source="<config>"):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"invalid JSON: {exc.msg} (column {exc.colno})", path=source, line=exc.lineno
        ) from None
    if not isinstance(data, dict):
        raise ConfigError("the config file must contain a JSON object", path=source, line=1)
    return data


def validate_config(raw, text=None):
    """Validate a merged config dict; returns the serializer's validated data."""
    serializer = RunConfigSerializer(data=raw)
    if not serializer.is_valid():
        path, message = _first_error(serializer.errors)
        raise ConfigError(message, details=serializer.errors, path=".".join(path), line=key_line(text, path))
    return serializer.validated_data


def load_config(path=None, seed=None):
    """
    Returns (raw effective config, validated data). `seed` overrides the
    file's seed when given.
    """
    text = None
    raw = default_config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from None
        raw = deep_merge(raw, parse_config_text(text, str(path)))
    if seed is not None:
        raw["seed"] = seed
    validated = validate_config(raw, text)
    logger.debug("effective config hash %s", config_hash(raw))
    return raw, validated


def config_hash(raw, command=None, options=None):
    """Digest of the effective config, plus the subcommand and its flags when given."""
    payload = raw
    if command is not None or options is not None:
        payload = {"config": raw, "command": command, "options": options or {}}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def package_versions():
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(out_dir, command, raw, results=None, options=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": raw["seed"],
        "config_hash": config_hash(raw, command, options),
        "config": raw,
        "options": options or {},
        "versions": package_versions(),
        "results": results or {},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    logger.info("manifest written to %s", path)
    return path
