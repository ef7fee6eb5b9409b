"""Run configuration: defaults, key=value config files and validation."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigMismatchError, FormatError, ParameterError


@dataclass(frozen=True)
class RunConfig:
    # BEV
    g: float = 0.4
    d: float = 40.0
    n_m: int = 10
    z_min: float = -3.0
    z_max: float = 10.0
    # features
    n_r: int = 8
    k: int = 64
    pca_dim: int = 512
    sharpness: float = 30.0
    blur_sigma: float = 3.0  # pixels; 0 disables the pre-backbone blur
    disk_pool: bool = True
    weight_seed: int = 0
    weights: str = ""  # optional BVW1 path; empty means seeded random init
    kmeans_seed: int = 0
    kmeans_iters: int = 30
    # keypoints and matching
    fast_threshold: float = 0.06
    nms_radius: int = 3
    max_keypoints: int = 500
    match_candidates: int = 3
    ransac_tol: float = 2.0
    ransac_iters: int = 1000
    ransac_confidence: float = 0.99
    ransac_seed: int = 0
    min_inliers: int = 4
    # evaluation
    loop_exclusion: int = 100
    positive_radius: float = 5.0
    threads: int = 0  # 0 means one worker per processor

    def __post_init__(self):
        for name in ("g", "d", "n_m", "n_r", "k", "pca_dim", "sharpness", "kmeans_iters", "max_keypoints",
                     "match_candidates", "ransac_tol", "ransac_iters", "min_inliers", "positive_radius"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 2:
            raise ParameterError("k must be at least 2")
        if self.z_min >= self.z_max:
            raise ParameterError("z_min must be below z_max")
        if not 0 < self.ransac_confidence < 1:
            raise ParameterError("ransac_confidence must lie in (0, 1)")
        if min(self.blur_sigma, self.fast_threshold, self.nms_radius, self.loop_exclusion, self.threads) < 0:
            raise ParameterError("thresholds, radii and counts must be non-negative")

    # keys that change stored descriptors; a database only serves queries that agree on them
    DESCRIPTOR_KEYS = ("g", "d", "n_m", "z_min", "z_max", "n_r", "k", "pca_dim", "sharpness", "blur_sigma", "disk_pool",
                       "weight_seed", "weights", "kmeans_seed", "kmeans_iters")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def echo(self) -> str:
        """One `key = value` line per field, in declaration order."""
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())

    def worker_count(self) -> int:
        env = os.environ.get("BEVLOC_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ParameterError(f"BEVLOC_THREADS must be an integer, got {env!r}") from None
            if n > 0:
                return n
        return self.threads or os.cpu_count() or 1

    def check_compatible(self, other: "RunConfig") -> None:
        diffs = [k for k in self.DESCRIPTOR_KEYS if getattr(self, k) != getattr(other, k)]
        if diffs:
            detail = ", ".join(f"{k}: {getattr(self, k)!r} vs {getattr(other, k)!r}" for k in diffs)
            raise ConfigMismatchError(f"configuration differs from the database ({detail})")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    return str(v)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            return raw[1:-1]
        return raw
    except ValueError:
        raise ParameterError(f"bad value for {name}: {raw!r}") from None


_TYPES = {"float": float, "int": int, "bool": bool, "str": str}


def field_types() -> dict:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def parse_overrides(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines; `#` starts a comment, [section] headers are ignored."""
    types = field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path: str | Path | None = None, **flags) -> RunConfig:
    """Defaults, then the config file, then explicit flags (None values ignored)."""
    values = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config file {p}: {exc.strerror}") from None
        values.update(parse_overrides(text, str(p)))
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values)


def config_from_echo(text: str) -> RunConfig:
    return RunConfig(**parse_overrides(text, "<echo>"))
