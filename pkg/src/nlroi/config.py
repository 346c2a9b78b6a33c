"""key=value configuration files.

Grammar: one `key = value` pair per line, `#` starts a comment (anywhere in
a line), blank lines are skipped, whitespace around the `=` is ignored.
Unknown and repeated keys are hard errors so typos never pass silently;
every error message carries the offending line number.

Defaults when a key is absent: the bottleneck widths derive from the input
width (d_f = d_g = d/4, floored at 1, and d_mid = d_f), self-attention is
on, and scores scale by the square root of the channel count. Optimizer
defaults are momentum 0.9, weight decay 0.0001, learning rate 0.01.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .operator import NlRoiConfig, Scaling
from .toytask import Hyper, SceneSpec

_INT_KEYS = {
    "n", "d", "d_f", "d_mid", "d_g", "h", "w",
    "k_classes", "seed", "steps", "scenes_per_step",
}
_FLOAT_KEYS = {"learning_rate", "momentum", "weight_decay"}
_BOOL_KEYS = {"attend_to_self"}
_ENUM_KEYS = {"scaling"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _ENUM_KEYS


@dataclass(frozen=True)
class ConfigFile:
    n: int
    d: int
    d_f: int
    d_mid: int
    d_g: int
    h: int
    w: int
    k_classes: int
    attend_to_self: bool
    scaling: Scaling
    seed: int
    learning_rate: float
    momentum: float
    weight_decay: float
    steps: int
    scenes_per_step: int

    def nlroi_config(self) -> NlRoiConfig:
        return NlRoiConfig(
            d=self.d,
            d_f=self.d_f,
            d_mid=self.d_mid,
            d_g=self.d_g,
            h=self.h,
            w=self.w,
            attend_to_self=self.attend_to_self,
            scaling=self.scaling,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(n=self.n, k=self.k_classes, d=self.d, h=self.h, w=self.w)

    def hyper(self) -> Hyper:
        return Hyper(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            steps=self.steps,
            scenes_per_step=self.scenes_per_step,
        )


def _parse_int(key, raw, ln):
    try:
        v = int(raw, 10)
    except ValueError:
        raise ConfigError(f"line {ln}: {key} expects an integer, got {raw!r}") from None
    lo = 0 if key in ("seed", "steps") else 1
    if v < lo:
        raise ConfigError(f"line {ln}: {key} must be >= {lo}, got {v}")
    if key == "seed" and v >= 1 << 64:
        raise ConfigError(f"line {ln}: seed must fit in 64 bits, got {v}")
    return v


def _parse_float(key, raw, ln):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"line {ln}: {key} expects a number, got {raw!r}") from None
    if v != v or v == float("inf") or v < 0.0:
        raise ConfigError(f"line {ln}: {key} must be a finite value >= 0, got {raw!r}")
    return v


def parse_config(text: str) -> ConfigFile:
    seen: dict = {}
    lines: dict = {}
    for ln, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {ln}: expected key = value, got {body!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(
                f"line {ln}: {key!r} already set on line {lines[key]}"
            )
        lines[key] = ln
        if key in _INT_KEYS:
            seen[key] = _parse_int(key, raw, ln)
        elif key in _FLOAT_KEYS:
            seen[key] = _parse_float(key, raw, ln)
        elif key in _BOOL_KEYS:
            if raw not in ("true", "false"):
                raise ConfigError(f"line {ln}: {key} expects true or false, got {raw!r}")
            seen[key] = raw == "true"
        else:
            try:
                seen[key] = Scaling(raw)
            except ValueError:
                raise ConfigError(
                    f"line {ln}: scaling expects per_channel or full_flatten, got {raw!r}"
                ) from None

    d = seen.get("d", 16)
    d_f = seen.get("d_f", max(1, d // 4))
    cfg = ConfigFile(
        n=seen.get("n", 8),
        d=d,
        d_f=d_f,
        d_mid=seen.get("d_mid", d_f),
        d_g=seen.get("d_g", max(1, d // 4)),
        h=seen.get("h", 3),
        w=seen.get("w", 3),
        k_classes=seen.get("k_classes", 4),
        attend_to_self=seen.get("attend_to_self", True),
        scaling=seen.get("scaling", Scaling.PER_CHANNEL),
        seed=seen.get("seed", 0),
        learning_rate=seen.get("learning_rate", 0.01),
        momentum=seen.get("momentum", 0.9),
        weight_decay=seen.get("weight_decay", 1e-4),
        steps=seen.get("steps", 3000),
        scenes_per_step=seen.get("scenes_per_step", 8),
    )

    def where(key):
        return f"line {lines[key]}: " if key in lines else ""

    if cfg.d_f > cfg.d:
        raise ConfigError(f"{where('d_f')}d_f={cfg.d_f} exceeds d={cfg.d}")
    if cfg.d_mid > cfg.d:
        raise ConfigError(f"{where('d_mid')}d_mid={cfg.d_mid} exceeds d={cfg.d}")
    if cfg.k_classes > cfg.d:
        raise ConfigError(
            f"{where('k_classes')}k_classes={cfg.k_classes} exceeds d={cfg.d} "
            "(one-hot channels must fit)"
        )
    return cfg
