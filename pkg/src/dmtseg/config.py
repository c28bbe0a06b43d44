"""Line-oriented run configuration: ``key = value`` lines under ``[section]`` headers.

    [run]
    method = dmt
    seed = 0
    depth = 2
    rounds = 1

    [tree]
    node.root.kind = srf
    node.root.L.kind = srf

    [schedule]
    level.2.patch = 8
    level.2.label = 5
    level.2.superpixels = 1200

Sections ``[srf]``, ``[bn]``, ``[slic]`` and ``[features]`` take the field
names of the matching parameter objects.  Anything not given keeps its default.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bn import BnParams
from .dmt import KINDS, METHODS, DmtConfig, ScaleEntry, ScaleSchedule, TreeSpec, level_of
from .features import FeatureConfig
from .oversegment import SlicParams
from .srf import SrfParams


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None, key: str | None = None):
        where = source if line is None else f"{source}:{line}"
        what = f" [{key}]" if key else ""
        super().__init__(f"{where}{what}: {message}")
        self.line = line
        self.key = key


@dataclass
class RunConfig:
    method: str = "dmt"
    dmt: DmtConfig = field(default_factory=DmtConfig)
    spec: TreeSpec = field(default_factory=TreeSpec)
    schedule: ScaleSchedule = field(default_factory=lambda: ScaleSchedule.multiscale(2))


def _to_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _to_opt_int(s: str):
    return None if s.lower() == "none" else int(s)


def _to_floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _to_pairs(s: str) -> tuple:
    # "1:2, 2:4"
    out = []
    for item in s.replace(",", " ").split():
        a, b = item.split(":")
        out.append((float(a), float(b)))
    return tuple(out)


def _converters(cls) -> dict:
    special = {"candidate_features_per_node": _to_opt_int, "gabor_wavelengths": _to_floats,
               "dog_sigma_pairs": _to_pairs}
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in special:
            out[f.name] = special[f.name]
            continue
        default = f.default
        if isinstance(default, bool):
            out[f.name] = _to_bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float):
            out[f.name] = float
    return out


_PARAM_SECTIONS = {"srf": SrfParams, "bn": BnParams, "slic": SlicParams, "features": FeatureConfig}
_RUN_KEYS = {"method": str, "seed": int, "classes": int, "depth": int, "rounds": int}
# seeds come from the run seed, context use from the tree position and
# patch sides and superpixel counts from the schedule
_INTERNAL = {"rng_seed", "include_context", "context_classes", "target_superpixels",
             "feature_patch_side", "label_patch_side"}
_NODE_RE = re.compile(r"^node\.(root(?:\.[LR])*)\.kind$")
_LEVEL_RE = re.compile(r"^level\.(\d+)\.(patch|label|superpixels)$")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    section = None
    seen: dict[tuple, int] = {}
    run: dict = {}
    params: dict[str, dict] = {name: {} for name in _PARAM_SECTIONS}
    kinds: dict[str, str] = {}
    levels: dict[int, dict] = {}
    lines: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("malformed section header", source, n)
            section = line[1:-1].strip()
            if section not in ("run", "tree", "schedule", *_PARAM_SECTIONS):
                raise ConfigError(f"unknown section [{section}]", source, n)
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", source, n)
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ConfigError("key outside of any section", source, n, key)
        if not value:
            raise ConfigError("empty value", source, n, key)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[(section, key)]})", source, n, key)
        seen[(section, key)] = n
        lines[f"{section}.{key}"] = n
        try:
            if section == "run":
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key; expected one of {', '.join(_RUN_KEYS)}", source, n, key)
                run[key] = _RUN_KEYS[key](value)
            elif section == "tree":
                m = _NODE_RE.match(key)
                if not m:
                    raise ConfigError("expected node.<path>.kind with path root(.L|.R)*", source, n, key)
                if value not in KINDS:
                    raise ConfigError(f"unknown classifier kind {value!r}; expected srf or bn", source, n, key)
                kinds[m.group(1)] = value
            elif section == "schedule":
                m = _LEVEL_RE.match(key)
                if not m:
                    raise ConfigError("expected level.<d>.patch|label|superpixels", source, n, key)
                levels.setdefault(int(m.group(1)), {})[m.group(2)] = int(value)
            else:
                conv = _converters(_PARAM_SECTIONS[section])
                if key not in conv or key in _INTERNAL:
                    allowed = ", ".join(k for k in conv if k not in _INTERNAL)
                    raise ConfigError(f"unknown key; expected one of {allowed}", source, n, key)
                params[section][key] = conv[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", source, n, key) from None
    return _assemble(run, params, kinds, levels, lines, source)


def _assemble(run, params, kinds, levels, lines, source) -> RunConfig:
    def fail(msg, key):
        raise ConfigError(msg, source, lines.get(key), key.split(".", 1)[1] if key in lines else None)

    method = run.get("method", "dmt")
    if method not in METHODS:
        fail(f"unknown method {method!r}; expected one of {', '.join(METHODS)}", "run.method")
    depth = run.get("depth", 2)
    if depth < 0:
        fail("depth must be >= 0", "run.depth")
    built = {}
    for name, cls in _PARAM_SECTIONS.items():
        try:
            built[name] = replace(cls(), **params[name])
        except (ValueError, TypeError) as exc:
            first = min((lines[f"{name}.{k}"] for k in params[name]), default=None)
            raise ConfigError(f"invalid [{name}] parameters: {exc}", source, first) from None
    try:
        dmt_cfg = DmtConfig(n_classes=run.get("classes", 4), srf=built["srf"], bn=built["bn"],
                            slic=built["slic"], features=built["features"],
                            rounds=run.get("rounds", 1), seed=run.get("seed", 0))
    except ValueError as exc:
        raise ConfigError(str(exc), source) from None
    for pos in kinds:
        if level_of(pos) > depth:
            fail(f"node {pos} is deeper than the tree (depth {depth})", f"tree.node.{pos}.kind")
    try:
        spec = TreeSpec(depth, tuple(kinds.items()))
    except ValueError as exc:
        raise ConfigError(str(exc), source) from None
    base = list(ScaleSchedule.multiscale(depth).levels)
    for lvl, entry in sorted(levels.items()):
        if lvl > depth:
            fail(f"level {lvl} is deeper than the tree (depth {depth})", f"schedule.level.{lvl}.{next(iter(entry))}")
        cur = base[lvl]
        base[lvl] = ScaleEntry(entry.get("patch", cur.feature_patch_side), entry.get("label", cur.label_patch_side),
                               entry.get("superpixels", cur.target_superpixels))
    try:
        schedule = ScaleSchedule(tuple(base))
    except ValueError as exc:
        raise ConfigError(str(exc), source) from None
    return RunConfig(method, dmt_cfg, spec, schedule)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def render_config(rc: RunConfig) -> str:
    """Text form of a run configuration; parsing it back gives the same configuration."""
    out = ["[run]", f"method = {rc.method}", f"seed = {rc.dmt.seed}", f"classes = {rc.dmt.n_classes}",
           f"depth = {rc.spec.depth}", f"rounds = {rc.dmt.rounds}", "", "[tree]"]
    out += [f"node.{pos}.kind = {kind}" for pos, kind in rc.spec.kinds]
    out += ["", "[schedule]"]
    for lvl, e in enumerate(rc.schedule.levels):
        out += [f"level.{lvl}.patch = {e.feature_patch_side}", f"level.{lvl}.label = {e.label_patch_side}",
                f"level.{lvl}.superpixels = {e.target_superpixels}"]
    for name in _PARAM_SECTIONS:
        obj = {"srf": rc.dmt.srf, "bn": rc.dmt.bn, "slic": rc.dmt.slic, "features": rc.dmt.features}[name]
        out += ["", f"[{name}]"]
        for f in dataclasses.fields(obj):
            if f.name in _INTERNAL:
                continue
            v = getattr(obj, f.name)
            if f.name == "gabor_wavelengths":
                v = ", ".join(repr(float(x)) for x in v)
            elif f.name == "dog_sigma_pairs":
                v = ", ".join(f"{float(a)!r}:{float(b)!r}" for a, b in v)
            out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
