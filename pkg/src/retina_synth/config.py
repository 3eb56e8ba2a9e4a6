"""Run configuration: a YAML file with strict key checking.

Every key is optional; missing ones take the defaults shown by
``retina-synth --print-config``. Unknown keys are rejected with the file
line they appear on.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .artifacts import AugmentationPipeline, default_pipeline
from .raster import DEFAULT_SHAPE_3D
from .retina import LayerSurfaces, RetinaSpec
from .vessel_graph import PlexusConfig, dvc_config, svc_config

FORMATS = ("png", "raw")
UINT64 = 2**64


class ConfigError(ValueError):
    """Parse or validation failure; the message names file, line and key when known."""


@dataclass
class RetinaSection:
    faz_radius: float = 350.0
    n_stumps: int = 8
    p_sprout: float = 0.05
    faz_eccentricity: float = 0.15
    stump_jitter: float = 0.25
    surfaces: str | None = None
    svc: PlexusConfig = field(default_factory=svc_config)
    dvc: PlexusConfig = field(default_factory=dvc_config)

    def spec(self, seed: int, base_dir: Path | None = None) -> RetinaSpec:
        surfaces = None
        if self.surfaces:
            path = Path(self.surfaces)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            surfaces = LayerSurfaces.load(path)
        return RetinaSpec(self.svc, self.dvc, self.faz_radius, self.n_stumps, surfaces, seed,
                          self.p_sprout, self.faz_eccentricity, self.stump_jitter)

    def to_dict(self) -> dict:
        return {
            "faz_radius": self.faz_radius,
            "n_stumps": self.n_stumps,
            "p_sprout": self.p_sprout,
            "faz_eccentricity": self.faz_eccentricity,
            "stump_jitter": self.stump_jitter,
            "surfaces": self.surfaces,
            "svc": self.svc.to_dict(),
            "dvc": self.dvc.to_dict(),
        }


@dataclass
class RasterSection:
    shape: tuple = DEFAULT_SHAPE_3D  # voxels; the en-face image uses the first two

    def to_dict(self) -> dict:
        return {"shape": list(self.shape)}


@dataclass
class OutputSection:
    dir: str = "out"
    format: str = "png"
    write_2d: bool = True
    write_3d: bool = False

    def to_dict(self) -> dict:
        return {"dir": self.dir, "format": self.format, "write_2d": self.write_2d, "write_3d": self.write_3d}


@dataclass
class RunConfig:
    retina: RetinaSection = field(default_factory=RetinaSection)
    raster: RasterSection = field(default_factory=RasterSection)
    augment: AugmentationPipeline = field(default_factory=default_pipeline)
    output: OutputSection = field(default_factory=OutputSection)
    n_samples: int = 1
    master_seed: int = 0
    workers: int = 1
    base_dir: Path | None = None  # where relative paths in the file resolve

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "n_samples": self.n_samples,
            "workers": self.workers,
            "retina": self.retina.to_dict(),
            "raster": self.raster.to_dict(),
            "augment": self.augment.to_dict(),
            "output": self.output.to_dict(),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def content_dict(self) -> dict:
        """The part of the config that decides output bytes (not where or how fast)."""
        d = self.to_dict()
        del d["workers"]
        d["output"] = {k: v for k, v in d["output"].items() if k != "dir"}
        return d

    def digest(self) -> str:
        text = json.dumps(self.content_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        out = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(out, k, v)
        validate(out)
        return out


# ---------------------------------------------------------------------------
# YAML with line numbers


def _compose(text: str, source: str):
    try:
        return yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {exc.problem or exc.context}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _to_python(node, source: str, lines: dict, path: tuple = ()):
    """Plain data from a composed node; records the line of every key."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value if isinstance(k, yaml.ScalarNode) else None
            if key is None:
                raise ConfigError(f"{source}:{k.start_mark.line + 1}: keys must be strings")
            if key in out:
                raise ConfigError(f"{source}:{k.start_mark.line + 1}: duplicate key {'.'.join(path + (key,))!r}")
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _to_python(v, source, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, source, lines, path + (i,)) for i, v in enumerate(node.value)]
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


class _Ctx:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def where(self, path: tuple) -> str:
        for n in range(len(path), 0, -1):
            if path[:n] in self.lines:
                return f"{self.source}:{self.lines[path[:n]]}"
        return self.source

    def fail(self, path: tuple, msg: str):
        name = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{self.where(path)}: {name}: {msg}")

    def section(self, doc, path: tuple, allowed) -> dict:
        if doc is None:
            return {}
        if not isinstance(doc, dict):
            self.fail(path, "expected a mapping")
        for key in doc:
            if key not in allowed:
                self.fail(path + (key,), f"unknown key {key!r}")
        return doc

    def number(self, doc, path, kind=float):
        v = doc
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, f"expected a number, got {v!r}")
        if kind is int:
            if int(v) != v:
                self.fail(path, f"expected an integer, got {v!r}")
            return int(v)
        return float(v)


_RETINA_KEYS = ("faz_radius", "n_stumps", "p_sprout", "faz_eccentricity", "stump_jitter", "surfaces", "svc", "dvc")
_PLEXUS_INT = {"m_b", "max_iterations", "n_scales"}


def _plexus(ctx: _Ctx, doc, path, base: PlexusConfig) -> PlexusConfig:
    known = base.to_dict()
    doc = ctx.section(doc, path, known)
    merged = dict(known)
    for k, v in doc.items():
        if k == "omega":
            if not isinstance(v, list) or len(v) != 3:
                ctx.fail(path + (k,), "expected a list of three extents")
            merged[k] = [ctx.number(x, path + (k,)) for x in v]
        else:
            merged[k] = ctx.number(v, path + (k,), int if k in _PLEXUS_INT else float)
    try:
        return PlexusConfig(**merged)
    except ValueError as exc:
        key = str(exc).split(":", 1)[0]
        ctx.fail(path + ((key,) if key in known else ()), str(exc))


def _from_doc(doc: Any, ctx: _Ctx) -> RunConfig:
    top = ctx.section(doc, (), ("master_seed", "n_samples", "workers", "retina", "raster", "augment", "output"))
    cfg = RunConfig()
    if "master_seed" in top:
        cfg.master_seed = ctx.number(top["master_seed"], ("master_seed",), int)
    if "n_samples" in top:
        cfg.n_samples = ctx.number(top["n_samples"], ("n_samples",), int)
    if "workers" in top:
        cfg.workers = ctx.number(top["workers"], ("workers",), int)

    r = ctx.section(top.get("retina"), ("retina",), _RETINA_KEYS)
    sec = RetinaSection()
    for key in ("faz_radius", "p_sprout", "faz_eccentricity", "stump_jitter"):
        if key in r:
            setattr(sec, key, ctx.number(r[key], ("retina", key)))
    if "n_stumps" in r:
        sec.n_stumps = ctx.number(r["n_stumps"], ("retina", "n_stumps"), int)
    if r.get("surfaces") is not None:
        if not isinstance(r["surfaces"], str):
            ctx.fail(("retina", "surfaces"), "expected a file path")
        sec.surfaces = r["surfaces"]
    sec.svc = _plexus(ctx, r.get("svc"), ("retina", "svc"), svc_config())
    sec.dvc = _plexus(ctx, r.get("dvc"), ("retina", "dvc"), dvc_config())
    cfg.retina = sec

    ras = ctx.section(top.get("raster"), ("raster",), ("shape",))
    if "shape" in ras:
        shape = ras["shape"]
        if not isinstance(shape, list) or len(shape) != 3:
            ctx.fail(("raster", "shape"), "expected three voxel counts [nx, ny, nz]")
        cfg.raster.shape = tuple(ctx.number(v, ("raster", "shape"), int) for v in shape)

    if top.get("augment") is not None:
        aug = ctx.section(top["augment"], ("augment",), ("master_seed", "steps"))
        steps = aug.get("steps", [])
        if not isinstance(steps, list):
            ctx.fail(("augment", "steps"), "expected a list of steps")
        for i, s in enumerate(steps):
            ctx.section(s, ("augment", "steps", i), ("kind", "params", "seed", "probability"))
        try:
            cfg.augment = AugmentationPipeline.from_dict(aug)
        except (ValueError, TypeError) as exc:
            ctx.fail(("augment",), str(exc))

    out = ctx.section(top.get("output"), ("output",), ("dir", "format", "write_2d", "write_3d"))
    for key in ("write_2d", "write_3d"):
        if key in out:
            if not isinstance(out[key], bool):
                ctx.fail(("output", key), "expected true or false")
            setattr(cfg.output, key, out[key])
    for key in ("dir", "format"):
        if key in out:
            if not isinstance(out[key], str):
                ctx.fail(("output", key), "expected a string")
            setattr(cfg.output, key, out[key])
    validate(cfg, ctx)
    return cfg


def validate(cfg: RunConfig, ctx: _Ctx | None = None) -> None:
    ctx = ctx or _Ctx("<config>", {})
    if cfg.n_samples < 1:
        ctx.fail(("n_samples",), f"must be >= 1, got {cfg.n_samples}")
    if not 0 <= cfg.master_seed < UINT64:
        ctx.fail(("master_seed",), "must be a 64-bit unsigned integer")
    if cfg.workers < 1:
        ctx.fail(("workers",), f"must be >= 1, got {cfg.workers}")
    if len(cfg.raster.shape) != 3 or min(cfg.raster.shape) < 1:
        ctx.fail(("raster", "shape"), "voxel counts must be positive")
    if cfg.output.format not in FORMATS:
        ctx.fail(("output", "format"), f"must be one of {', '.join(FORMATS)}")
    if not (cfg.output.write_2d or cfg.output.write_3d):
        ctx.fail(("output",), "enable write_2d or write_3d")
    if cfg.output.write_3d and cfg.output.format != "raw":
        ctx.fail(("output", "write_3d"), "3D volumes need format: raw")
    try:
        cfg.retina.spec(0, None) if cfg.retina.surfaces is None else None
    except ValueError as exc:
        key = str(exc).split(":", 1)[0]
        ctx.fail(("retina", key) if key in _RETINA_KEYS else ("retina",), str(exc))


def parse_config_text(text: str, source: str = "<string>", base_dir: Path | None = None) -> RunConfig:
    lines: dict = {}
    node = _compose(text, source)
    doc = {} if node is None else _to_python(node, source, lines)
    cfg = _from_doc(doc, _Ctx(source, lines))
    cfg.base_dir = base_dir
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config_text(text, str(path), path.parent)
