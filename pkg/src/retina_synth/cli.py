"""retina-synth command line.

Stages talk through files, so ``simulate``, ``rasterize`` and ``augment``
run in sequence reproduce ``generate`` byte for byte. Failures exit
non-zero with one JSON line on stderr: {"error": <type>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import os
import shutil
import sys
from pathlib import Path

from . import dataset as ds
from .config import ConfigError, RunConfig, parse_config, parse_config_text, validate
from .morphometry import analyze_forest, compare_complexes, plexus_forest
from .raster import RasterPair
from .vessel_graph import VesselForest, validate_document

logger = logging.getLogger("retina_synth")

WORKERS_ENV = "RETINA_SYNTH_WORKERS"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config resolution


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config_text("", "<defaults>")
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["master_seed"] = args.seed
    if getattr(args, "n", None) is not None:
        changes["n_samples"] = args.n
    workers = getattr(args, "workers", None)
    if workers is None and os.environ.get(WORKERS_ENV):
        try:
            workers = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {os.environ[WORKERS_ENV]!r}") from None
    if workers is not None:
        changes["workers"] = workers
    if getattr(args, "out", None):
        cfg.output.dir = args.out
    if getattr(args, "format", None):
        cfg.output.format = args.format
    for k, v in changes.items():
        setattr(cfg, k, v)
    validate(cfg)
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML run configuration")
    p.add_argument("--seed", type=int, metavar="N", help="override master_seed")
    p.add_argument("--n", type=int, metavar="N", help="override n_samples")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--workers", type=int, metavar="N", help=f"worker processes (fallback: ${WORKERS_ENV})")
    p.add_argument("--format", choices=("png", "raw"), help="2D image format")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
    with mp.get_context(method).Pool(min(workers, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)


def _copy_sidecars(src: Path, dst: Path, index: int) -> None:
    if src.resolve() == dst.resolve():
        return
    name = ds.sample_name(index)
    for suffix in ("_graph.json", "_meta.json"):
        if (src / f"{name}{suffix}").is_file():
            shutil.copyfile(src / f"{name}{suffix}", dst / f"{name}{suffix}")


# ---------------------------------------------------------------------------
# subcommands


class _Simulate:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg, self.out = cfg, out

    def __call__(self, index: int):
        try:
            forest, meta = ds.simulate_sample(self.cfg, index)
        except ds.SampleFailed as exc:
            return str(exc)
        ds.write_graph(self.out, index, forest, meta)
        return None


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    errors = [e for e in _map(_Simulate(cfg, out), range(cfg.n_samples), cfg.workers) if e]
    print(f"simulated {cfg.n_samples - len(errors)}/{cfg.n_samples} graphs into {out}")
    if errors:
        raise CliError(f"{len(errors)} samples failed: {errors[0]}")
    return 0


class _Rasterize:
    def __init__(self, cfg, src, out):
        self.cfg, self.src, self.out = cfg, src, out

    def __call__(self, index: int):
        forest = VesselForest.load(self.src / f"{ds.sample_name(index)}_graph.json")
        ds.write_clean(self.out, index, ds.rasterize_sample(self.cfg, forest))
        _copy_sidecars(self.src, self.out, index)


def cmd_rasterize(args, cfg: RunConfig) -> int:
    src = Path(args.input or cfg.output.dir)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = ds.sample_indices(src, "_graph.json")
    if not indices:
        raise CliError(f"no sample_*_graph.json files in {src}")
    _map(_Rasterize(cfg, src, out), indices, cfg.workers)
    print(f"rasterized {len(indices)} graphs into {out}")
    return 0


class _Augment:
    def __init__(self, cfg, src, out):
        self.cfg, self.src, self.out = cfg, src, out

    def __call__(self, index: int):
        name = ds.sample_name(index)
        img, lab = ds.clean_paths(self.src, index)
        volume = RasterPair.load_raw(img, lab)
        forest = VesselForest.load(self.src / f"{name}_graph.json")
        meta = json.loads((self.src / f"{name}_meta.json").read_text())
        flat, deep = ds.augment_sample(self.cfg, volume, forest, meta["sample_seed"])
        ds.write_outputs(self.out, index, self.cfg.output.format, flat, deep)
        _copy_sidecars(self.src, self.out, index)


def cmd_augment(args, cfg: RunConfig) -> int:
    src = Path(args.input or cfg.output.dir)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = ds.sample_indices(src, "_clean.raw")
    if not indices:
        raise CliError(f"no sample_*_clean.raw volumes in {src}")
    _map(_Augment(cfg, src, out), indices, cfg.workers)
    print(f"augmented {len(indices)} volumes into {out}")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    report = ds.generate_dataset(cfg, cfg.output.dir, cfg.workers)
    n_ok = cfg.n_samples - len(report.failed)
    print(f"{n_ok}/{cfg.n_samples} samples in {cfg.output.dir} "
          f"({report.generated} generated, {report.skipped} reused, {report.seconds:.1f} s)")
    if report.failed:
        raise CliError(f"{len(report.failed)} samples failed: {', '.join(report.failed)}")
    return 0


def _gamma_of(forest: VesselForest, cfg: RunConfig | None):
    g = forest.meta.get("gamma")
    if g:
        return g
    c = cfg or RunConfig()
    return {"svc": c.retina.svc.gamma, "dvc": c.retina.dvc.gamma}


def cmd_stats(args, cfg: RunConfig) -> int:
    path = Path(args.graph)
    forest = VesselForest.load(path)
    report = analyze_forest(forest, _gamma_of(forest, cfg))
    doc = {"forest": report.to_dict()}
    print(report.summary())
    have = set(forest.plexus.tolist())
    if have == {0, 1}:
        cmp = compare_complexes(plexus_forest(forest, "svc"), plexus_forest(forest, "dvc"))
        doc["complexes"] = cmp.to_dict()
        print(f"SVC direction change  {cmp.svc_direction_change:.2f} deg, branch angle {cmp.svc_branch_angle:.2f} deg")
        print(f"DVC direction change  {cmp.dvc_direction_change:.2f} deg, branch angle {cmp.dvc_branch_angle:.2f} deg")
        print(f"DVC exceeds SVC on both: {cmp.dvc_exceeds_svc}")
    dest = Path(args.json) if args.json else path.with_name(path.stem + "_stats.json")
    dest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"wrote {dest}")
    return 0


def _validate_one(path: Path) -> list[str]:
    if path.suffix in (".yaml", ".yml"):
        parse_config(path)
        return []
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return [f"{path}: {exc}"]
    if isinstance(doc, dict) and "samples" in doc and path.name == ds.MANIFEST:
        return [f"{path}: {name} does not match its checksums" for name in ds.verify_manifest(path.parent)]
    return [f"{path}: {v}" for v in validate_document(doc)]


def cmd_validate(args, cfg) -> int:
    problems = []
    for p in args.paths:
        problems += _validate_one(Path(p))
    for line in problems:
        print(line)
    if problems:
        raise CliError(f"{len(problems)} problems, first: {problems[0]}")
    print(f"{len(args.paths)} file(s) valid")
    return 0


def cmd_gallery(args, cfg: RunConfig) -> int:
    from .gallery import make_gallery

    doc = make_gallery(cfg, cfg.output.dir, args.index)
    for name, entry in doc["images"].items():
        print(f"{entry['file']:<24} {entry['look_for']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retina-synth", description="Synthetic retinal OCTA vessel data.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="grow vessel graphs only")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rasterize", help="graphs -> clean volumes")
    _common(p)
    p.add_argument("--input", metavar="DIR", help="directory with sample graphs (default: --out)")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("augment", help="clean volumes -> augmented images")
    _common(p)
    p.add_argument("--input", metavar="DIR", help="directory with clean volumes (default: --out)")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("generate", help="end-to-end dataset with manifest")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="morphometry of a graph file")
    _common(p)
    p.add_argument("graph", help="graph JSON")
    p.add_argument("--json", metavar="PATH", help="report path (default: <graph>_stats.json)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check graph, config or manifest files")
    _common(p)
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gallery", help="one example per artifact family")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="sample index to illustrate")
    p.set_defaults(func=cmd_gallery)
    return parser


def _fail(exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
    return 1 if not isinstance(exc, (ConfigError, CliError)) else 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        cfg = load_run_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_yaml())
            return 0
        return args.func(args, cfg)
    except (ConfigError, CliError, ds.ManifestMismatch, OSError, ValueError, KeyError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
