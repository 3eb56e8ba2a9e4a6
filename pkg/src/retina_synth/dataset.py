"""Seeded batch generation of image/label/graph samples.

Sample ``i`` of a run uses ``sample_seed(master_seed, i)``:

    s = splitmix64(splitmix64(master_seed) + i)      (mod 2**64)

so any worker can compute its own seed without touching a shared stream.
A sample whose simulation fails is retried once with
``splitmix64(s ^ RETRY_SALT)`` as the retina seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing as mp
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .angiogenesis import NonConvergenceError
from .artifacts import VOLUME_ONLY, KINDS, apply_pipeline
from .config import RunConfig
from .raster import RasterPair, enface_projection, rasterize_forest
from .retina import NoSproutsError, simulate_retina
from .vessel_graph import VesselForest

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1.0.0"
MASK64 = 0xFFFFFFFFFFFFFFFF
RETRY_SALT = 0xD1B54A32D192ED03
MANIFEST = "manifest.json"


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 generator (Steele, Lea and Flood)."""
    z = (int(x) + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_seed(master_seed: int, index: int) -> int:
    return splitmix64((splitmix64(master_seed) + int(index)) & MASK64)


def retry_seed(seed: int) -> int:
    return splitmix64(int(seed) ^ RETRY_SALT)


def sample_name(index: int) -> str:
    return f"sample_{index:06d}"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class SampleFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# stages


def simulate_sample(cfg: RunConfig, index: int) -> tuple[VesselForest, dict]:
    """Grow the retina for one sample, retrying once with a perturbed seed."""
    base = sample_seed(cfg.master_seed, index)
    seeds = [base, retry_seed(base)]
    errors = []
    for attempt, seed in enumerate(seeds, start=1):
        try:
            result = simulate_retina(cfg.retina.spec(seed, cfg.base_dir))
        except (NonConvergenceError, NoSproutsError) as exc:
            logger.warning("%s: seed %d failed (%s)", sample_name(index), seed, exc)
            errors.append(str(exc))
            continue
        # the graph file is the hand-off between stages; use its exact content
        forest = VesselForest.from_json(result.forest.to_json())
        meta = {
            "format_version": FORMAT_VERSION,
            "index": index,
            "sample_seed": base,
            "retina_seed": seed,
            "attempts": attempt,
            "n_nodes": len(forest),
            "svc_perfused_fraction": result.svc.perfused_fraction,
            "dvc_perfused_fraction": result.dvc.perfused_fraction,
            "faz": result.forest.meta.get("faz"),
        }
        return forest, meta
    raise SampleFailed(f"{sample_name(index)}: {' / '.join(errors)}")


def rasterize_sample(cfg: RunConfig, forest: VesselForest) -> RasterPair:
    """Clean volume, rounded to the float32 it is stored as between stages."""
    vol = rasterize_forest(forest, cfg.raster.shape)
    vol.image = vol.image.astype(np.float32).astype(float)
    return vol


def augment_sample(cfg: RunConfig, volume: RasterPair, forest: VesselForest, seed: int):
    """Returns (en-face pair or None, volume pair or None).

    Depth-dependent artifacts act on the volume before projection; the
    others act on whatever is written out.
    """
    pipe = cfg.augment
    flat = deep = None
    if cfg.output.write_2d:
        v = apply_pipeline(volume, forest, pipe, seed, kinds=VOLUME_ONLY)
        rest = tuple(k for k in KINDS if k not in VOLUME_ONLY)
        flat = apply_pipeline(enface_projection(v), forest, pipe, seed, kinds=rest)
    if cfg.output.write_3d:
        deep = apply_pipeline(volume, forest, pipe, seed)
    return flat, deep


# ---------------------------------------------------------------------------
# files


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_graph(out: Path, index: int, forest: VesselForest, meta: dict) -> list[Path]:
    name = sample_name(index)
    g, m = out / f"{name}_graph.json", out / f"{name}_meta.json"
    forest.save(g)
    _write_json(m, meta)
    return [g, m]


def clean_paths(out: Path, index: int) -> tuple[Path, Path]:
    name = sample_name(index)
    return out / f"{name}_clean.raw", out / f"{name}_clean_label.raw"


def write_clean(out: Path, index: int, volume: RasterPair) -> list[Path]:
    img, lab = clean_paths(out, index)
    volume.save_raw(img, lab)
    return [img, lab]


def write_outputs(out: Path, index: int, fmt: str, flat: RasterPair | None, deep: RasterPair | None) -> list[Path]:
    name = sample_name(index)
    files = []
    if flat is not None:
        if fmt == "png":
            img, lab = out / f"{name}_image.png", out / f"{name}_label.png"
            flat.save_png(img, lab)
            files += [img, lab]
        else:
            img, lab = out / f"{name}_image.raw", out / f"{name}_label.raw"
            flat.save_raw(img, lab)
            files += [img, lab, Path(str(img) + ".json"), Path(str(lab) + ".json")]
    if deep is not None:
        img, lab = out / f"{name}_volume.raw", out / f"{name}_volume_label.raw"
        deep.save_raw(img, lab)
        files += [img, lab, Path(str(img) + ".json"), Path(str(lab) + ".json")]
    return files


def sample_indices(directory: Path, suffix: str) -> list[int]:
    out = []
    for p in sorted(directory.glob(f"sample_*{suffix}")):
        stem = p.name[len("sample_"): -len(suffix)]
        if stem.isdigit():
            out.append(int(stem))
    return out


# ---------------------------------------------------------------------------
# end-to-end generation


def generate_sample(cfg: RunConfig, index: int, out: Path) -> dict:
    t0 = time.perf_counter()
    forest, meta = simulate_sample(cfg, index)
    files = write_graph(out, index, forest, meta)
    vol = rasterize_sample(cfg, forest)
    flat, deep = augment_sample(cfg, vol, forest, meta["sample_seed"])
    files += write_outputs(out, index, cfg.output.format, flat, deep)
    logger.debug("%s: %.1f s", sample_name(index), time.perf_counter() - t0)
    return {
        "index": index,
        "name": sample_name(index),
        "status": "ok",
        "sample_seed": meta["sample_seed"],
        "retina_seed": meta["retina_seed"],
        "attempts": meta["attempts"],
        "files": {p.name: sha256_file(p) for p in sorted(files)},
    }


_WORKER_CFG: RunConfig | None = None
_WORKER_OUT: Path | None = None


def _init_worker(cfg: RunConfig, out: Path) -> None:
    global _WORKER_CFG, _WORKER_OUT
    _WORKER_CFG, _WORKER_OUT = cfg, out


def _work(index: int) -> dict:
    try:
        return generate_sample(_WORKER_CFG, index, _WORKER_OUT)
    except SampleFailed as exc:
        return {"index": index, "name": sample_name(index), "status": "failed", "error": str(exc)}


def _manifest(cfg: RunConfig, entries: dict) -> dict:
    samples = [entries[i] for i in sorted(entries)]
    return {
        "format_version": FORMAT_VERSION,
        "config_sha256": cfg.digest(),
        "config": cfg.content_dict(),
        "master_seed": cfg.master_seed,
        "n_samples": cfg.n_samples,
        "complete": len(samples) == cfg.n_samples and all(s["status"] == "ok" for s in samples),
        "samples": samples,
    }


def write_manifest(out: Path, manifest: dict) -> None:
    tmp = out / (MANIFEST + ".tmp")
    _write_json(tmp, manifest)
    os.replace(tmp, out / MANIFEST)


def verify_sample(out: Path, entry: dict) -> bool:
    if entry.get("status") != "ok":
        return False
    for name, digest in entry.get("files", {}).items():
        p = out / name
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


def verify_manifest(out) -> list[str]:
    """Names of samples whose files are missing or do not match their checksums."""
    out = Path(out)
    doc = json.loads((out / MANIFEST).read_text())
    return [e["name"] for e in doc["samples"] if not verify_sample(out, e)]


class ManifestMismatch(RuntimeError):
    pass


def _resume(cfg: RunConfig, out: Path) -> dict:
    path = out / MANIFEST
    if not path.is_file():
        return {}
    doc = json.loads(path.read_text())
    if doc.get("config_sha256") != cfg.digest():
        raise ManifestMismatch(f"{out} holds samples from a different configuration; use a fresh --out")
    kept = {}
    for e in doc.get("samples", []):
        if e["index"] < cfg.n_samples and verify_sample(out, e):
            kept[e["index"]] = e
    return kept


@dataclass
class GenerateReport:
    manifest: dict
    generated: int
    skipped: int
    seconds: float

    @property
    def failed(self) -> list[str]:
        return [s["name"] for s in self.manifest["samples"] if s["status"] != "ok"]


def generate_dataset(cfg: RunConfig, out=None, workers: int | None = None) -> GenerateReport:
    """Write every sample plus manifest.json; samples already verified on disk are kept."""
    out = Path(out if out is not None else cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = int(workers or cfg.workers)
    entries = _resume(cfg, out)
    todo = [i for i in range(cfg.n_samples) if i not in entries]
    skipped = len(entries)
    if skipped:
        logger.info("resuming: %d of %d samples already present", skipped, cfg.n_samples)
    t0 = time.perf_counter()
    done = 0

    def record(entry):
        nonlocal done
        entries[entry["index"]] = entry
        done += 1
        write_manifest(out, _manifest(cfg, entries))
        rate = done / max(time.perf_counter() - t0, 1e-9)
        logger.info("%s %s (%d/%d, %.3f samples/s)", entry["name"], entry["status"], done, len(todo), rate)

    try:
        if workers <= 1 or len(todo) <= 1:
            _init_worker(cfg, out)
            for i in todo:
                record(_work(i))
        else:
            method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
            ctx = mp.get_context(method)
            with ctx.Pool(min(workers, len(todo)), initializer=_init_worker, initargs=(cfg, out)) as pool:
                for entry in pool.imap_unordered(_work, todo, chunksize=1):
                    record(entry)
    finally:
        manifest = _manifest(cfg, entries)
        write_manifest(out, manifest)
    return GenerateReport(manifest, len(todo), skipped, time.perf_counter() - t0)
