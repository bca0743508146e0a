"""End-to-end counting run over a directory of images.

Stages, in order: superpixels, network training, organ-channel choice,
per-image mask optimisation, dataset-level watershed search, export.
Superpixels, trained weights and the channel choice are cached under
``<out>/cache`` keyed by a fingerprint of the inputs and configuration, so
an interrupted run resumes without redoing them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import distfit, maskopt, morphtools, tinynet, unsupseg
from .config import PipelineConfig
from .slic import slic_segment
from .types import LabelMap, load_image, save_label_map, save_mask, save_probability_map

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_SCHEMA = "autocount.manifest/1"


class EmptyDataset(ValueError):
    pass


def list_images(dataset_dir) -> list:
    d = Path(dataset_dir)
    if not d.is_dir():
        raise EmptyDataset(f"dataset directory {str(d)!r} does not exist")
    paths = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise EmptyDataset(f"no PNG/JPEG images found in {str(d)!r}")
    return paths


@dataclass
class ImageRecord:
    filename: str
    count: int
    mask_params: dict
    mask_loss: float
    before: dict
    after: dict


@dataclass
class RunManifest:
    config: dict
    channel: dict
    watershed: dict
    training: dict
    timings: dict
    images: list = field(default_factory=list)
    schema: str = MANIFEST_SCHEMA

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _summary(sizes) -> dict:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        return {"n": 0, "mean": None, "std": None}
    return {"n": int(sizes.size), "mean": float(sizes.mean()), "std": float(sizes.std())}


class _Timer:
    def __init__(self):
        self.stages = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0


def _slic_job(args):
    image, params, seed = args
    return slic_segment(image, params, seed)


def _mask_job(args):
    k, grid, budget, seed = args
    return maskopt.optimize_mask(k, grid, budget, seed)


@contextmanager
def _mapper(jobs: int):
    if jobs <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield pool.map


def _fingerprint(paths, cfg: PipelineConfig) -> str:
    h = hashlib.sha256()
    snap = cfg.snapshot()
    snap.pop("jobs", None)
    h.update(json.dumps(snap, sort_keys=True, default=str).encode())
    for p in paths:
        h.update(p.name.encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _prepare_cache(out_dir: Path, fingerprint: str) -> Path:
    cache = out_dir / "cache"
    stamp = cache / "fingerprint"
    if cache.exists() and (not stamp.exists() or stamp.read_text().strip() != fingerprint):
        shutil.rmtree(cache)
    cache.mkdir(parents=True, exist_ok=True)
    stamp.write_text(fingerprint + "\n")
    return cache


def run_pipeline(dataset_dir, cfg: PipelineConfig, out_dir) -> RunManifest:
    t_start = time.perf_counter()
    timer = _Timer()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with timer.stage("load"):
        paths = list_images(dataset_dir)
        images = [load_image(p) for p in paths]
        cache = _prepare_cache(out, _fingerprint(paths, cfg))
    log.info("%d images from %s", len(images), dataset_dir)

    with _mapper(cfg.jobs) as pmap:
        with timer.stage("superpixels"):
            sp_file = cache / "superpixels.npz"
            if sp_file.exists():
                with np.load(sp_file) as z:
                    superpixels = [z[f"sp{i}"] for i in range(len(images))]
            else:
                superpixels = list(pmap(_slic_job, [(im, cfg.slic, cfg.seed) for im in images]))
                np.savez_compressed(sp_file, **{f"sp{i}": s for i, s in enumerate(superpixels)})

        with timer.stage("train"):
            w_file, t_file = cache / "net.bin", cache / "training.json"
            if w_file.exists() and t_file.exists():
                net = tinynet.load_weights(w_file)
                training = json.loads(t_file.read_text())
            else:
                result = unsupseg.train_unsupervised(images, superpixels, cfg.net)
                net = result.net
                training = {"steps": result.steps, "stopped_early": result.stopped_early,
                            "final_labels": result.n_labels[-1]}
                tinynet.save_weights(net, w_file)
                t_file.write_text(json.dumps(training))

        with timer.stage("channel"):
            c_file = cache / "channel.json"
            if cfg.channel != "auto":
                channel = {"mode": "fixed", "selected": int(cfg.channel), "candidates": [int(cfg.channel)],
                           "losses": {}}
            elif c_file.exists():
                channel = json.loads(c_file.read_text())
            else:
                sel = distfit.select_organ_channel(
                    net, images, cfg.mask_grid, cfg.mask_budget, cfg.a_grid, cfg.b_grid,
                    cfg.channel_min_fraction, cfg.channel_sample_images, cfg.seed, cfg.quantiles,
                    mapper=pmap,
                )
                channel = {"mode": "auto", "selected": sel.channel, "candidates": sel.candidates,
                           "losses": {str(k): v for k, v in sel.losses.items()}}
                c_file.write_text(json.dumps(channel))
            c = channel["selected"]
            log.info("organ channel %d (%s)", c, channel["mode"])

        with timer.stage("masks"):
            pmaps = [unsupseg.infer_probability_map(net, im, c) for im in images]
            jobs = [(np.asarray(k), cfg.mask_grid, cfg.mask_budget, cfg.seed + i) for i, k in enumerate(pmaps)]
            mask_results = list(pmap(_mask_job, jobs))

    with timer.stage("watershed"):
        search = distfit.search_watershed_params([r.mask for r in mask_results], cfg.a_grid, cfg.b_grid,
                                                 cfg.quantiles)
    log.info("watershed a=%d b=%g loss=%.6g", search.params.min_size, search.params.min_distance, search.loss)

    with timer.stage("export"):
        records = _export(out, paths, pmaps, mask_results, search)

    timings = dict(timer.stages)
    timings["total"] = time.perf_counter() - t_start
    manifest = RunManifest(
        config=cfg.snapshot(),
        channel=channel,
        watershed={"a": search.params.min_size, "b": search.params.min_distance, "loss": search.loss},
        training=training,
        timings=timings,
        images=[asdict(r) for r in records],
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def _export(out: Path, paths, pmaps, mask_results, search) -> list:
    for sub in ("instances", "probability", "masks"):
        (out / sub).mkdir(exist_ok=True)
    records = []
    size_rows, fit_rows = [], []
    for path, pm, mr, inst in zip(paths, pmaps, mask_results, search.instances):
        name = path.stem + ".png"
        save_label_map(LabelMap(inst), out / "instances" / name)
        save_probability_map(pm, out / "probability" / name)
        save_mask(mr.mask, out / "masks" / name)
        before = morphtools.connected_components(mr.mask)[1]
        after = morphtools.region_sizes(inst)
        for stage, sizes in (("before", before), ("after", after)):
            size_rows += [(path.name, stage, int(a)) for a in sizes]
            fit_rows.append((path.name, stage, *_fit_values(sizes)))
        records.append(ImageRecord(path.name, int(inst.max()), asdict(mr.params), float(mr.loss),
                                   _summary(before), _summary(after)))

    with open(out / "counts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "count"])
        w.writerows((r.filename, r.count) for r in records)
    with open(out / "sizes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "stage", "area"])
        w.writerows(size_rows)
    with open(out / "fits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "stage", "mu", "sigma", "alpha", "beta"])
        w.writerows(fit_rows)
    return records


def _fit_values(sizes):
    try:
        nf = distfit.fit_normal(sizes)
    except distfit.DegenerateDistribution:
        return ("", "", "", "")
    try:
        gf = distfit.fit_gamma(sizes)
        return (repr(nf.mu), repr(nf.sigma), repr(gf.alpha), repr(gf.beta))
    except distfit.DegenerateDistribution:
        return (repr(nf.mu), repr(nf.sigma), "", "")


def read_counts(path) -> dict:
    """Read a ``filename,count`` CSV into a dict."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "count"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected a header with 'filename' and 'count'")
        return {row["filename"]: float(row["count"]) for row in reader}
