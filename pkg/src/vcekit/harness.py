"""Experiment orchestration: plans generation jobs, shards them over a
worker pool, streams records to disk, aggregates per-group metrics, and
emits CSV/JSON/markdown/PGM reports.

Layout under the output directory:

    manifest.json              batch plan, per-record seeds, timings, artifacts
    models/                    default checkpoint location (config-overridable)
    records/<job>--bNNN.vcb    one tensor container per generated batch
    reports/summary.csv|json|md   aggregated tables
    reports/deltas.csv         ablation deltas (variant minus base)
    grids/<job>.pgm            3-row image grids (hit / insufficient / failed)

Determinism contract: identical config + base seed produce byte-identical
record files and byte-identical CSV/JSON reports.  Per-record seeds are
hashes of the base seed and a stable record key, so a record's noise
stream never depends on batch size, worker count, or sibling records.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dumps_config, loads_config
from .data import LabeledDataset, load_mnist16, split_stratified, synth_shapes
from .diffusion import NoiseSchedule, derive_seed, make_schedule
from .guidance import ConeConfig, CounterfactualRecord, GuidanceConfig, generate_vce_batch
from .metrics import MetricError, evaluate_group
from .models import (TrainParams, load_model, load_tensors, save_classifier,
                     save_denoiser, save_tensors, train_classifier, train_denoiser)

MANIFEST_VERSION = 1
SCALAR_METRICS = ("TA", "OA", "other", "OTA_committee", "D1", "D1.5", "D2",
                  "LPIPS", "FID", "failed_rate", "rejected_rate")
MINIMAL_METRICS = ("TA", "OTA_committee", "LPIPS", "FID")
REPORT_FORMATS = ("csv", "json", "markdown", "pgm")


class HarnessError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# datasets and models
# ---------------------------------------------------------------------------


def load_splits(cfg: ExperimentConfig) -> tuple:
    """Train/val split of the configured dataset (deterministic in its seed)."""
    ds = cfg.dataset
    if ds.kind == "shapes":
        full = synth_shapes(ds.seed, ds.per_class, ds.resolution)
    else:
        full = load_mnist16(ds.train_images, ds.train_labels)
    return split_stratified(full, ds.val_fraction, ds.seed)


def required_models(cfg: ExperimentConfig) -> tuple:
    ms = cfg.models
    names = set(ms.subjects) | set(ms.committee) | {ms.robust, ms.featurenet}
    return ("denoiser",) + tuple(sorted(names))


def model_path(cfg: ExperimentConfig, name: str) -> Path:
    fname = "denoiser.vceb" if name == "denoiser" else f"clf_{name}.vceb"
    return Path(cfg.models_dir()) / fname


def _train_seed(cfg: ExperimentConfig, name: str) -> int:
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return derive_seed(cfg.dataset.seed, tag)


def make_noise_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.t_steps, d.beta_start, d.beta_end)


def load_models(cfg: ExperimentConfig) -> dict:
    """Load every referenced checkpoint; missing files fail before generation."""
    missing = [str(model_path(cfg, n)) for n in required_models(cfg)
               if not model_path(cfg, n).exists()]
    if missing:
        raise HarnessError(
            "missing model checkpoints (run train-denoiser / train-classifiers "
            "first): " + ", ".join(missing))
    return {name: load_model(model_path(cfg, name)) for name in required_models(cfg)}


def train_one(cfg: ExperimentConfig, name: str, train_ds: LabeledDataset, log=None) -> Path:
    """(Re)train one model from the roster and save its checkpoint."""
    say = log or (lambda *_: None)
    ms = cfg.models
    path = model_path(cfg, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if name == "denoiser":
        sched = make_noise_schedule(cfg)
        hyper = TrainParams(epochs=ms.denoiser_epochs, batch_size=ms.batch_size, lr=ms.lr)
        model = train_denoiser(train_ds, sched, hyper, _train_seed(cfg, name))
        save_denoiser(model, path)
    else:
        hyper = TrainParams(epochs=ms.classifier_epochs, batch_size=ms.batch_size, lr=ms.lr)
        model = train_classifier(train_ds, name, hyper, _train_seed(cfg, name),
                                 noise_sigma_max=ms.noise_sigma_max)
        save_classifier(model, path)
    say(f"[train] {name}: saved {path} ({time.perf_counter() - t0:.1f}s)")
    return path


def ensure_models(cfg: ExperimentConfig, train_ds: LabeledDataset = None, log=None) -> dict:
    """Train and save any missing checkpoint, then load the full roster."""
    todo = [n for n in required_models(cfg) if not model_path(cfg, n).exists()]
    if todo:
        if train_ds is None:
            train_ds, _ = load_splits(cfg)
        for name in todo:
            train_one(cfg, name, train_ds, log=log)
    return load_models(cfg)


# ---------------------------------------------------------------------------
# job planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """One cell of the ablation grid: guidance toggles plus target policy."""

    name: str
    cone: bool
    x0: bool
    targets: str  # "ideal" | "nonideal"


def base_variant(cfg: ExperimentConfig) -> Variant:
    return Variant("base", cfg.guidance.cone, cfg.guidance.use_x0_prediction, "ideal")


def ablation_variants() -> tuple:
    return (Variant("base", True, True, "ideal"),
            Variant("no_cone", False, True, "ideal"),
            Variant("no_x0", True, False, "ideal"),
            Variant("no_cone_no_x0", False, False, "ideal"),
            Variant("nonideal", True, True, "nonideal"))


@dataclass(frozen=True)
class Job:
    """One generation group: a subject, a source→target pair, and flags."""

    key: str
    subject: str
    variant: str
    cone: bool
    x0: bool
    source: int
    target: int
    source_name: str
    target_name: str
    records: tuple  # ((record_idx, original_idx, seed), ...)


def _record_seed(base_seed: int, subject: str, source_name: str,
                 target_name: str, original_idx: int) -> int:
    # flags deliberately excluded: ablation variants of the same record
    # share one noise stream, so comparisons are paired
    key = f"{subject}|{source_name}|{target_name}|{original_idx}"
    tag = int.from_bytes(hashlib.sha256(key.encode()).digest()[:6], "little")
    return derive_seed(base_seed, tag)


def _pairs_for(cfg: ExperimentConfig, class_names: tuple, kind: str) -> list:
    pair_map = cfg.pair_map
    for name in list(pair_map) + list(pair_map.values()):
        if name not in class_names:
            raise ConfigError(f"pair class {name!r} not in dataset classes {class_names}")
    pairs = []
    for src, ideal in cfg.ideal_pairs:
        if kind == "ideal":
            pairs.append((src, ideal))
        else:
            pairs.extend((src, tgt) for tgt in class_names if tgt not in (src, ideal))
    return pairs


def plan_jobs(cfg: ExperimentConfig, val: LabeledDataset, variants) -> list:
    """Deterministic job list; per-record seeds depend only on config + base seed."""
    names = val.class_names
    jobs = []
    for subject in cfg.models.subjects:
        for variant in variants:
            for src_name, tgt_name in _pairs_for(cfg, names, variant.targets):
                src, tgt = names.index(src_name), names.index(tgt_name)
                available = int((val.labels == src).sum())
                n = min(cfg.harness.originals_per_class, available)
                if n == 0:
                    raise HarnessError(f"no validation images of class {src_name!r}")
                records = tuple(
                    (i, i, _record_seed(cfg.harness.seed, subject, src_name, tgt_name, i))
                    for i in range(n))
                key = f"{subject}__{variant.name}__{src_name}-to-{tgt_name}"
                jobs.append(Job(key=key, subject=subject, variant=variant.name,
                                cone=variant.cone, x0=variant.x0, source=src, target=tgt,
                                source_name=src_name, target_name=tgt_name, records=records))
    return jobs


# ---------------------------------------------------------------------------
# generation workers
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _generation_context(cfg: ExperimentConfig, models: dict, sched: NoiseSchedule,
                        val: LabeledDataset) -> dict:
    return {
        "models": models,
        "sched": sched,
        "originals": {c: val.of_class(c) for c in range(val.n_classes)},
        "guidance": cfg.guidance,
        "robust": cfg.models.robust,
    }


def _guidance_config(task_cone: bool, task_x0: bool, gd, models, robust: str) -> GuidanceConfig:
    cone = ConeConfig(models[robust], gd.half_angle_deg) if task_cone else None
    return GuidanceConfig(scale_s=gd.scale_s, use_x0_prediction=task_x0, cone=cone,
                          start_fraction=gd.start_fraction, seed=0,
                          reject_invalid=gd.reject_invalid, clamp_x0=gd.clamp_x0)


def _run_batch(task: dict):
    """Worker body: generate one batch and return plain arrays."""
    ctx = _CTX
    models = ctx["models"]
    originals = ctx["originals"][task["source"]][list(task["original_idx"])]
    gcfg = _guidance_config(task["cone"], task["x0"], ctx["guidance"], models, ctx["robust"])
    n = len(task["seeds"])
    t0 = time.perf_counter()
    recs = generate_vce_batch(originals, [task["source"]] * n, [task["target"]] * n,
                              models[task["subject"]], models["denoiser"], ctx["sched"],
                              gcfg, list(task["seeds"]))
    wall = time.perf_counter() - t0
    payload = {
        "originals": originals.astype(np.float32),
        "generated": np.stack([r.generated for r in recs]).astype(np.float32),
        "log_probs": np.stack([r.subject_log_probs for r in recs]).astype(np.float32),
        "predicted": np.array([r.predicted_label for r in recs], dtype=np.float32),
        "failed": np.array([r.failed for r in recs], dtype=np.float32),
        "rejected": np.array([r.rejected for r in recs], dtype=np.float32),
        "record_idx": np.array(task["record_idx"], dtype=np.float32),
        "original_idx": np.array(task["original_idx"], dtype=np.float32),
    }
    return task["key"], task["batch"], payload, wall


def _batch_name(key: str, batch: int) -> str:
    return f"{key}--b{batch:03d}"


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_manifest(manifest: dict, out_dir) -> Path:
    path = Path(out_dir) / "manifest.json"
    _write_atomic(path, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return path


def manifest_digest(manifest: dict) -> str:
    """Hash of the reproducibility-relevant subset (plan, seeds, config)."""
    core = {k: manifest[k] for k in ("version", "config_hash", "seed", "jobs")}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()


def _fresh_manifest(cfg: ExperimentConfig, jobs: list, variants) -> dict:
    gd = cfg.guidance
    job_entries = {}
    for job in jobs:
        job_entries[job.key] = {
            "subject": job.subject, "variant": job.variant,
            "cone": job.cone, "x0": job.x0,
            "source": job.source, "target": job.target,
            "source_name": job.source_name, "target_name": job.target_name,
            "n_records": len(job.records),
            "batch_size": cfg.harness.batch,
            "n_batches": (len(job.records) + cfg.harness.batch - 1) // cfg.harness.batch,
            "records": [list(r) for r in job.records],
            "guidance": {"scale_s": gd.scale_s, "use_x0_prediction": job.x0,
                         "cone": cfg.models.robust if job.cone else None,
                         "half_angle_deg": gd.half_angle_deg,
                         "start_fraction": gd.start_fraction,
                         "reject_invalid": gd.reject_invalid, "clamp_x0": gd.clamp_x0},
        }
    return {"version": MANIFEST_VERSION,
            "format": {"package": "vcekit", "records": "vceb-v1"},
            "config_hash": cfg.config_hash(),
            "config_text": dumps_config(cfg),
            "seed": cfg.harness.seed,
            "variants": [v.name for v in variants],
            "jobs": job_entries,
            "completed": [], "timings": {}, "artifacts": []}


def _load_resume(resume_path, cfg: ExperimentConfig, manifest: dict, records_dir: Path) -> None:
    prior = json.loads(Path(resume_path).read_text())
    if prior.get("config_hash") != cfg.config_hash():
        raise ConfigError("resume manifest was produced by a different config "
                          f"(hash {prior.get('config_hash', '?')[:12]} != "
                          f"{cfg.config_hash()[:12]})")
    keep = []
    for entry in prior.get("completed", []):
        key = entry.rsplit("--b", 1)[0]
        if key in manifest["jobs"] and (records_dir / f"{entry}.vcb").exists():
            keep.append(entry)
            if entry in prior.get("timings", {}):
                manifest["timings"][entry] = prior["timings"][entry]
    manifest["completed"] = sorted(keep)


def run_generation(cfg: ExperimentConfig, jobs: list, models: dict, sched: NoiseSchedule,
                   val: LabeledDataset, out_dir, variants, resume=None, log=None) -> dict:
    """Generate every planned batch, streaming results to disk as they finish.

    The manifest (with the full batch plan and per-record seeds) is written
    before the first batch runs and refreshed after every completed batch,
    so an interrupted run can resume without recomputing finished work.
    """
    global _CTX
    say = log or (lambda *_: None)
    out = Path(out_dir)
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)

    manifest = _fresh_manifest(cfg, jobs, variants)
    if resume is not None:
        _load_resume(resume, cfg, manifest, records_dir)
    done = set(manifest["completed"])
    write_manifest(manifest, out)

    tasks = []
    for job in jobs:
        chunks = [job.records[i:i + cfg.harness.batch]
                  for i in range(0, len(job.records), cfg.harness.batch)]
        for b, chunk in enumerate(chunks):
            if _batch_name(job.key, b) in done:
                continue
            tasks.append({"key": job.key, "batch": b, "subject": job.subject,
                          "source": job.source, "target": job.target,
                          "cone": job.cone, "x0": job.x0,
                          "record_idx": [r[0] for r in chunk],
                          "original_idx": [r[1] for r in chunk],
                          "seeds": [r[2] for r in chunk]})

    def commit(key, batch, payload, wall):
        name = _batch_name(key, batch)
        tmp = records_dir / f"{name}.vcb.tmp"
        save_tensors(tmp, payload)
        os.replace(tmp, records_dir / f"{name}.vcb")
        manifest["completed"] = sorted(set(manifest["completed"]) | {name})
        manifest["timings"][name] = round(wall, 3)
        write_manifest(manifest, out)
        say(f"[gen] {name} ({len(payload['predicted'])} records, {wall:.1f}s)")

    _CTX = _generation_context(cfg, models, sched, val)
    try:
        workers = cfg.harness.workers
        if workers <= 1 or len(tasks) <= 1:
            for task in tasks:
                commit(*_run_batch(task))
        else:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                futures = [pool.submit(_run_batch, t) for t in tasks]
                for fut in as_completed(futures):
                    commit(*fut.result())
    finally:
        _CTX = {}
    return manifest


# ---------------------------------------------------------------------------
# records on disk
# ---------------------------------------------------------------------------


def load_job_records(out_dir, manifest: dict, key: str) -> list:
    """Rebuild the in-memory record list for one job from its batch files."""
    job = manifest["jobs"][key]
    records_dir = Path(out_dir) / "records"
    seeds = {int(ri): int(seed) for ri, _oi, seed in job["records"]}
    out = {}
    for b in range(job["n_batches"]):
        name = _batch_name(key, b)
        path = records_dir / f"{name}.vcb"
        if not path.exists():
            raise HarnessError(f"missing record batch {path}; re-run generation")
        arrays = load_tensors(path)
        wall = manifest["timings"].get(name, 0.0) / max(len(arrays["predicted"]), 1)
        for i in range(len(arrays["predicted"])):
            ridx = int(arrays["record_idx"][i])
            snapshot = dict(job["guidance"], seed=seeds[ridx])
            out[ridx] = CounterfactualRecord(
                original=arrays["originals"][i],
                source_label=job["source"], target_label=job["target"],
                generated=arrays["generated"][i],
                predicted_label=int(arrays["predicted"][i]),
                subject_log_probs=arrays["log_probs"][i],
                config=snapshot, seed=seeds[ridx], wall_time=wall,
                failed=bool(arrays["failed"][i]), rejected=bool(arrays["rejected"][i]))
    missing = set(seeds) - set(out)
    if missing:
        raise HarnessError(f"job {key} is missing records {sorted(missing)}")
    return [out[i] for i in sorted(out)]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregate(reports) -> dict:
    """Mean and population standard deviation per metric across groups."""
    reports = list(reports)
    if len(reports) < 2:
        raise HarnessError(f"aggregate needs at least 2 groups, got {len(reports)}")
    out = {}
    for key in SCALAR_METRICS:
        if all(key in r.values for r in reports):
            vals = np.asarray([r.values[key] for r in reports], dtype=np.float64)
            out[key] = (float(vals.mean()), float(vals.std()))
    return out


def evaluate_records(cfg: ExperimentConfig, models: dict, val: LabeledDataset,
                     manifest: dict, out_dir, log=None) -> dict:
    """Per-group metric reports plus per-(subject, variant) aggregates."""
    say = log or (lambda *_: None)
    results: dict = {}
    # sorted so a manifest reloaded from disk (JSON sorts keys) and the
    # in-memory one from a fresh run walk jobs in the same order
    for key in sorted(manifest["jobs"]):
        job = manifest["jobs"][key]
        records = load_job_records(out_dir, manifest, key)
        subject = models[job["subject"]]
        oracles = {n: models[n] for n in cfg.models.committee if n != job["subject"]}
        if not oracles:
            raise HarnessError("oracle committee is empty once the subject is removed")
        kwargs = dict(
            source_class=job["source"], target_class=job["target"], subject=subject,
            subject_name=job["subject"], oracles=oracles,
            featurenet=models[cfg.models.featurenet],
            flags={"cone": job["cone"], "x0_prediction": job["x0"], "variant": job["variant"]})
        try:
            report = evaluate_group(records, fid_features=cfg.harness.fid_features, **kwargs)
        except MetricError as e:
            if "needs at least" not in str(e):
                raise
            # too few accepted records for a covariance fit: keep the group,
            # report the distribution distance as undefined
            report = evaluate_group(records, fid_features=None, **kwargs)
            report.values["FID"] = float("nan")
            say(f"[eval] {key}: FID undefined ({e})")
        group = f"{job['source_name']}->{job['target_name']}"
        results.setdefault(job["subject"], {}).setdefault(
            job["variant"], {"groups": {}})["groups"][group] = report
    for per_variant in results.values():
        for entry in per_variant.values():
            entry["aggregate"] = aggregate(entry["groups"].values())
    return results


def delta_tables(results: dict) -> dict:
    """Signed (variant − base) differences of both mean and std, per subject."""
    deltas: dict = {}
    for subject, per_variant in results.items():
        if "base" not in per_variant:
            raise HarnessError(f"subject {subject!r} has no base variant to diff against")
        base = per_variant["base"]["aggregate"]
        deltas[subject] = {}
        for variant, entry in per_variant.items():
            agg = entry["aggregate"]
            deltas[subject][variant] = {
                m: (agg[m][0] - base[m][0], agg[m][1] - base[m][1])
                for m in agg if m in base}
    return deltas


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def summary_csv(results: dict) -> str:
    lines = ["subject,variant,metric,mean,std"]
    for subject, per_variant in results.items():
        for variant, entry in per_variant.items():
            for metric, (mean, std) in entry["aggregate"].items():
                lines.append(f"{subject},{variant},{metric},{_fmt(mean)},{_fmt(std)}")
    return "\n".join(lines) + "\n"


def deltas_csv(deltas: dict) -> str:
    lines = ["subject,variant,metric,delta_mean,delta_std"]
    for subject, per_variant in deltas.items():
        for variant, metrics in per_variant.items():
            for metric, (dm, ds) in metrics.items():
                lines.append(f"{subject},{variant},{metric},{_fmt(dm)},{_fmt(ds)}")
    return "\n".join(lines) + "\n"


def parse_summary_csv(text: str) -> dict:
    """Inverse of summary_csv / deltas_csv: {(subject, variant, metric): (a, b)}."""
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if len(header) != 5 or header[:3] != ["subject", "variant", "metric"]:
        raise HarnessError(f"unrecognized summary header: {header}")
    out = {}
    for subject, variant, metric, a, b in body:
        out[(subject, variant, metric)] = (float(a), float(b))
    return out


def summary_json(results: dict, manifest: dict, deltas: dict = None) -> str:
    payload = {
        "config_hash": manifest["config_hash"],
        "seed": manifest["seed"],
        "manifest_sha256": manifest_digest(manifest),
        "subjects": {},
    }
    for subject, per_variant in results.items():
        payload["subjects"][subject] = {}
        for variant, entry in per_variant.items():
            groups = {}
            for gkey, rep in entry["groups"].items():
                groups[gkey] = {
                    "source": rep.source_class, "target": rep.target_class,
                    "flags": rep.flags, "values": rep.values,
                    "sample_count": rep.sample_count,
                    "failed": rep.failed, "rejected": rep.rejected,
                    "os_by_oracle": rep.os_by_oracle,
                    "ota_by_oracle": rep.ota_by_oracle,
                }
            payload["subjects"][subject][variant] = {
                "aggregate": {m: {"mean": v[0], "std": v[1]}
                              for m, v in entry["aggregate"].items()},
                "groups": groups,
            }
    if deltas is not None:
        payload["deltas"] = {
            s: {v: {m: {"delta_mean": d[0], "delta_std": d[1]} for m, d in ms.items()}
                for v, ms in per_variant.items()}
            for s, per_variant in deltas.items()}
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def summary_markdown(results: dict, manifest: dict, deltas: dict = None,
                     minimal: bool = False) -> str:
    keep = MINIMAL_METRICS if minimal else SCALAR_METRICS
    out = ["# Counterfactual evaluation", "",
           f"- config `{manifest['config_hash'][:12]}`, base seed {manifest['seed']}", ""]
    for subject, per_variant in results.items():
        for variant, entry in per_variant.items():
            out += [f"## {subject} — {variant}", "", "| metric | value |", "| --- | --- |"]
            for metric in keep:
                if metric in entry["aggregate"]:
                    mean, std = entry["aggregate"][metric]
                    out.append(f"| {metric} | {mean:.4f} ± {std:.4f} |")
            out.append("")
    if deltas is not None:
        out.append("## Deltas vs base (variant − base)")
        out.append("")
        for subject, per_variant in deltas.items():
            for variant, metrics in per_variant.items():
                if variant == "base":
                    continue
                out += [f"### {subject} — {variant}", "", "| metric | delta |", "| --- | --- |"]
                for metric in keep:
                    if metric in metrics:
                        dm, ds = metrics[metric]
                        out.append(f"| {metric} | {dm:+.4f} ± {ds:+.4f} |")
                out.append("")
    return "\n".join(out) + "\n"


# -- image grids ------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5),
                   0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise HarnessError(f"PGM wants a 2-d grayscale array, got {image.shape}")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    _write_atomic(Path(path), header + image.tobytes())


def record_grid(records, columns: int = 8) -> np.ndarray:
    """3-row grid of (original | counterfactual) cells.

    Rows: predicted == target (hits), predicted == source (insufficient
    change), everything else including hard failures.  Empty slots are
    mid-gray.
    """
    records = list(records)
    if not records:
        raise HarnessError("cannot render a grid from zero records")
    res = records[0].original.shape[-1]
    hits, soft, failed = [], [], []
    for r in records:
        if r.failed:
            failed.append(r)
        elif r.predicted_label == r.target_label:
            hits.append(r)
        elif r.predicted_label == r.source_label:
            soft.append(r)
        else:
            failed.append(r)
    cell_w, cell_h, gap = 2 * res + 1, res, 1
    height = 3 * cell_h + 2 * gap
    width = columns * cell_w + (columns - 1) * gap
    grid = np.full((height, width), 128, dtype=np.uint8)
    for row, bucket in enumerate((hits, soft, failed)):
        for col, rec in enumerate(bucket[:columns]):
            cell = np.full((cell_h, cell_w), 255, dtype=np.uint8)
            cell[:, :res] = to_uint8(rec.original[0])
            cell[:, res + 1:] = to_uint8(rec.generated[0])
            y = row * (cell_h + gap)
            x = col * (cell_w + gap)
            grid[y:y + cell_h, x:x + cell_w] = cell
    return grid


def emit_report(results: dict, manifest: dict, out_dir, *, deltas: dict = None,
                minimal: bool = False, formats=REPORT_FORMATS,
                records_by_job: dict = None, columns: int = 8) -> list:
    """Write the requested report formats; returns the emitted paths."""
    if isinstance(formats, str):
        formats = (formats,)
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise HarnessError(f"unknown report formats: {sorted(unknown)}")
    out = Path(out_dir)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    paths = []

    def write(path: Path, text: str):
        _write_atomic(path, text.encode())
        paths.append(str(path.relative_to(out)))

    if "csv" in formats:
        write(reports / "summary.csv", summary_csv(results))
        if deltas is not None:
            write(reports / "deltas.csv", deltas_csv(deltas))
    if "json" in formats:
        write(reports / "summary.json", summary_json(results, manifest, deltas))
    if "markdown" in formats:
        write(reports / "summary.md", summary_markdown(results, manifest, deltas, minimal))
    if "pgm" in formats and records_by_job:
        grids = out / "grids"
        grids.mkdir(parents=True, exist_ok=True)
        for key, records in records_by_job.items():
            write_pgm(grids / f"{key}.pgm", record_grid(records, columns))
            paths.append(str((grids / f"{key}.pgm").relative_to(out)))
    return paths


# ---------------------------------------------------------------------------
# top-level pipelines
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, *, ablate: bool = False,
                   generate_only: bool = False, minimal: bool = False,
                   resume=None, formats=REPORT_FORMATS, log=None):
    """generate → evaluate → report; the engine behind the CLI verbs."""
    _train, val = load_splits(cfg)
    models = load_models(cfg)
    sched = make_noise_schedule(cfg)
    variants = ablation_variants() if ablate else (base_variant(cfg),)
    jobs = plan_jobs(cfg, val, variants)
    out = Path(cfg.harness.out)
    manifest = run_generation(cfg, jobs, models, sched, val, out, variants,
                              resume=resume, log=log)
    if generate_only:
        return None, manifest, []
    results = evaluate_records(cfg, models, val, manifest, out, log=log)
    deltas = delta_tables(results) if ablate else None
    records_by_job = {job.key: load_job_records(out, manifest, job.key) for job in jobs}
    paths = emit_report(results, manifest, out, deltas=deltas, minimal=minimal,
                        formats=formats, records_by_job=records_by_job,
                        columns=cfg.harness.grid_columns)
    manifest["artifacts"] = sorted(paths)
    write_manifest(manifest, out)
    return results, manifest, paths


def run_group(cfg: ExperimentConfig, subject: str, source_class, target_class,
              flags: dict = None) -> tuple:
    """One group end to end, in process: records plus their metric report.

    ``flags`` may override the guidance toggles: keys ``cone`` and ``x0``.
    """
    flags = dict(flags or {})
    _train, val = load_splits(cfg)
    models = load_models(cfg)  # fails here, before any generation
    sched = make_noise_schedule(cfg)
    names = val.class_names
    src = names.index(source_class) if isinstance(source_class, str) else int(source_class)
    tgt = names.index(target_class) if isinstance(target_class, str) else int(target_class)
    if src == tgt:
        raise HarnessError("source and target class must differ")
    cone = bool(flags.get("cone", cfg.guidance.cone))
    x0 = bool(flags.get("x0", cfg.guidance.use_x0_prediction))
    gcfg = _guidance_config(cone, x0, cfg.guidance, models, cfg.models.robust)
    originals = val.of_class(src)[:cfg.harness.originals_per_class]
    seeds = [_record_seed(cfg.harness.seed, subject, names[src], names[tgt], i)
             for i in range(len(originals))]
    records = []
    for i in range(0, len(originals), cfg.harness.batch):
        records.extend(generate_vce_batch(
            originals[i:i + cfg.harness.batch], [src] * len(seeds[i:i + cfg.harness.batch]),
            [tgt] * len(seeds[i:i + cfg.harness.batch]), models[subject],
            models["denoiser"], sched, gcfg, seeds[i:i + cfg.harness.batch]))
    oracles = {n: models[n] for n in cfg.models.committee if n != subject}
    kwargs = dict(source_class=src, target_class=tgt, subject=models[subject],
                  subject_name=subject, oracles=oracles,
                  featurenet=models[cfg.models.featurenet],
                  flags={"cone": cone, "x0_prediction": x0})
    try:
        report = evaluate_group(records, fid_features=cfg.harness.fid_features, **kwargs)
    except MetricError as e:
        if "needs at least" not in str(e):
            raise
        report = evaluate_group(records, fid_features=None, **kwargs)
        report.values["FID"] = float("nan")
    return records, report


def rebuild_reports(out_dir, *, minimal: bool = False, formats=REPORT_FORMATS,
                    log=None) -> list:
    """Re-emit every report for an existing output directory."""
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise HarnessError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = loads_config(manifest["config_text"])
    cfg = replace(cfg, harness=replace(cfg.harness, out=str(out)))
    _train, val = load_splits(cfg)
    models = load_models(cfg)
    results = evaluate_records(cfg, models, val, manifest, out, log=log)
    has_grid = set(manifest.get("variants", [])) - {"base"}
    deltas = delta_tables(results) if has_grid else None
    records_by_job = {key: load_job_records(out, manifest, key) for key in manifest["jobs"]}
    paths = emit_report(results, manifest, out, deltas=deltas, minimal=minimal,
                        formats=formats, records_by_job=records_by_job,
                        columns=cfg.harness.grid_columns)
    manifest["artifacts"] = sorted(paths)
    write_manifest(manifest, out)
    return paths
