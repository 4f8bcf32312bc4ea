"""Config-driven orchestration behind the ``vidpoint`` command line.

Every command reads one YAML run config, writes its outputs under an
output directory and records them in ``manifest.json`` there with SHA-256
fingerprints. Nothing written to the output directory contains wall-clock
times, so repeated runs with the same config and seed are byte-identical.

Artifacts::

    triplets_{train,test}.vpds, episodes_{train,eval}.vpds   gen-data
    viewnet.ckpt, viewnet.json, metrics_viewnet.csv           train-viewnet
    encoder[-ABL].ckpt, .json, metrics_encoder[-ABL].csv      train-encoder
    eval[-ABL].json                                           eval
    bench.json                                                bench
    config.<command>.yaml                                     every command
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .datastore import fingerprint, read_episodes, read_triplets, write_episodes, write_triplets
from .disentangle import (DisentangleConfig, EncoderParams, ObservationSet, encode_batch,
                          linear_probe_accuracy, retrieval_accuracy, train_disentangle,
                          yaw_bins)
from .errors import ConfigError, MissingArtifactError, NumericalError
from .experiment import (DataSpec, build_observations, generate_episodes, generate_triplets,
                         prepare_triplets)
from .geometry import PointCloud, chamfer_distance
from .preprocess import AugmentConfig, PipelineConfig, augment
from .synthscene import default_workers, random_scene, render_batch, sample_camera
from .viewnet import ViewNetConfig, ViewNetParams, align_batch, stack_triplets, train_viewnet

log = logging.getLogger(__name__)

ABLATIONS = ("no-viewnet", "no-dep-orth")


@dataclass(frozen=True)
class EvalSpec:
    probe_bins: int = 8
    retrieval_min: float = 0.90
    probe_gap_min: float = 0.30
    alignment_ratio_max: float = 0.2


@dataclass(frozen=True)
class BenchSpec:
    jobs: int = 256
    resolution: int = 240
    workers: tuple = (1, 2, 4, 8)
    cameras_per_env: int = 2
    repeats: int = 1


@dataclass(frozen=True)
class RunConfig:
    """Top-level run config. ``seed`` is the only seed: it drives data
    generation and both training loops. ``workers = 0`` means one per core,
    capped by ``VIDPOINT_THREADS``."""

    seed: int = 0
    workers: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    viewnet: ViewNetConfig = field(default_factory=ViewNetConfig)
    encoder: DisentangleConfig = field(default_factory=DisentangleConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)

    def __post_init__(self):
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")

    @property
    def n_workers(self) -> int:
        if self.workers == 0:
            return default_workers()
        cap = os.environ.get("VIDPOINT_THREADS")
        return max(1, min(self.workers, int(cap))) if cap else self.workers


# sections whose dataclass has its own seed; the run seed replaces it
_SEEDED = ("viewnet", "encoder", "augment")


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for key, value in data.items():
        kind = hints.get(key)
        if isinstance(kind, type) and is_dataclass(kind):
            kw[key] = _build(kind, value, f"{where}.{key}")
        else:
            kw[key] = _tuples(value)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data) -> RunConfig:
    data = dict(data or {})
    seed = data.get("seed", 0)
    for name in _SEEDED:
        # snapshots repeat the run seed in each section; anything else is ambiguous
        if isinstance(data.get(name), dict) and data[name].get("seed", seed) != seed:
            raise ConfigError(f"{name}.seed: set the seed at the top level")
    run = _build(RunConfig, data, "config")
    return with_seed(run, run.seed)


def with_seed(run: RunConfig, seed: int) -> RunConfig:
    return replace(run, seed=seed, viewnet=replace(run.viewnet, seed=seed),
                   encoder=replace(run.encoder, seed=seed),
                   augment=replace(run.augment, seed=seed))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(data)


def config_to_dict(run: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(run))


def write_snapshot(run: RunConfig, out: Path, command: str, ablate=None):
    doc = {"command": command, "ablate": ablate, "config": config_to_dict(run)}
    (out / f"config.{command}.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


# -- manifest ---------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.is_file():
        return {"data": {}, "artifacts": {}}
    return json.loads(path.read_text())


def _write_manifest(out: Path, manifest: dict):
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _record(out: Path, *names):
    manifest = read_manifest(out)
    for name in names:
        manifest["artifacts"][name] = _sha256(out / name)
    _write_manifest(out, manifest)


def _data_file(out: Path, key: str) -> Path:
    manifest = read_manifest(out)
    entry = manifest["data"].get(key)
    if entry is None:
        raise MissingArtifactError(f"no {key} dataset in {out / 'manifest.json'}; run gen-data")
    path = out / entry["path"]
    if not path.is_file():
        raise MissingArtifactError(f"dataset file missing: {path}")
    return path


def _checkpoint(out: Path, name: str) -> Path:
    path = out / name
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint missing: {path}")
    return path


def _suffix(ablate) -> str:
    return "" if ablate is None else f"-{ablate}"


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(run: RunConfig, out: Path) -> dict:
    """Generate triplets and episodes, persist them and write the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out, "gen-data")
    d = run.data
    plan = [("triplets_train", generate_triplets, write_triplets, d.train_triplets, 0),
            ("triplets_test", generate_triplets, write_triplets, d.test_triplets, 1),
            ("episodes_train", generate_episodes, write_episodes, d.train_episodes, 0),
            ("episodes_eval", generate_episodes, write_episodes, d.eval_episodes, 1)]
    manifest = {"data": {}, "artifacts": {}, "seed": run.seed}
    for key, gen, write, n, tag in plan:
        if n <= 0:
            continue
        t0 = time.perf_counter()
        records = gen(n, run.seed, d, tag, workers=run.n_workers)
        name = f"{key}.vpds"
        digest = write(records, out / name)
        manifest["data"][key] = {"path": name, "records": n, "fingerprint": digest}
        log.info("%s: %d records in %.1fs", key, n, time.perf_counter() - t0)
    _write_manifest(out, manifest)
    return manifest


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def cmd_train_viewnet(run: RunConfig, out: Path) -> dict:
    path = _data_file(out, "triplets_train")
    write_snapshot(run, out, "train-viewnet")
    cfg = run.viewnet
    data = prepare_triplets(read_triplets(path), cfg.n_points, run.seed)

    def check(epoch, loss):
        if not np.isfinite(loss):
            raise NumericalError(epoch, "epoch")

    _, hist = train_viewnet(data, cfg, checkpoint=out / "viewnet.ckpt", on_epoch=check)
    _write_csv(out / "metrics_viewnet.csv", ["epoch", "loss"], enumerate(hist.epoch_loss))
    sidecar = {"config": config_to_dict(run)["viewnet"], "final_loss": hist.epoch_loss[-1],
               "dataset_fingerprint": fingerprint(path)}
    (out / "viewnet.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    _record(out, "viewnet.ckpt", "metrics_viewnet.csv", "viewnet.json")
    return sidecar


def _augmented(obs: ObservationSet, cfg: AugmentConfig) -> ObservationSet:
    null = AugmentConfig(seed=cfg.seed)
    if cfg == null:
        return obs
    e, t, n, _ = obs.rand.shape
    rand = obs.rand.reshape(e * t, n, 3).copy()
    for i in range(len(rand)):
        rand[i] = augment(PointCloud(rand[i]), cfg, seed=cfg.seed + i).points
    return ObservationSet(obs.ref, rand.reshape(obs.rand.shape), obs.yaw)


def observations(run: RunConfig, out: Path, key: str, ablate=None) -> ObservationSet:
    """Encoder inputs for an episode dataset along the configured path."""
    path = _data_file(out, key)
    viewnet = None
    if ablate != "no-viewnet":
        viewnet = ViewNetParams.load(_checkpoint(out, "viewnet.ckpt"))
    episodes = read_episodes(path)
    return build_observations(episodes, run.pipeline, viewnet, workers=run.n_workers)


def encoder_config(run: RunConfig, ablate=None) -> DisentangleConfig:
    if ablate == "no-dep-orth":
        return replace(run.encoder, beta_mode="off")
    return run.encoder


def cmd_train_encoder(run: RunConfig, out: Path, ablate=None) -> dict:
    obs = observations(run, out, "episodes_train", ablate)
    write_snapshot(run, out, "train-encoder", ablate)
    obs = _augmented(obs, run.augment)
    cfg = encoder_config(run, ablate)
    sfx = _suffix(ablate)

    def check(step, parts):
        if not np.isfinite(parts.total):
            raise NumericalError(step)

    _, hist = train_disentangle(obs, cfg, checkpoint=out / f"encoder{sfx}.ckpt", on_step=check)
    names = ("step", "l_inv", "l_dep", "l_orth", "beta", "total")
    _write_csv(out / f"metrics_encoder{sfx}.csv", names, hist.rows)
    last = dict(zip(names, hist.rows[-1]))
    sidecar = {"config": config_to_dict(replace(run, encoder=cfg))["encoder"], "ablate": ablate,
               "final": last, "dataset_fingerprint": read_manifest(out)["data"]
               ["episodes_train"]["fingerprint"]}
    (out / f"encoder{sfx}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    _record(out, f"encoder{sfx}.ckpt", f"metrics_encoder{sfx}.csv", f"encoder{sfx}.json")
    return sidecar


def alignment_ratio(params: ViewNetParams | None, triplets, seed=0) -> float:
    """median chamfer(aligned, p_ref) / median chamfer(p_org, p_ref) on
    FPS-prepared triplets; ``params=None`` substitutes the true extrinsics."""
    prepared = prepare_triplets(triplets, 256 if params is None else params.n_points, seed)
    p_org, _, p_ref = stack_triplets(prepared)
    if params is None:
        aligned = np.stack([t.extrinsics.apply_points(t.p_org.points) for t in prepared])
    else:
        aligned = align_batch(params, p_org)
    ca = [chamfer_distance(a, r) for a, r in zip(aligned, p_ref)]
    co = [chamfer_distance(o, r) for o, r in zip(p_org, p_ref)]
    return float(np.median(ca) / np.median(co))


def cmd_eval(run: RunConfig, out: Path, ablate=None, oracle=False) -> dict:
    """Retrieval, view probe and alignment ratio as one JSON document.

    ``oracle`` replaces the learned embeddings with one-hot timestep
    (``z_inv``) and yaw-bin (``z_dep``) codes and the ViewNet with the true
    extrinsics, a self-test of the evaluation path.
    """
    sfx = _suffix(ablate)
    spec = run.eval
    episodes = read_episodes(_data_file(out, "episodes_eval"))
    tri_path = _data_file(out, "triplets_test")
    e, t = len(episodes), len(episodes[0].frames)
    yaw = np.array([[f.rand_view[0] for f in ep.frames] for ep in episodes]).ravel()
    bins = yaw_bins(yaw, spec.probe_bins, run.data.sampling.yaw_range)
    if oracle:
        code = np.tile(np.eye(t), (e, 1))
        retrieval = retrieval_accuracy(code.reshape(e, t, t), code.reshape(e, t, t))
        z_dep = np.eye(spec.probe_bins)[bins]
        z_inv = code
        ratio = alignment_ratio(None, read_triplets(tri_path), run.seed)
    else:
        params = EncoderParams.load(_checkpoint(out, f"encoder{sfx}.ckpt"))
        obs = observations(run, out, "episodes_eval", ablate)
        n = obs.ref.shape[2]
        zq, _ = encode_batch(params, obs.ref.reshape(e * t, n, 3))
        z_inv, z_dep = encode_batch(params, obs.rand.reshape(e * t, n, 3))
        retrieval = retrieval_accuracy(zq.reshape(e, t, -1), z_inv.reshape(e, t, -1))
        ratio = None
        if ablate != "no-viewnet":
            vn = ViewNetParams.load(_checkpoint(out, "viewnet.ckpt"))
            ratio = alignment_ratio(vn, read_triplets(tri_path), run.seed)
    probe_dep = linear_probe_accuracy(z_dep, bins, seed=run.seed)
    probe_inv = linear_probe_accuracy(z_inv, bins, seed=run.seed)
    report = {
        "retrieval_top1": retrieval,
        "probe_dep": probe_dep,
        "probe_inv": probe_inv,
        "alignment_ratio": ratio,
        "ablate": ablate,
        "oracle": oracle,
        "checks": {
            "retrieval": retrieval >= spec.retrieval_min,
            "probe_gap": probe_dep - probe_inv >= spec.probe_gap_min,
            "alignment": None if ratio is None else ratio <= spec.alignment_ratio_max,
        },
    }
    name = "eval-oracle.json" if oracle else f"eval{sfx}.json"
    (out / name).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def bench_jobs(run: RunConfig):
    sampling = replace(run.data.sampling, resolution=run.bench.resolution).build()
    rng = np.random.default_rng(run.seed)
    jobs = []
    for _ in range(run.bench.jobs):
        scene = random_scene(int(rng.integers(2**31)), run.data.scene)
        jobs.append((scene, sample_camera(sampling, rng)[0]))
    return jobs


def cmd_bench(run: RunConfig, out: Path) -> dict:
    """Render the same job list at each worker count and report throughput."""
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out, "bench")
    jobs = bench_jobs(run)
    cap = os.environ.get("VIDPOINT_THREADS")
    runs = []
    for w in run.bench.workers:
        eff = min(w, int(cap)) if cap else w
        for rep in range(run.bench.repeats):
            _, report = render_batch(jobs, eff, run.bench.cameras_per_env)
            d = report.as_dict()
            d["requested_workers"] = w
            d["repeat"] = rep
            runs.append(d)
            log.info("bench workers=%d total_fps=%.2f", eff, report.total_fps)
    base = np.mean([r["total_fps"] for r in runs if r["requested_workers"] == run.bench.workers[0]])
    for r in runs:
        r["speedup"] = r["total_fps"] / base
    result = {
        "cpu_count": os.cpu_count(),
        "jobs": run.bench.jobs,
        "resolution": [run.bench.resolution] * 2,
        "accounting": "total_fps = environments * fps_env; one environment frame is "
                      f"{run.bench.cameras_per_env} renders",
        "identity_holds": all(r["identity_T_eq_K_x_fps_env"] for r in runs),
        "runs": runs,
    }
    (out / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result
