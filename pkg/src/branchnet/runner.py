"""Subcommand implementations behind the ``branchnet`` executable.

Every run owns one output directory, guarded by a lock file, and leaves a
``manifest.json`` (config echo, seeds, wall time, artifact digests) there.
"""

import csv
import hashlib
import json
import logging
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, _env, kernels
from .checkpoint import load_model, save_model
from .config import ConfigError, ExperimentConfig, bench_entry, dump_echo, impact_spots
from .core import BranchedModel, Reduction
from .data import Dataset, load_cifar_splits, load_tensor_dir, save_dataset, subset, synth_splits
from .impact import (
    IMPACT_COLUMNS,
    INFERENCE_TRANSFORMS,
    BenchConfig,
    ImpactRow,
    benchmark,
    inference_impact,
    spot_label,
    training_impact,
)
from .layers import build_preact_resnet, build_resnet18
from .training import evaluate, train

log = logging.getLogger(__name__)

LOCK_NAME = ".branchnet.lock"


class RunDirBusy(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    config_name: str
    seed: object
    epoch: object
    split: str
    top1_err: Optional[float] = None
    top5_err: Optional[float] = None
    ms_per_batch: Optional[float] = None
    slowdown_vs_vanilla: Optional[float] = None

    def as_row(self) -> List[str]:
        def fmt(v, digits):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return f"{v:.{digits}f}"

        ms = None if _env.deterministic() else self.ms_per_batch
        return [
            self.config_name,
            "" if self.seed is None else str(self.seed),
            "" if self.epoch is None else str(self.epoch),
            self.split,
            fmt(self.top1_err, 4),
            fmt(self.top5_err, 4),
            fmt(ms, 3),
            fmt(self.slowdown_vs_vanilla, 4),
        ]


METRICS_COLUMNS = [f.name for f in fields(MetricsRecord)]


def write_csv(path: Path, header: List[str], rows: List[List[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_metrics(path) -> List[dict]:
    """Parse a metrics/timing CSV back into typed dicts (empty cells become None)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "":
                    rec[k] = None
                elif k in ("top1_err", "top5_err", "ms_per_batch", "slowdown_vs_vanilla"):
                    rec[k] = float(v)
                elif k == "epoch":
                    rec[k] = int(v)
                else:
                    rec[k] = v
            out.append(rec)
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Exclusive output directory: lock file, artifact registry, manifest."""

    def __init__(self, path, subcommand: str):
        self.path = Path(path)
        self.subcommand = subcommand
        self.artifacts: List[Path] = []
        self.started = time.time()
        self._lock = self.path / LOCK_NAME

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirBusy(f"{self.path} is in use by another run (remove {self._lock} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        for stale in ("error.json",):
            (self.path / stale).unlink(missing_ok=True)
        return self

    def __exit__(self, *exc):
        self._lock.unlink(missing_ok=True)
        return False

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if p not in self.artifacts:
            self.artifacts.append(p)
        return p

    def write_manifest(self, config: Optional[dict], seeds, status: str = "ok", error: Optional[dict] = None):
        manifest = {
            "subcommand": self.subcommand,
            "status": status,
            "config": config,
            "seeds": list(seeds or []),
            "started_utc": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_time_s": round(time.time() - self.started, 3),
            "deterministic": _env.deterministic(),
            "kernels": kernels.backend(),
            "versions": {"branchnet": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "artifacts": {
                str(p.relative_to(self.path)): sha256_file(p) for p in self.artifacts if p.exists()
            },
        }
        if error is not None:
            manifest["error"] = error
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def error_record(exc: BaseException, subcommand: str) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "subcommand": subcommand}
    if isinstance(exc, ConfigError):
        rec["field"] = exc.field
    return rec


# --- building blocks -----------------------------------------------------------


def build_model(cfg: ExperimentConfig, seed: int) -> BranchedModel:
    a = cfg.arch
    if a.kind == "resnet18":
        blocks, head = build_resnet18(a.num_classes, a.width, a.small_input, seed=seed)
    else:
        blocks, head = build_preact_resnet(a.depth_n, a.num_classes, a.widths, seed=seed)
    return BranchedModel(blocks, head)


def load_data(cfg: ExperimentConfig):
    """(train, test) for the config; fills in the echoed normalisation stats."""
    d = cfg.dataset
    if d.kind == "synth_shapes":
        train_set, test_set = synth_splits(d.n_train, d.n_test, d.size, d.num_classes, d.seed, d.noise)
    elif d.kind in ("cifar10", "cifar100"):
        train_set, test_set = load_cifar_splits(d.path, d.kind)
    else:
        train_set, test_set = load_tensor_dir(d.path)
    if d.per_class is not None:
        train_set = subset(train_set, d.per_class, d.seed)
    if d.mean is not None and d.std is not None:
        mean, std = np.asarray(d.mean, dtype=np.float64), np.asarray(d.std, dtype=np.float64)
        train_set = replace(train_set, mean=mean, std=std)
    test_set = test_set.with_stats_of(train_set)
    d.mean = [float(v) for v in train_set.mean]
    d.std = [float(v) for v in train_set.std]
    if train_set.num_classes != cfg.arch.num_classes:
        raise ConfigError(
            "arch.num_classes",
            f"{cfg.arch.num_classes} does not match the dataset's {train_set.num_classes} classes",
        )
    return train_set, test_set


def _seed_path(template: str, seed: int) -> Path:
    return Path(template.format(seed=seed))


def _train_one(cfg, seed, train_set, test_set, run: RunDir, records: List[MetricsRecord], name=None):
    base = build_model(cfg, seed)
    model = base.with_branchings(cfg.resolved_branchings())
    optim = replace(cfg.optim, seed=seed)
    name = name or cfg.name

    def on_epoch(st):
        records.append(MetricsRecord(name, seed, st.epoch, "train", st.train_top1, st.train_top5, st.ms_per_batch))
        if test_set is not None:
            records.append(MetricsRecord(name, seed, st.epoch, "test", st.test_top1, st.test_top5))
        if cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0 and st.epoch != optim.epochs:
            save_model(run.file(f"checkpoints/seed{seed}_epoch{st.epoch}.brnet"), base)

    history = train(
        model,
        train_set,
        test_set,
        optim,
        cfg.train_reduction,
        cfg.infer_reduction,
        cfg.input_policy,
        np.random.default_rng(seed),
        cfg.tta,
        on_epoch,
        dump_path=run.path / f"diverged_seed{seed}.brnet",
        eval_batch_size=cfg.eval_batch_size,
    )
    save_model(run.file(f"checkpoints/seed{seed}.brnet"), base)
    return base, history


def _mean_rows(records: List[MetricsRecord], name: str) -> List[MetricsRecord]:
    """One aggregate row per (epoch, split) of the last epoch present for every seed."""
    seeds = sorted({r.seed for r in records if r.seed != "mean"}, key=str)
    if len(seeds) < 2:
        return []
    out = []
    splits = sorted({r.split for r in records})
    for split in splits:
        rows = [r for r in records if r.split == split]
        last = max(r.epoch for r in rows) if all(r.epoch is not None for r in rows) else None
        rows = [r for r in rows if r.epoch == last]
        if len(rows) != len(seeds):
            continue

        def avg(attr):
            vals = [getattr(r, attr) for r in rows]
            return None if any(v is None for v in vals) else float(np.mean(vals))

        out.append(MetricsRecord(name, "mean", last, split, avg("top1_err"), avg("top5_err"), avg("ms_per_batch")))
    return out


def _write_metrics(run: RunDir, records: List[MetricsRecord], name="metrics.csv"):
    write_csv(run.file(name), METRICS_COLUMNS, [r.as_row() for r in records])


def _write_echo(run: RunDir, cfg: ExperimentConfig):
    run.file("config.yaml").write_text(dump_echo(cfg))


# --- subcommands ------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, run: RunDir, checkpoint=None) -> None:
    train_set, test_set = load_data(cfg)
    _write_echo(run, cfg)
    records: List[MetricsRecord] = []
    for seed in cfg.seeds:
        log.info("training %s seed %d", cfg.name, seed)
        _train_one(cfg, seed, train_set, test_set, run, records)
        # rewrite after each seed so partial results survive an interruption
        _write_metrics(run, records)
    _write_metrics(run, records + _mean_rows(records, cfg.name))


def cmd_eval(cfg: ExperimentConfig, run: RunDir, checkpoint=None) -> None:
    _, test_set = load_data(cfg)
    _write_echo(run, cfg)
    records = []
    for seed in cfg.seeds:
        base = build_model(cfg, seed)
        if checkpoint:
            load_model(_seed_path(checkpoint, seed), base)
        model = base.with_branchings(cfg.resolved_branchings())
        top1, top5, ms = evaluate(model, test_set, cfg.infer_reduction, cfg.tta, cfg.eval_batch_size)
        records.append(MetricsRecord(cfg.name, seed, None, "test", top1, top5, ms))
        log.info("eval seed %d: top1 %.2f top5 %.2f", seed, top1, top5)
    _write_metrics(run, records + _mean_rows(records, cfg.name))


def _aggregate_impact(per_seed: List[List[ImpactRow]]) -> List[ImpactRow]:
    out = []
    for rows in zip(*per_seed):
        top1 = [r.top1_err for r in rows]
        top5 = [r.top5_err for r in rows]
        n = len(rows)
        se = statistics.stdev(top1) / math.sqrt(n) if n > 1 else 0.0
        r0 = rows[0]
        out.append(ImpactRow(r0.spot, r0.spot_label, r0.transform, r0.mode, float(np.mean(top1)), float(np.mean(top5)), n, se))
    return out


def _impact_rows(rows: List[ImpactRow]) -> List[List[str]]:
    return [
        [str(r.spot), r.spot_label, r.transform, r.mode, f"{r.top1_err:.4f}", f"{r.top5_err:.4f}", str(r.runs), f"{r.stderr:.4f}"]
        for r in rows
    ]


def cmd_impact(cfg: ExperimentConfig, run: RunDir, checkpoint=None) -> None:
    train_set, test_set = load_data(cfg)
    _write_echo(run, cfg)
    imp = cfg.impact
    spots = impact_spots(imp, cfg.arch)
    records: List[MetricsRecord] = []
    if imp.mode == "inference":
        if cfg.branchings:
            raise ConfigError("branchings", "inference impact needs an unbranched model")
        source = checkpoint or imp.checkpoint
        transforms = {t: INFERENCE_TRANSFORMS[t] for t in imp.transforms}
        per_seed = []
        for seed in cfg.seeds:
            if source:
                base = build_model(cfg, seed)
                load_model(_seed_path(source, seed), base)
            else:
                base, _ = _train_one(cfg, seed, train_set, test_set, run, records)
            report = inference_impact(base, test_set, transforms, spots, cfg.eval_batch_size)
            per_seed.append(report.rows)
        rows = _aggregate_impact(per_seed)
    else:
        rows = []
        for kind in imp.transforms:
            for spot in spots:
                log.info("training impact %s at spot %d", kind, spot)
                rows.append(
                    training_impact(
                        lambda s: build_model(cfg, s),
                        train_set,
                        test_set,
                        kind,
                        spot,
                        cfg.optim,
                        tuple(imp.reductions),
                        cfg.seeds,
                        cfg.input_policy,
                    )
                )
    if records:
        _write_metrics(run, records + _mean_rows(records, cfg.name))
    write_csv(run.file("impact.csv"), IMPACT_COLUMNS, _impact_rows(rows))


def _bench_image_shape(cfg: ExperimentConfig):
    if cfg.dataset.kind in ("cifar10", "cifar100"):
        return (32, 32, 3)
    return (cfg.dataset.size, cfg.dataset.size, 3)


def cmd_bench(cfg: ExperimentConfig, run: RunDir, checkpoint=None) -> None:
    _write_echo(run, cfg)
    b = cfg.bench
    model = build_model(cfg, cfg.seeds[0])
    if checkpoint:
        load_model(_seed_path(checkpoint, cfg.seeds[0]), model)
    configs = []
    for name in b.configs:
        branchings, red, tta = bench_entry(cfg, name)
        configs.append(BenchConfig(name, branchings, red, tta))
    rows = benchmark(model, configs, b.batch_size, _bench_image_shape(cfg), b.warmup, b.timed, cfg.seeds[0])
    records = [MetricsRecord(r.name, cfg.seeds[0], None, "bench", None, None, r.ms_per_batch, r.slowdown) for r in rows]
    # timing is the whole point here, so it is written even in deterministic mode
    write_csv(
        run.file("timing.csv"),
        METRICS_COLUMNS,
        [rec.as_row()[:6] + [f"{rec.ms_per_batch:.3f}", f"{rec.slowdown_vs_vanilla:.4f}"] for rec in records],
    )
    for r in rows:
        log.info("%-18s %8.2f ms  x%.3f  (flops x%.3f)", r.name, r.ms_per_batch, r.slowdown, r.flops_ratio)


def cmd_gen_data(cfg: ExperimentConfig, run: RunDir, checkpoint=None) -> None:
    train_set, test_set = load_data(cfg)
    _write_echo(run, cfg)
    save_dataset(run.file("train.brnet"), train_set)
    save_dataset(run.file("test.brnet"), test_set)
    log.info("wrote %d train / %d test images to %s", len(train_set), len(test_set), run.path)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "impact": cmd_impact,
    "bench": cmd_bench,
    "gen-data": cmd_gen_data,
}


def run(subcommand: str, cfg: ExperimentConfig, out_dir, checkpoint: Optional[str] = None) -> Dict:
    """Execute one subcommand; returns the manifest contents.

    Raises on failure after writing ``error.json`` and a failed manifest.
    """
    if subcommand not in COMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; expected one of {sorted(COMMANDS)}")
    with RunDir(out_dir, subcommand) as rd:
        try:
            COMMANDS[subcommand](cfg, rd, checkpoint)
        except Exception as exc:
            rec = error_record(exc, subcommand)
            (rd.path / "error.json").write_text(json.dumps(rec, indent=2) + "\n")
            rd.write_manifest(_safe_echo(cfg), cfg.seeds, "error", rec)
            raise
        rd.write_manifest(_safe_echo(cfg), cfg.seeds)
    return json.loads((Path(out_dir) / "manifest.json").read_text())


def _safe_echo(cfg):
    try:
        return cfg.to_dict()
    except Exception:  # pragma: no cover
        return None
