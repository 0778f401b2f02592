"""Experiment orchestration: datasets per seed, ablation sweeps and the runtime scaling benchmark."""

from __future__ import annotations

import dataclasses
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from typing import IO, Sequence

from .config import RunConfig
from .data import TaskSequence, generate_blobs, generate_images, split_tasks
from .errors import InvalidConfig
from .metrics import fit_linear
from .trainer import Ablation, RunLog, SessionMetrics, network_for, run_sequence

# Single-term ablations, named by the loss component each one removes.
ABLATIONS: dict[str, Ablation] = {
    "A_no_flat": Ablation(disable_flat=True),
    "B_no_wide": Ablation(disable_wide_kl=True),
    "C_no_psl": Ablation(disable_psl=True),
    "D_no_psa": Ablation(disable_psa=True),
    "E_no_ball": Ablation(disable_ball=True),
}


def make_tasks(cfg: RunConfig, seed: int, samples_per_class: int | None = None) -> TaskSequence:
    d, s = cfg.dataset, cfg.split
    spc = samples_per_class or d.samples_per_class
    if d.kind == "images":
        data = generate_images(d.n_classes, spc, seed, side=d.image_side, noise_std=d.noise_std)
    else:
        data = generate_blobs(d.n_classes, d.dim, spc, d.class_sep, d.cluster_std, seed)
    return split_tasks(data, s.base_classes, s.ways, s.shots, s.n_fewshot_tasks, s.anchor_budget_base,
                       s.test_fraction, seed)


def frozen(cfg: RunConfig) -> RunConfig:
    """Update-free baseline: same pipeline with every learning rate at zero, so the
    extractor and head stay at their random initialisation."""
    train = dataclasses.replace(cfg.train, lr_base=0.0, lr_fewshot_max=0.0, lr_fewshot_min=0.0)
    return dataclasses.replace(cfg, train=train)


def run_one(cfg: RunConfig, seed: int, log_stream: IO[str] | None = None,
            samples_per_class: int | None = None) -> SessionMetrics:
    tasks = make_tasks(cfg, seed, samples_per_class)
    n = cfg.network
    shape = network_for(tasks, n.hidden_dims, n.feature_dim, n.projected_dim,
                        None if n.extractor == "auto" else n.extractor)
    log = RunLog(log_stream)
    log.write({"type": "run", "seed": seed})
    return run_sequence(tasks, dataclasses.replace(cfg.train, seed=seed), shape, log)


def _worker(args):
    cfg, seed, want_log = args
    buf = io.StringIO() if want_log else None
    return run_one(cfg, seed, buf), (buf.getvalue() if buf else "")


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("UNISA_THREADS", "1")))
    except ValueError:
        return 1


def run_seeds(cfg: RunConfig, seeds: Sequence[int], log_stream: IO[str] | None = None) -> list[SessionMetrics]:
    """Independent runs, one per seed. With UNISA_THREADS > 1 they run in worker
    processes; each worker buffers its log and the logs are written in seed order."""
    workers = min(max_workers(), len(seeds))
    if workers <= 1:
        return [run_one(cfg, s, log_stream) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        done = list(pool.map(_worker, [(cfg, s, log_stream is not None) for s in seeds]))
    if log_stream is not None:
        for _, text in done:
            log_stream.write(text)
    return [m for m, _ in done]


def ablation_suite(cfg: RunConfig, seeds: Sequence[int], log_stream: IO[str] | None = None,
                   include: Sequence[str] | None = None) -> dict[str, list[SessionMetrics]]:
    """full, each single-term ablation, and the frozen baseline over the same seeds."""
    variants = {"full": cfg, **{k: cfg.with_ablation(a) for k, a in ABLATIONS.items()}, "frozen": frozen(cfg)}
    if include is not None:
        variants = {k: v for k, v in variants.items() if k in include}
    return {name: run_seeds(c, seeds, log_stream) for name, c in variants.items()}


@dataclasses.dataclass
class ScalingResult:
    sizes: list[int]
    seconds: list[float]
    slope: float
    intercept: float
    r_squared: float


def scaling_benchmark(cfg: RunConfig, sizes: Sequence[int], seed: int | None = None) -> ScalingResult:
    """Wall time of run_sequence against total sample count N, with a least-squares line."""
    sizes = [int(n) for n in sizes]
    if len(sizes) < 3:
        raise InvalidConfig("scaling benchmark needs at least 3 sizes")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise InvalidConfig("sizes must be strictly increasing")
    seed = cfg.seeds[0] if seed is None else seed
    n_classes = cfg.dataset.n_classes
    seconds = []
    for n in sizes:
        spc = max(1, n // n_classes)
        t0 = time.perf_counter()
        run_one(cfg, seed, samples_per_class=spc)
        seconds.append(time.perf_counter() - t0)
    slope, intercept, r2 = fit_linear(sizes, seconds)
    return ScalingResult(sizes, seconds, slope, intercept, r2)
