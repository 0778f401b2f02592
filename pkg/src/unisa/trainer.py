"""Base (flat-wide) and few-shot training phases and the session protocol."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import losses as L
from . import tensor as tc
from .ball import synth_batch
from .clustering import (
    ClusterSet,
    assign_many,
    batch_prototypes,
    classify_batch,
    kmeans,
    map_clusters_to_classes,
    matched_accuracy,
)
from .data import AugmentPolicy, Task, TaskSequence, augment
from .errors import ClassOverlap, EmptyTask, MissingAnchor, ValidationError
from .model import (
    ModelState,
    NetworkShape,
    clamp_to_flat_region,
    embed,
    head,
    init_state,
    max_anchor_deviation,
    momentum_update,
    perturb,
    represent,
    sample_noise,
    snapshot_anchor,
)
from .tensor import Graph

CLAMP_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Ablation:
    disable_flat: bool = False
    disable_wide_kl: bool = False
    disable_psl: bool = False
    disable_psa: bool = False
    disable_ball: bool = False
    disable_mas: bool = False
    disable_clamp: bool = False

    @property
    def clamp(self) -> bool:
        return not (self.disable_flat or self.disable_clamp)


@dataclass(frozen=True)
class TrainConfig:
    epochs_base: int = 20
    epochs_fewshot: int = 5
    batch_size: int = 128
    lr_base: float = 0.01
    lr_fewshot_max: float = 0.05
    lr_fewshot_min: float = 0.0
    bound_b: float = 0.01
    m_perturbations: int = 2
    s_synthetic: int | None = None
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    momentum_m: float = 0.99
    seed: int = 0
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    kmeans_restarts_base: int = 10
    kmeans_restarts_fewshot: int = 3
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        checks = [
            ("epochs_base", self.epochs_base >= 0),
            ("epochs_fewshot", self.epochs_fewshot >= 0),
            ("batch_size", self.batch_size >= 1),
            ("lr_base", self.lr_base >= 0),
            ("lr_fewshot_max", self.lr_fewshot_max >= 0),
            ("lr_fewshot_min", 0 <= self.lr_fewshot_min <= self.lr_fewshot_max),
            ("bound_b", self.bound_b >= 0),
            ("m_perturbations", self.m_perturbations >= 1),
            ("s_synthetic", self.s_synthetic is None or self.s_synthetic >= 1),
            ("momentum_m", 0.0 <= self.momentum_m <= 1.0),
            ("sgd_momentum", 0.0 <= self.sgd_momentum < 1.0),
            ("weight_decay", self.weight_decay >= 0),
            ("kmeans_restarts_base", self.kmeans_restarts_base >= 1),
            ("kmeans_restarts_fewshot", self.kmeans_restarts_fewshot >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ValidationError(name)

    def synthetic_count(self, fewshot_batch: int) -> int:
        return self.s_synthetic if self.s_synthetic is not None else 4 * fewshot_batch


@dataclass
class SessionState:
    state: ModelState
    clusters: list[ClusterSet] = field(default_factory=list)
    classes: list[tuple[int, ...]] = field(default_factory=list)
    history: list[list[L.LossReport]] = field(default_factory=list)
    clamp_violations: int = 0

    @property
    def k(self) -> int:
        return len(self.clusters)


@dataclass
class SessionMetrics:
    accuracies: list[float]
    seconds: list[float]
    base_cluster_accuracy: float
    seed: int
    clamp_violations: int = 0
    test_sizes: list[int] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean(self.accuracies))


class RunLog:
    """JSON-lines sink; a no-op when constructed without a stream."""

    def __init__(self, stream: IO[str] | None = None):
        self.stream = stream

    def write(self, record: dict) -> None:
        if self.stream is not None:
            self.stream.write(json.dumps(record, sort_keys=True) + "\n")


class Rngs:
    """Independent generators per concern so that toggling one part of the
    pipeline does not shift the random draws of another."""

    def __init__(self, seed: int):
        def make(i):
            return np.random.default_rng([seed, i])

        self.batches = make(1)
        self.augment = make(2)
        self.noise = make(3)
        self.ball = make(4)
        self.kmeans = make(5)

    def kmeans_seed(self) -> int:
        return int(self.kmeans.integers(2**31 - 1))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay, keyed by qualified parameter name."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, state: ModelState, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            block, key = name.split(".", 1)
            params = state.block(block)
            p = params[key]
            d = g + self.weight_decay * p if self.weight_decay else g
            buf = self.buffers.get(name)
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[name] = buf
            if lr:
                params[key] = p - lr * buf


def _param_names(state: ModelState, blocks: Sequence[str]) -> list[str]:
    return [f"{b}.{k}" for b in blocks for k in state.block(b)]


def input_jitter_scale(x: np.ndarray, weights: L.LossWeights) -> np.ndarray:
    """Per-dimension PSA jitter: sigma_psa times the task's per-dimension input std."""
    return weights.sigma_psa * x.std(axis=0)


def _views(xb, cfg: TrainConfig, rngs: Rngs, jitter: np.ndarray):
    v1, v2 = augment(xb, cfg.augment, rngs.augment)
    v1 = v1 + jitter * rngs.augment.standard_normal(v1.shape)
    return v1, v2


def _representation_terms(g: Graph, view: ModelState, target_state: ModelState, v1, v2, labels, n_clusters,
                          cfg: TrainConfig):
    """Online forward passes and the psl / psa / kl terms shared by both phases."""
    ab, w = cfg.ablation, cfg.weights
    raw1 = head(view, embed(view, v1, "online", g), g)
    z1 = tc.l2_normalize(raw1, axis=1)
    protos = batch_prototypes(z1, labels, n_clusters)
    terms = {}
    if not ab.disable_psl and len(protos.present) >= 2:
        z2 = tc.l2_normalize(head(view, embed(view, v2, "online", g), g), axis=1)
        aug = batch_prototypes(z2, labels, n_clusters)
        terms["psl"] = L.psl(protos.vectors, aug.vectors, w.tau)
    if not ab.disable_psa:
        t2 = represent(target_state, v2)
        terms["psa"] = L.psa(z1, g.constant(t2))
    if not ab.disable_wide_kl:
        terms["kl"] = L.kl_uniform(raw1)
    return terms, protos


def base_step(state: ModelState, xb, labels, n_clusters: int, cfg: TrainConfig, rngs: Rngs,
              opt: SGD, jitter: np.ndarray, lr: float) -> L.LossReport:
    """One minibatch of the flat-wide base phase.

    The loss is evaluated at M noisy copies phi + eps; their gradients are
    averaged and applied to the unperturbed phi, so noise never persists.
    """
    ab = cfg.ablation
    flat = not ab.disable_flat
    n_copies = cfg.m_perturbations if flat else 1
    v1, v2 = _views(xb, cfg, rngs, jitter)
    cstar = None
    if flat:
        cstar = batch_prototypes(represent(state, v1, network="online"), labels, n_clusters).vectors
    names = _param_names(state, ("phi", "psi"))
    acc = {n: 0.0 for n in names}
    reports = []
    for _ in range(n_copies):
        view = perturb(state, sample_noise(state, rngs.noise)) if flat else state
        g = Graph()
        terms, protos = _representation_terms(g, view, state, v1, v2, labels, n_clusters, cfg)
        if flat:
            terms["drift"] = L.drift(protos.vectors, g.constant(cstar))
        total, terms = L.base_loss(**terms, weights=cfg.weights)
        if not isinstance(total, tc.Node):
            reports.append(L.LossReport())
            continue
        reports.append(L.evaluate_report(g, total, terms))
        for n, gr in g.gradient(total, names).items():
            acc[n] = acc[n] + gr
    grads = {n: v / n_copies for n, v in acc.items() if isinstance(v, np.ndarray)}
    opt.step(state, grads, lr)
    momentum_update(state)
    return _mean_report(reports)


def _mean_report(reports: list[L.LossReport]) -> L.LossReport:
    keys = L.LossReport().as_dict().keys()
    return L.LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def _cluster(state: ModelState, x: np.ndarray, n_clusters: int, seed: int, restarts: int):
    z = represent(state, x)
    # a collapsed representation can leave fewer distinct embeddings than clusters
    n_clusters = max(1, min(n_clusters, len(np.unique(z, axis=0))))
    clusters, labels = kmeans(z, n_clusters, seed=seed, n_init=restarts)
    return clusters, labels


def _label_clusters(state: ModelState, clusters: ClusterSet, task: Task) -> ClusterSet:
    ax, ay = task.anchors
    return map_clusters_to_classes(clusters, represent(state, ax), ay)


def train_base(task: Task, state: ModelState, cfg: TrainConfig, log: RunLog | None = None,
               rngs: Rngs | None = None) -> tuple[ModelState, ClusterSet]:
    """Base session: pseudo-label with k-means each epoch, then flat-wide minibatch updates.

    Ends by freezing the anchor phi*, computing MAS importance on the task and
    returning the task's labelled cluster set.
    """
    x = task.x_train
    if len(x) == 0:
        raise EmptyTask("base task has no training samples")
    log = log or RunLog()
    rngs = rngs or Rngs(cfg.seed)
    n_clusters = task.n_ways
    jitter = input_jitter_scale(x, cfg.weights)
    opt = SGD(cfg.sgd_momentum, cfg.weight_decay)
    step = 0
    for epoch in range(cfg.epochs_base):
        _, labels = _cluster(state, x, n_clusters, rngs.kmeans_seed(), cfg.kmeans_restarts_base)
        order = rngs.batches.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            report = base_step(state, x[idx], labels[idx], n_clusters, cfg, rngs, opt, jitter, cfg.lr_base)
            log.write({"type": "batch", "session": 1, "epoch": epoch, "step": step, **report.as_dict()})
            step += 1
    snapshot_anchor(state)
    gamma = L.mas_importance(state, x)
    state.gamma, state.gamma_count = L.merge_importance(None, 0, gamma, len(x))
    state.theta_prev = {k: v.copy() for k, v in state.theta().items()}
    clusters, _ = _cluster(state, x, n_clusters, rngs.kmeans_seed(), cfg.kmeans_restarts_base)
    return state, _label_clusters(state, clusters, task)


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float) -> float:
    if epochs <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def fewshot_step(session: SessionState, xb, labels, clusters: ClusterSet, cfg: TrainConfig, rngs: Rngs,
                 opt: SGD, jitter: np.ndarray, lr: float) -> L.LossReport:
    state = session.state
    ab, w = cfg.ablation, cfg.weights
    n_clusters = len(clusters)
    v1, v2 = _views(xb, cfg, rngs, jitter)
    g = Graph()
    terms, protos = _representation_terms(g, state, state, v1, v2, labels, n_clusters, cfg)
    if not ab.disable_ball and len(protos.present) >= 2:
        synth = synth_batch(clusters, cfg.synthetic_count(len(xb)), state, rngs.ball, g)
        # owners index the full cluster set; prototypes exist only for present clusters
        slot = {int(c): i for i, c in enumerate(protos.present)}
        keep = np.array([int(o) in slot for o in synth.owners])
        if keep.all():
            owners = np.array([slot[int(o)] for o in synth.owners])
            terms["ball"] = L.ball_triplet(synth.samples, owners, protos.vectors, w.margin_r)
    if not ab.disable_mas and state.gamma is not None and state.theta_prev is not None:
        registered = g.parameters
        theta = {name: registered.get(name) or g.param(name, value) for name, value in state.theta().items()}
        terms["mas"] = L.mas_penalty(theta, state.theta_prev, state.gamma, w.lambda5)
    total, terms = L.fewshot_loss(**terms, weights=w)
    if not isinstance(total, tc.Node):
        return L.LossReport()
    report = L.evaluate_report(g, total, terms)
    names = [n for n in _param_names(state, ("phi", "psi", "w_proj")) if n in g.parameters]
    opt.step(state, g.gradient(total, names), lr)
    return report


def train_fewshot(task: Task, session: SessionState, cfg: TrainConfig, log: RunLog | None = None,
                  rngs: Rngs | None = None) -> SessionState:
    """Few-shot session: ball-augmented, MAS-regularised updates clamped to the flat region."""
    state = session.state
    if state.phi_anchor is None:
        raise MissingAnchor("few-shot training requires the base-phase anchor")
    seen = {c for cls in session.classes for c in cls}
    if seen & set(task.classes):
        raise ClassOverlap(f"classes {sorted(seen & set(task.classes))} were learned in an earlier session")
    x = task.x_train
    if len(x) == 0:
        raise EmptyTask("few-shot task has no samples")
    log = log or RunLog()
    rngs = rngs or Rngs(cfg.seed)
    n_clusters = min(task.n_ways, len(np.unique(x, axis=0)))
    jitter = input_jitter_scale(x, cfg.weights)
    opt = SGD(cfg.sgd_momentum, cfg.weight_decay)
    reports = []
    session_no = session.k + 1
    for epoch in range(cfg.epochs_fewshot):
        lr = cosine_lr(epoch, cfg.epochs_fewshot, cfg.lr_fewshot_max, cfg.lr_fewshot_min)
        clusters, labels = _cluster(state, x, n_clusters, rngs.kmeans_seed(), cfg.kmeans_restarts_fewshot)
        order = rngs.batches.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            report = fewshot_step(session, x[idx], labels[idx], clusters, cfg, rngs, opt, jitter, lr)
            reports.append(report)
            log.write({"type": "batch", "session": session_no, "epoch": epoch, **report.as_dict()})
        if cfg.ablation.clamp:
            clamp_to_flat_region(state)
            dev = max_anchor_deviation(state)
            if dev > state.bound_b + CLAMP_TOLERANCE:
                session.clamp_violations += 1
                log.write({"type": "violation", "session": session_no, "epoch": epoch, "deviation": dev})
        momentum_update(state)
    if cfg.epochs_fewshot > 0 and not cfg.ablation.disable_mas:
        gamma = L.mas_importance(state, x)
        state.gamma, state.gamma_count = L.merge_importance(state.gamma, state.gamma_count, gamma, len(x))
        state.theta_prev = {k: v.copy() for k, v in state.theta().items()}
    clusters, _ = _cluster(state, x, n_clusters, rngs.kmeans_seed(), cfg.kmeans_restarts_fewshot)
    session.clusters.append(_label_clusters(state, clusters, task))
    session.classes.append(task.classes)
    session.history.append(reports)
    return session


def network_for(tasks: TaskSequence, hidden_dims=(64, 64), feature_dim: int = 32, projected_dim: int = 16,
                extractor: str | None = None) -> NetworkShape:
    dim = tasks.base_task.x_train.shape[1]
    kind = extractor or ("conv" if tasks.image_shape is not None else "mlp")
    return NetworkShape(input_dim=dim, hidden_dims=tuple(hidden_dims), feature_dim=feature_dim,
                        projected_dim=projected_dim, extractor=kind,
                        image_shape=tasks.image_shape if kind == "conv" else None)


def run_sequence(tasks: TaskSequence, cfg: TrainConfig, shape: NetworkShape | None = None,
                 log: RunLog | None = None, state: ModelState | None = None) -> SessionMetrics:
    """Train the base task then each few-shot task, evaluating on all classes seen so far."""
    from .metrics import session_accuracy as _acc

    log = log or RunLog()
    rngs = Rngs(cfg.seed)
    shape = shape or network_for(tasks)
    if state is None:
        state = init_state(shape, seed=cfg.seed, bound_b=cfg.bound_b, momentum_m=cfg.momentum_m)
    accuracies, seconds, sizes = [], [], []

    t0 = time.perf_counter()
    state, base_clusters = train_base(tasks.base_task, state, cfg, log, rngs)
    session = SessionState(state, [base_clusters], [tasks.base_task.classes], [])
    base_pred = assign_many(represent(state, tasks.base_task.x_train), base_clusters.centroids)
    base_cluster_acc = matched_accuracy(base_pred, tasks.base_task.y_train)

    test_x, test_y = [], []
    for k, task in enumerate(tasks.tasks, start=1):
        if k > 1:
            t0 = time.perf_counter()
            train_fewshot(task, session, cfg, log, rngs)
        test_x.append(task.x_test)
        test_y.append(task.y_test)
        xs, ys = np.concatenate(test_x), np.concatenate(test_y)
        acc = _acc(classify_batch(state, session.clusters, xs), ys) if len(ys) else 0.0
        dt = time.perf_counter() - t0
        accuracies.append(acc)
        seconds.append(dt)
        sizes.append(len(ys))
        log.write({"type": "session", "session": k, "accuracy": acc, "seconds": dt, "test_size": len(ys)})
    return SessionMetrics(accuracies, seconds, base_cluster_acc, cfg.seed, session.clamp_violations, sizes)
