"""Loss terms for representation learning, flat-wide training, ball augmentation and MAS.

Every loss accepts graph Nodes (returns a Node) or plain arrays (returns a
float, evaluated in a throwaway graph). Shapes of Node inputs are read by
evaluating them, which the lazy graph caches for the later backward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .errors import (
    DegenerateClusterCount,
    EmptyBatch,
    NoNegatives,
    ShapeMismatch,
    SingleCluster,
    ValidationError,
)
from .tensor import Graph, Node

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.1
    lambda5: float = 1.0
    tau: float = 0.1
    sigma_psa: float = 0.1
    margin_r: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValidationError(f.name, "must be finite")
            if v < 0:
                raise ValidationError(f.name, "must be non-negative")
        if self.tau <= 0:
            raise ValidationError("tau", "must be positive")


@dataclass
class LossReport:
    psl: float = 0.0
    psa: float = 0.0
    kl: float = 0.0
    drift: float = 0.0
    ball: float = 0.0
    mas: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


class _Lift:
    """Put array arguments on a common graph; remember whether to evaluate at the end."""

    def __init__(self, *args):
        graph = next((a.graph for a in args if isinstance(a, Node)), None)
        self.eager = graph is None
        self.graph = graph if graph is not None else Graph()
        self.nodes = tuple(self.graph.wrap(a if isinstance(a, Node) else np.asarray(a, dtype=np.float64))
                           for a in args)

    def out(self, node: Node):
        if not self.eager:
            return node
        v = self.graph.evaluate(node)
        return float(v) if v.ndim == 0 else v


def _shape(node: Node) -> tuple[int, ...]:
    return node.graph.evaluate(node).shape


def _shifted_logsumexp_rows(scores: Node, mask: np.ndarray, shift: float) -> Node:
    """log sum_j mask_ij exp(scores_ij) per row, shifted by a known upper bound."""
    g = scores.graph
    e = tc.exp(scores - shift) * g.constant(mask)
    return tc.log(tc.sum(e, axis=-1)) + shift


# ---------------------------------------------------------------------------
# representation learning

def info_nce(z, z_pos, negatives, tau: float):
    """InfoNCE on unit-normalised vectors: -z.z+/tau + log sum_i exp(z.z-_i/tau)."""
    lift = _Lift(z, z_pos, negatives)
    z, zp, neg = lift.nodes
    neg_shape = _shape(neg)
    if len(neg_shape) != 2 or neg_shape[0] == 0:
        raise NoNegatives("at least one negative is required")
    zn, zpn, negn = tc.l2_normalize(z), tc.l2_normalize(zp), tc.l2_normalize(neg, axis=1)
    align = tc.sum(zn * zpn) / tau
    scores = tc.matmul(negn, zn) / tau
    unif = _shifted_logsumexp_rows(scores, np.ones(neg_shape[0]), 1.0 / tau)
    return lift.out(unif - align)


def psl(prototypes, aug_prototypes, tau: float):
    """Prototype scattering loss over unit prototypes C and their augmented twins C'.

    mean_c(-C_c.C'_c / tau) + mean_s log sum_{c != s} exp(C_s.C_c / tau)
    """
    lift = _Lift(prototypes, aug_prototypes)
    c, cp = lift.nodes
    shape = _shape(c)
    if _shape(cp) != shape or len(shape) != 2:
        raise ShapeMismatch(f"psl: {shape} vs {_shape(cp)}")
    n = shape[0]
    if n < 2:
        raise DegenerateClusterCount(f"psl needs at least 2 clusters, got {n}")
    align = tc.mean(tc.sum(c * cp, axis=1)) / tau
    gram = tc.matmul(c, c, transpose_b=True) / tau
    off_diag = 1.0 - np.eye(n)
    unif = tc.mean(_shifted_logsumexp_rows(gram, off_diag, 1.0 / tau))
    return lift.out(unif - align)


def psa(online_out, target_out):
    """Squared L2 distance; for (B, d) inputs the mean of the per-row distances."""
    lift = _Lift(online_out, target_out)
    a, b = lift.nodes
    sa, sb = _shape(a), _shape(b)
    if sa != sb:
        raise ShapeMismatch(f"psa: {sa} vs {sb}")
    diff = a - b
    total = tc.sum(diff * diff)
    if len(sa) == 2:
        total = total / sa[0]
    return lift.out(total)


def kl_uniform(logits):
    """KL(softmax(logits) || uniform) = sum_i p_i log(M p_i). Rows are averaged for 2-D input."""
    lift = _Lift(logits)
    (x,) = lift.nodes
    shape = _shape(x)
    m = shape[-1]
    if m < 2:
        raise ShapeMismatch("kl_uniform needs at least 2 outputs")
    p = tc.softmax(x, axis=-1)
    terms = p * tc.log(tc.clamp(p * float(m), PROB_FLOOR * m, float(m)))
    kl = tc.sum(terms, axis=-1)
    if len(shape) == 2:
        kl = tc.mean(kl)
    return lift.out(kl)


def drift(prototypes, prototypes_star):
    """sum_c ||C_c - C*_c||_2."""
    lift = _Lift(prototypes, prototypes_star)
    c, cs = lift.nodes
    if _shape(c) != _shape(cs):
        raise ShapeMismatch(f"drift: {_shape(c)} vs {_shape(cs)}")
    return lift.out(tc.sum(tc.norm(c - cs, axis=-1)))


# ---------------------------------------------------------------------------
# ball generator

def ball_triplet(projected, owners: Sequence[int], centroids, margin_r: float):
    """sum over samples and j != owner of max(0, d(z, C_owner) + r - d(z, C_j))."""
    lift = _Lift(projected, centroids)
    z, cents = lift.nodes
    n = _shape(cents)[0]
    if n < 2:
        raise SingleCluster("ball triplet loss needs at least 2 centroids")
    owners = np.asarray(owners, dtype=np.int64)
    s = _shape(z)[0]
    if owners.shape != (s,) or owners.min() < 0 or owners.max() >= n:
        raise ValueError("owner ids must be one per sample and index a centroid")
    g = lift.graph
    onehot = np.zeros((s, n))
    onehot[np.arange(s), owners] = 1.0
    d = tc.dist(z, cents)
    # own-cluster distance copied into every column
    own = tc.matmul(d * g.constant(onehot), g.constant(np.ones((n, n))))
    hinge = tc.relu(own + float(margin_r) - d) * g.constant(1.0 - onehot)
    return lift.out(tc.sum(hinge))


# ---------------------------------------------------------------------------
# memory aware synapses

def mas_importance_fn(forward: Callable[[Graph, dict[str, Node], Node], Node],
                      params: Mapping[str, np.ndarray], inputs) -> dict[str, np.ndarray]:
    """Mean absolute gradient of ||forward(x)||^2 per parameter, one sample at a time."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise EmptyBatch("MAS importance needs at least one sample")
    g = Graph()
    pnodes = {k: g.param(k, v) for k, v in params.items()}
    x = g.input("x")
    out = forward(g, pnodes, x)
    sq = tc.sum(out * out)
    acc = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
    for sample in inputs:
        g.bind("x", sample)
        for k, gr in g.gradient(sq, list(params)).items():
            acc[k] += np.abs(gr)
    return {k: v / len(inputs) for k, v in acc.items()}


def mas_importance(state, inputs) -> dict[str, np.ndarray]:
    """Importance of every phi and psi entry, keyed ``phi.<name>`` / ``psi.<name>``."""
    from .model import extractor_forward, _mlp

    shape = state.shape

    def forward(g, p, x):
        phi = {k[4:]: v for k, v in p.items() if k.startswith("phi.")}
        psi = {k[4:]: v for k, v in p.items() if k.startswith("psi.")}
        return _mlp(shape, psi, extractor_forward(shape, phi, x), len(shape.head_hidden) + 1)

    return mas_importance_fn(forward, state.theta(), inputs)


def merge_importance(gamma_old, n_old: int, gamma_new, n_new: int):
    """Sample-count weighted running mean of two importance maps."""
    if gamma_old is None or n_old == 0:
        return {k: v.copy() for k, v in gamma_new.items()}, n_new
    total = n_old + n_new
    merged = {k: (n_old * gamma_old[k] + n_new * gamma_new[k]) / total for k in gamma_new}
    return merged, total


def mas_penalty(theta: Mapping, theta_prev: Mapping, gamma: Mapping, lambda5: float):
    """lambda5 * sum_i Gamma_i (theta_i - theta_prev_i)^2; projection-module entries are skipped."""
    names = [k for k in theta if not k.startswith("w_proj")]
    for k in names:
        if k not in theta_prev or k not in gamma:
            raise ShapeMismatch(f"mas_penalty: no previous value or importance for {k}")
    lift = _Lift(*(theta[k] for k in names))
    g = lift.graph
    total = None
    for k, node in zip(names, lift.nodes):
        prev = np.asarray(theta_prev[k], dtype=np.float64)
        gam = np.asarray(gamma[k], dtype=np.float64)
        if prev.shape != gam.shape or _shape(node) != prev.shape:
            raise ShapeMismatch(f"mas_penalty: shape mismatch for {k}")
        diff = node - g.constant(prev)
        term = tc.sum(g.constant(gam) * diff * diff)
        total = term if total is None else total + term
    if total is None:
        return 0.0 if lift.eager else g.constant(0.0)
    return lift.out(total * float(lambda5))


# ---------------------------------------------------------------------------
# composites

_BASE_WEIGHTS = {"psl": None, "psa": "lambda1", "kl": "lambda2", "drift": "lambda3"}
_FEWSHOT_WEIGHTS = {"psl": None, "psa": "lambda1", "kl": "lambda2", "ball": "lambda4", "mas": None}


def _composite(spec: dict, terms: dict, weights: LossWeights):
    total = None
    for name, wname in spec.items():
        term = terms.get(name)
        if term is None:
            continue
        w = 1.0 if wname is None else getattr(weights, wname)
        piece = term * w if w != 1.0 else term
        total = piece if total is None else total + piece
    return 0.0 if total is None else total


def base_loss(psl=None, psa=None, kl=None, drift=None, weights: LossWeights = LossWeights()):
    """psl + l1*psa + l2*kl + l3*drift over one perturbed copy. ``None`` terms are inactive.

    Returns ``(total, terms)``; with float inputs ``terms`` is a LossReport.
    """
    terms = {"psl": psl, "psa": psa, "kl": kl, "drift": drift}
    total = _composite(_BASE_WEIGHTS, terms, weights)
    return _finish(total, terms)


def fewshot_loss(psl=None, psa=None, kl=None, ball=None, mas=None, weights: LossWeights = LossWeights()):
    """psl + l1*psa + l2*kl + l4*ball + mas (mas already carries lambda5)."""
    terms = {"psl": psl, "psa": psa, "kl": kl, "ball": ball, "mas": mas}
    total = _composite(_FEWSHOT_WEIGHTS, terms, weights)
    return _finish(total, terms)


def _finish(total, terms):
    if any(isinstance(t, Node) for t in (total, *terms.values())):
        return total, terms
    report = LossReport(**{k: float(v) for k, v in terms.items() if v is not None}, total=float(total))
    return float(total), report


def evaluate_report(graph: Graph, total: Node, terms: dict) -> LossReport:
    def val(x):
        if x is None:
            return 0.0
        return float(graph.evaluate(x)) if isinstance(x, Node) else float(x)

    return LossReport(**{k: val(v) for k, v in terms.items()}, total=val(total))
