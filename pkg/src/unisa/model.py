"""Networks and parameter state: online/target extractor, head, projection module."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .errors import MissingAnchor, NoiseOutOfBound, ShapeMismatch, ValidationError
from .tensor import Graph, Node

Params = dict[str, np.ndarray]

BLOCKS = ("phi", "psi", "w_proj")


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    projected_dim: int = 16
    output_dim: int | None = None
    activation: str = "relu"
    extractor: str = "mlp"
    image_shape: tuple[int, int, int] | None = None
    conv_channels: tuple[int, int] = (8, 16)
    head_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        dims = [self.input_dim, self.feature_dim, self.projected_dim, *self.hidden_dims, *self.head_hidden]
        if any(int(d) < 1 for d in dims):
            raise ValidationError("network", "all dimensions must be >= 1")
        if self.projected_dim < 2:
            raise ValidationError("projected_dim", "ball sampling needs at least 2 dimensions")
        if self.output_dim is None:
            object.__setattr__(self, "output_dim", self.projected_dim)
        if self.output_dim != self.projected_dim:
            # the wide-minima KL term is taken over the softmaxed head output
            raise ValidationError("output_dim", "must equal projected_dim")
        if self.activation not in ("relu", "linear"):
            raise ValidationError("activation", f"unknown activation {self.activation!r}")
        if self.extractor not in ("mlp", "conv"):
            raise ValidationError("extractor", f"unknown extractor {self.extractor!r}")
        if self.extractor == "conv":
            if self.image_shape is None:
                raise ValidationError("image_shape", "conv extractor needs an image shape")
            c, h, w = self.image_shape
            if c * h * w != self.input_dim or h % 4 or w % 4:
                raise ValidationError("image_shape", "must match input_dim and be divisible by 4")


@dataclass
class ModelState:
    shape: NetworkShape
    phi: Params
    psi: Params
    phi_target: Params
    w_proj: Params
    phi_anchor: Params | None = None
    bound_b: float = 0.01
    momentum_m: float = 0.99
    gamma: Params | None = None
    gamma_count: int = 0
    theta_prev: Params | None = None

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def block(self, name: str) -> Params:
        return getattr(self, name)

    def theta(self) -> Params:
        """phi and psi flattened into one name-qualified dict (the MAS parameter set)."""
        out = {f"phi.{k}": v for k, v in self.phi.items()}
        out.update({f"psi.{k}": v for k, v in self.psi.items()})
        return out


# ---------------------------------------------------------------------------
# construction

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _dense(rng, params: Params, name: str, n_in: int, n_out: int) -> None:
    params[f"{name}.W"] = _uniform(rng, n_in, (n_in, n_out))
    params[f"{name}.b"] = _uniform(rng, n_in, (n_out,))


def _init_extractor(rng, shape: NetworkShape) -> Params:
    p: Params = {}
    if shape.extractor == "conv":
        c, h, w = shape.image_shape
        c1, c2 = shape.conv_channels
        p["conv0.W"] = _uniform(rng, c * 9, (c1, c, 3, 3))
        p["conv0.b"] = _uniform(rng, c * 9, (c1,))
        p["conv1.W"] = _uniform(rng, c1 * 9, (c2, c1, 3, 3))
        p["conv1.b"] = _uniform(rng, c1 * 9, (c2,))
        flat = c2 * (h // 4) * (w // 4)
        _dense(rng, p, "fc0", flat, shape.feature_dim)
        return p
    dims = [shape.input_dim, *shape.hidden_dims, shape.feature_dim]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        _dense(rng, p, f"fc{i}", a, b)
    return p


def _init_head(rng, shape: NetworkShape) -> Params:
    p: Params = {}
    dims = [shape.feature_dim, *shape.head_hidden, shape.projected_dim]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        _dense(rng, p, f"fc{i}", a, b)
    return p


def init_state(shape: NetworkShape, seed: int = 0, bound_b: float = 0.01,
               momentum_m: float = 0.99) -> ModelState:
    rng = np.random.default_rng(seed)
    phi = _init_extractor(rng, shape)
    psi = _init_head(rng, shape)
    w_proj: Params = {}
    _dense(rng, w_proj, "fc0", shape.projected_dim, shape.projected_dim)
    _dense(rng, w_proj, "fc1", shape.projected_dim, shape.projected_dim)
    return ModelState(
        shape=shape,
        phi=phi,
        psi=psi,
        phi_target={k: v.copy() for k, v in phi.items()},
        w_proj=w_proj,
        bound_b=float(bound_b),
        momentum_m=float(momentum_m),
    )


# ---------------------------------------------------------------------------
# graph binding

def bind_block(graph: Graph, params: Params, prefix: str, trainable: bool) -> dict[str, Node]:
    """Register a parameter block in ``graph``.

    Trainable blocks become named parameters ``{prefix}.{key}``; frozen blocks
    become anonymous constants and so carry no gradient edges.
    """
    if trainable:
        return {k: graph.param(f"{prefix}.{k}", v) for k, v in params.items()}
    return {k: graph.constant(v) for k, v in params.items()}


def _act(shape: NetworkShape, h: Node) -> Node:
    return tc.relu(h) if shape.activation == "relu" else h


def _mlp(shape: NetworkShape, p: dict[str, Node], x: Node, n_layers: int) -> Node:
    h = x
    for i in range(n_layers):
        h = tc.linear(h, p[f"fc{i}.W"], p[f"fc{i}.b"])
        if i < n_layers - 1:
            h = _act(shape, h)
    return h


def extractor_forward(shape: NetworkShape, p: dict[str, Node], x: Node) -> Node:
    if shape.extractor == "conv":
        c, h, w = shape.image_shape
        c1, c2 = shape.conv_channels
        a = _act(shape, tc.conv2d(x, p["conv0.W"], p["conv0.b"], (c, h, w)))
        a = tc.avg_pool2(a, (c1, h, w))
        a = _act(shape, tc.conv2d(a, p["conv1.W"], p["conv1.b"], (c1, h // 2, w // 2)))
        a = tc.avg_pool2(a, (c2, h // 2, w // 2))
        return tc.linear(a, p["fc0.W"], p["fc0.b"])
    return _mlp(shape, p, x, len(shape.hidden_dims) + 1)


def _check_width(x, width: int, what: str) -> None:
    arr_shape = x.shape if isinstance(x, np.ndarray) else None
    if arr_shape is not None and (arr_shape[-1] != width or len(arr_shape) not in (1, 2)):
        raise ShapeMismatch(f"{what}: expected trailing dimension {width}, got {arr_shape}")


def _run(build, x):
    """Evaluate ``build(graph, x_node)`` on a plain array in a throwaway graph."""
    g = Graph()
    return g.evaluate(build(g, g.constant(x)))


def embed(state: ModelState, x, network: str = "online", graph: Graph | None = None):
    """Feature vector z from the online (trainable) or target (frozen) extractor.

    With ``graph`` given, ``x`` may be a Node and a Node is returned; otherwise
    ``x`` is an array and the value is computed directly.
    """
    if network not in ("online", "target"):
        raise ValueError(f"network must be 'online' or 'target', got {network!r}")
    if graph is None:
        x = tc.as_tensor(x)
        _check_width(x, state.shape.input_dim, "embed")
        return _run(lambda g, xn: embed(state, xn, network, g), x)
    if network == "online":
        p = bind_block(graph, state.phi, "phi", trainable=True)
    else:
        p = bind_block(graph, state.phi_target, "phi_target", trainable=False)
    return extractor_forward(state.shape, p, graph.wrap(x))


def head(state: ModelState, z, graph: Graph | None = None, trainable: bool = True):
    if graph is None:
        z = tc.as_tensor(z)
        _check_width(z, state.shape.feature_dim, "head")
        return _run(lambda g, zn: head(state, zn, g, trainable), z)
    p = bind_block(graph, state.psi, "psi", trainable=trainable)
    return _mlp(state.shape, p, graph.wrap(z), len(state.shape.head_hidden) + 1)


def project_feature(state: ModelState, z_tilde, graph: Graph | None = None):
    """Two-layer relu projection applied to ball samples."""
    if graph is None:
        z_tilde = tc.as_tensor(z_tilde)
        _check_width(z_tilde, state.shape.projected_dim, "project_feature")
        return _run(lambda g, zn: project_feature(state, zn, g), z_tilde)
    p = bind_block(graph, state.w_proj, "w_proj", trainable=True)
    h = tc.relu(tc.linear(graph.wrap(z_tilde), p["fc0.W"], p["fc0.b"]))
    return tc.linear(h, p["fc1.W"], p["fc1.b"])


def represent(state: ModelState, x, graph: Graph | None = None, network: str = "target"):
    """Unit-normalised head output; the space clustering and inference live in."""
    if graph is None:
        x = tc.as_tensor(x)
        return _run(lambda g, xn: represent(state, xn, g, network), x)
    trainable = network == "online"
    return tc.l2_normalize(head(state, embed(state, x, network, graph), graph, trainable=trainable), axis=-1)


# ---------------------------------------------------------------------------
# parameter manipulation

def momentum_update(state: ModelState) -> ModelState:
    """phi_target <- m * phi_target + (1 - m) * phi, in place."""
    m = state.momentum_m
    if m == 1.0:
        return state
    for k, p in state.phi.items():
        if m == 0.0:
            state.phi_target[k] = p.copy()
        else:
            # same convex combination, written so that t == phi stays bit-exact
            t = state.phi_target[k]
            state.phi_target[k] = t + (1.0 - m) * (p - t)
    return state


def perturb(state: ModelState, epsilon: Params) -> ModelState:
    """A view of ``state`` whose phi is phi + epsilon. The base state is untouched."""
    b = state.bound_b
    if set(epsilon) != set(state.phi):
        raise ShapeMismatch("epsilon blocks do not match phi")
    new_phi = {}
    for k, p in state.phi.items():
        e = np.asarray(epsilon[k], dtype=np.float64)
        if e.shape != p.shape:
            raise ShapeMismatch(f"epsilon[{k}] has shape {e.shape}, expected {p.shape}")
        if np.any(np.abs(e) > b):
            raise NoiseOutOfBound(f"|epsilon[{k}]| exceeds b={b}")
        new_phi[k] = p + e
    return replace(state, phi=new_phi)


def sample_noise(state: ModelState, rng: np.random.Generator) -> Params:
    b = state.bound_b
    return {k: rng.uniform(-b, b, size=p.shape) for k, p in state.phi.items()}


def clamp_to_flat_region(state: ModelState) -> ModelState:
    if state.phi_anchor is None:
        raise MissingAnchor("snapshot_anchor has not been called")
    b = state.bound_b
    for k, p in state.phi.items():
        a = state.phi_anchor[k]
        state.phi[k] = np.minimum(np.maximum(p, a - b), a + b)
    return state


def snapshot_anchor(state: ModelState) -> ModelState:
    state.phi_anchor = {k: v.copy() for k, v in state.phi.items()}
    return state


def max_anchor_deviation(state: ModelState) -> float:
    if state.phi_anchor is None:
        raise MissingAnchor("no anchor")
    return max(float(np.max(np.abs(state.phi[k] - state.phi_anchor[k]))) for k in state.phi)


# ---------------------------------------------------------------------------
# serialization: flat little-endian float64 blob + JSON sidecar

_OPTIONAL = ("phi_anchor", "gamma", "theta_prev")


def save_state(state: ModelState, path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    meta_path = path.with_suffix(".json")
    blocks = []
    chunks = []
    offset = 0
    for block in (*BLOCKS, "phi_target", *_OPTIONAL):
        params = getattr(state, block)
        if params is None:
            continue
        for key in sorted(params):
            arr = np.ascontiguousarray(params[key], dtype="<f8")
            blocks.append({"block": block, "name": key, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            chunks.append(arr.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    blob.astype("<f8").tofile(blob_path)
    s = state.shape
    meta = {
        "format": "unisa-params",
        "version": 1,
        "dtype": "float64-le",
        "count": int(offset),
        "blocks": blocks,
        "bound_b": state.bound_b,
        "momentum_m": state.momentum_m,
        "gamma_count": state.gamma_count,
        "network": {
            "input_dim": s.input_dim,
            "hidden_dims": list(s.hidden_dims),
            "feature_dim": s.feature_dim,
            "projected_dim": s.projected_dim,
            "output_dim": s.output_dim,
            "activation": s.activation,
            "extractor": s.extractor,
            "image_shape": list(s.image_shape) if s.image_shape else None,
            "conv_channels": list(s.conv_channels),
            "head_hidden": list(s.head_hidden),
        },
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return blob_path, meta_path


def load_state(path: str | Path) -> ModelState:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if blob.size != meta["count"]:
        raise ValueError("parameter blob size does not match sidecar")
    net = dict(meta["network"])
    net["hidden_dims"] = tuple(net["hidden_dims"])
    net["conv_channels"] = tuple(net["conv_channels"])
    net["head_hidden"] = tuple(net["head_hidden"])
    net["image_shape"] = tuple(net["image_shape"]) if net["image_shape"] else None
    blocks: dict[str, Params] = {}
    for entry in meta["blocks"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = blob[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
        blocks.setdefault(entry["block"], {})[entry["name"]] = arr
    return ModelState(
        shape=NetworkShape(**net),
        phi=blocks["phi"],
        psi=blocks["psi"],
        phi_target=blocks["phi_target"],
        w_proj=blocks["w_proj"],
        phi_anchor=blocks.get("phi_anchor"),
        gamma=blocks.get("gamma"),
        theta_prev=blocks.get("theta_prev"),
        bound_b=meta["bound_b"],
        momentum_m=meta["momentum_m"],
        gamma_count=meta["gamma_count"],
    )
